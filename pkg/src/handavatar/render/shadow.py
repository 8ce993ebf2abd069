"""Shadow-map visibility with sigmoid depth comparison and 3x3 percentage-closer filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from . import kernels
from .raster import NEAR

BIAS = 0.005          # meters
SHARPNESS = 1000.0    # 1 / meters
MAP_SIZE = 512
LIGHT_CLAMP = 1.0     # meters, max shadow-camera distance to the mesh centroid
FOV_MARGIN = 1.2
_TAPS = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)
UNOCCLUDED = 1.0 / (1.0 + np.exp(-SHARPNESS * BIAS))  # sigma(5)


def depth_test(Z, d):
    """``sigmoid(s (Z - d + b))`` with the shadow constants."""
    return ad.sigmoid(SHARPNESS * (Z - d + BIAS))


@dataclass
class ShadowCamera:
    position: ad.Tensor   # (3,) world
    rotation: ad.Tensor   # (3, 3) rows = camera axes in world coordinates
    focal: ad.Tensor      # scalar, pixels
    size: int

    @property
    def principal(self) -> float:
        return self.size / 2.0


def shadow_camera(vertices, light, size: int = MAP_SIZE) -> ShadowCamera:
    """Virtual camera at the light aimed at the mesh centroid.

    A light farther than ``LIGHT_CLAMP`` from the centroid gets its camera
    moved to that distance along the same direction. The field of view is the
    cone around the bounding sphere, widened by ``FOV_MARGIN``.
    """
    V, light = ad.const(vertices), ad.const(light)
    c = ad.mean(V, axis=0)
    dvec = c - light
    dist = ad.norm(dvec)
    fwd = dvec / dist
    dc = ad.where(dist.value > LIGHT_CLAMP, ad.const(LIGHT_CLAMP), dist)
    pos = c - fwd * dc
    hint = np.array([0.0, 1.0, 0.0]) if abs(fwd.value[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = ad.normalize(ad.cross(hint, fwd))
    y = ad.cross(fwd, x)
    R = ad.stack([x, y, fwd])
    radius = ad.amax(ad.norm(V - c, eps=1e-30))
    s = ad.clamp(FOV_MARGIN * radius / dc, None, 0.99)
    focal = (size / 2.0) / ad.tan(ad.arcsin(s))
    return ShadowCamera(pos, R, focal, size)


def shadow_map(vertices, faces: np.ndarray, cam: ShadowCamera):
    """Face-id z-buffer seen from the shadow camera plus shadow-space vertices."""
    Xs = ad.matmul(ad.const(vertices) - cam.position, ad.transpose(cam.rotation))
    xs = Xs.value
    z = xs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = cam.focal.value * xs[:, :2] / z[:, None] + cam.principal
    xy = np.where(np.isfinite(xy), xy, 0.0)
    fmap, _ = kernels.raster(xy, z, faces, cam.size, cam.size, NEAR, 0.0, 0.0)
    return fmap, Xs


def visibility(vertices, faces: np.ndarray, lights, points, size: int = MAP_SIZE):
    """Soft visibility (P, M) of ``points`` from each light.

    Per light: build the shadow map, project every point, and average
    ``sigmoid(s (Z - d + b))`` over a 3x3 tap neighbourhood, where ``Z`` is the
    distance from the light to the first surface along the tap's shadow ray
    and ``d`` the point's own distance to the light. Taps that hit nothing
    count as unoccluded; points projecting outside the map are lit (V = 1).
    """
    lights = ad.const(lights)
    P = ad.const(points)
    cols = []
    for m in range(lights.shape[0]):
        cols.append(_visibility_one(vertices, faces, lights[m], P, size))
    return ad.stack(cols, axis=1)


def _visibility_one(vertices, faces, light, P, size):
    cam = shadow_camera(vertices, light, size)
    fmap, Xs = shadow_map(vertices, faces, cam)
    n = P.shape[0]
    if n == 0:
        return ad.const(np.zeros(0))
    d = ad.norm(P - light)
    ps = ad.matmul(P - cam.position, ad.transpose(cam.rotation))
    zs = ps.value[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        qv = cam.focal.value * ps.value[:, :2] / zs[:, None] + cam.principal
    ok = (zs > NEAR) & np.all(np.isfinite(qv), axis=1) & np.all((qv >= 0) & (qv < size), axis=1)
    rows = np.flatnonzero(ok)
    if rows.size == 0:
        return ad.const(np.ones(n))
    psr = ps[rows]
    q = cam.focal * psr[:, 0:2] / psr[:, 2:3] + cam.principal        # (R, 2)
    k = len(_TAPS)
    qt = ad.reshape(ad.reshape(q, (-1, 1, 2)) + _TAPS, (-1, 2))        # (R*9, 2)
    qtv = qt.value
    dirs_s = ad.concatenate([(qt - cam.principal) / cam.focal, ad.const(np.ones((len(qtv), 1)))], axis=1)

    # candidate faces from the 3x3 shadow-map neighbourhood of each tap
    pix = np.floor(qtv).astype(np.int64)
    cand = np.full((len(qtv), 9), -1, dtype=np.int64)
    for s, (ox, oy) in enumerate(_TAPS.astype(np.int64)):
        cx, cy = pix[:, 0] + ox, pix[:, 1] + oy
        inside = (cx >= 0) & (cx < size) & (cy >= 0) & (cy < size)
        cand[inside, s] = fmap[cy[inside], cx[inside]]
    tri = Xs.value[faces]
    hit = kernels.pick_faces(dirs_s.value, tri, cand)

    vt = ad.const(np.full(len(qtv), UNOCCLUDED))
    hr = np.flatnonzero(hit >= 0)
    if hr.size:
        f = hit[hr]
        T = Xs[faces[f]]
        a, b, c = T[:, 0], T[:, 1], T[:, 2]
        nrm = ad.cross(b - a, c - a)
        dr = dirs_s[hr]
        t = ad.dot(nrm, a) / ad.dot(nrm, dr)
        Y = ad.reshape(t, (-1, 1)) * dr
        light_s = ad.matmul(cam.rotation, light - cam.position)
        Z = ad.norm(Y - light_s)
        dd = ad.reshape(ad.stack([d[rows]] * k, axis=1), (-1,))[hr]
        vt = ad.put(vt, hr, depth_test(Z, dd))
    v_rows = ad.mean(ad.reshape(vt, (-1, k)), axis=1)
    return ad.put(ad.const(np.ones(n)), rows, v_rows)
