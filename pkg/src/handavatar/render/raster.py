"""Hard rasterization with differentiable hit points and a soft silhouette."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .. import autodiff as ad
from ..geometry import EdgeTable
from . import kernels
from .camera import Camera

NEAR = 1e-3           # meters
BAND = 3.0            # pixels, sigmoid goes 0.05 -> 0.95 across [-BAND, BAND]
SUPPORT = 2 * BAND    # pixels, silhouette is exactly 0 / 1 beyond this distance
_K = np.log(19.0) / BAND
_MARGIN = int(np.ceil(SUPPORT)) + 2


@dataclass
class Fragments:
    """Per-pixel rasterization result for the covered pixels.

    ``pix`` are flat pixel indices (row-major) of covered pixels, ``faces``
    their face ids, ``bary`` (P, 3) barycentrics and ``hit`` (P, 3) world
    hit points; the last two are tensors when the vertices are.
    """
    face_id: np.ndarray   # (H, W), -1 = background
    depth: np.ndarray     # (H, W), inf on background
    pix: np.ndarray
    faces: np.ndarray
    bary: object
    hit: object
    hit_cam: object


def _rescaled_sigmoid(s):
    lo, hi = 1.0 / (1.0 + np.exp(_K * SUPPORT)), 1.0 / (1.0 + np.exp(-_K * SUPPORT))
    return (ad.sigmoid(_K * ad.clamp(s, -SUPPORT, SUPPORT)) - lo) / (hi - lo)


def silhouette_profile(signed_distance):
    """Soft coverage as a function of signed pixel distance (inside > 0)."""
    out = _rescaled_sigmoid(ad.const(np.asarray(signed_distance, dtype=np.float64)))
    return out.value


def barycentric_hits(Xc, faces, fid, rays):
    """Ray / face-plane intersections: barycentrics (P, 3) and camera-space points."""
    tri = Xc[faces[fid]]                      # (P, 3, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = ad.cross(b - a, c - a)
    t = ad.dot(n, a) / ad.dot(n, rays)
    X = ad.reshape(t, (-1, 1)) * rays
    nn = ad.dot(n, n)
    wa = ad.dot(ad.cross(b - X, c - X), n) / nn
    wb = ad.dot(ad.cross(c - X, a - X), n) / nn
    w = ad.stack([wa, wb, 1.0 - wa - wb], axis=1)
    return w, X


def rasterize(vertices, faces: np.ndarray, camera: Camera) -> tuple[Fragments, object, object]:
    """Z-buffer rasterization.

    Returns the fragments, camera-space vertices and projected vertex pixel
    coordinates (tensors when ``vertices`` is a tensor).
    """
    V = ad.const(vertices)
    Xc = camera.to_camera(V)
    xy = camera.project(Xc)
    zc = Xc.value[:, 2]
    H, W = camera.height, camera.width
    if (zc <= NEAR).all():
        empty = np.zeros(0, dtype=np.int64)
        frag = Fragments(-np.ones((H, W), np.int32), np.full((H, W), np.inf), empty, empty,
                         ad.const(np.zeros((0, 3))), ad.const(np.zeros((0, 3))),
                         ad.const(np.zeros((0, 3))))
        return frag, Xc, xy
    xyv = np.where(np.isfinite(xy.value), xy.value, 0.0)
    face_id, depth = kernels.raster(xyv, zc, faces, H, W, NEAR, 0.0, 0.0)
    pix = np.flatnonzero(face_id.ravel() >= 0)
    fid = face_id.ravel()[pix].astype(np.int64)
    rays = camera.pixel_rays(pix // W, pix % W)
    bary, hc = barycentric_hits(Xc, faces, fid, rays)
    hit = ad.tsum(ad.reshape(bary, (-1, 3, 1)) * V[faces[fid]], axis=1)
    depth = depth.copy()
    depth.ravel()[pix] = hc.value[:, 2]
    return Fragments(face_id, depth, pix, fid, bary, hit, hc), Xc, xy


def contour_edges(xy: np.ndarray, faces: np.ndarray, edges: EdgeTable) -> np.ndarray:
    """Edges separating front- and back-facing faces in screen space, plus boundary edges."""
    p = xy[faces]
    area = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    front = area > 0
    ef = edges.edge_faces
    boundary = ef[:, 1] < 0
    flip = ~boundary & (front[ef[:, 0]] != front[np.maximum(ef[:, 1], 0)])
    return np.flatnonzero(boundary | flip)


def soft_silhouette(xy, zc: np.ndarray, faces: np.ndarray, edges: EdgeTable, camera: Camera,
                    coverage: np.ndarray | None = None):
    """Soft silhouette (H, W) in [0, 1].

    Pixels within ``SUPPORT`` px of the projected outline get a sigmoid of
    their signed distance to the nearest outer contour edge (positive when
    covered); others keep their hard coverage. Differentiable through the
    projected contour-edge endpoints.
    """
    xy = ad.const(xy)
    H, W = camera.height, camera.width
    xyv = np.where(np.isfinite(xy.value), xy.value, 0.0)
    m = _MARGIN
    cov_big, _ = kernels.raster(xyv, zc, faces, H + 2 * m, W + 2 * m, NEAR, -float(m), -float(m))
    cov_big = cov_big >= 0
    cov = cov_big[m:m + H, m:m + W] if coverage is None else coverage
    hard = cov.astype(np.float64)
    if not cov_big.any():
        return ad.const(hard)

    d_in = ndimage.distance_transform_edt(cov_big)
    d_out = ndimage.distance_transform_edt(~cov_big)
    near_edge = np.where(cov_big, d_in, d_out)[m:m + H, m:m + W] <= SUPPORT + 1.5
    cand = np.flatnonzero(near_edge.ravel())
    if cand.size == 0:
        return ad.const(hard)

    valid = zc > NEAR
    eids = contour_edges(xyv, faces, edges)
    ev = edges.edges[eids]
    eids = eids[valid[ev[:, 0]] & valid[ev[:, 1]]]
    ev = edges.edges[eids]
    if eids.size == 0:
        return ad.const(hard)
    # keep edges that have uncovered pixels right next to them
    pa, pb = xyv[ev[:, 0]], xyv[ev[:, 1]]
    d = pb - pa
    nrm = np.stack([-d[:, 1], d[:, 0]], 1) / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    mid = 0.5 * (pa + pb)
    outer = np.zeros(len(eids), dtype=bool)
    for sgn in (1.0, -1.0):
        q = np.floor(mid + sgn * 0.75 * nrm).astype(np.int64) + m
        inside = (q[:, 0] >= 0) & (q[:, 0] < W + 2 * m) & (q[:, 1] >= 0) & (q[:, 1] < H + 2 * m)
        qc = np.clip(q, 0, [W + 2 * m - 1, H + 2 * m - 1])
        outer |= ~inside | ~cov_big[qc[:, 1], qc[:, 0]]
    if outer.any():
        ev = ev[outer]

    centres = np.stack([cand % W + 0.5, cand // W + 0.5], 1)
    j, dist = kernels.nearest_segments(centres, xyv[ev[:, 0]], xyv[ev[:, 1]])
    close = dist < SUPPORT
    cand, j = cand[close], j[close]
    if cand.size == 0:
        return ad.const(hard)
    a, b = xy[ev[j, 0]], xy[ev[j, 1]]
    p = centres[close]
    e = b - a
    t = ad.clamp(ad.dot(p - a, e) / ad.dot(e, e), 0.0, 1.0)
    dist_t = ad.norm(p - a - ad.reshape(t, (-1, 1)) * e, eps=1e-30)
    sign = np.where(cov.ravel()[cand], 1.0, -1.0)
    S = _rescaled_sigmoid(dist_t * sign)
    return ad.reshape(ad.put(ad.const(hard.ravel()), cand, S), (H, W))
