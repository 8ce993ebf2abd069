"""Brute-force reference renderer and synthetic sequence generator.

The ray caster shares no code with the rasterizer: primary visibility and
shadows come from exhaustive ray/triangle tests, texture lookups from
``scipy.ndimage.map_coordinates`` and normals from an independent
area-weighted accumulation. Shading uses the same ambient + diffuse model
with binary visibility.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rig import PoseParams, RigBundle, personalized_vertices

CHUNK = 512


def ray_triangle(orig, dirs, tri, eps=1e-12):
    """All-pairs Moller-Trumbore. Returns t, u, v with shape (R, F); misses get t = inf."""
    a = tri[:, 0][None]
    e1 = (tri[:, 1] - tri[:, 0])[None]
    e2 = (tri[:, 2] - tri[:, 0])[None]
    d = dirs[:, None, :]
    p = np.cross(d, e2)
    det = (e1 * p).sum(-1)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = orig[:, None, :] - a if orig.ndim == 2 else orig[None, None, :] - a
    u = (s * p).sum(-1) * inv
    q = np.cross(s, e1)
    v = (d * q).sum(-1) * inv
    t = (e2 * q).sum(-1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf), u, v


def _normals(V, F):
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    vn = np.zeros_like(V)
    for k in range(3):
        np.add.at(vn, F[:, k], fn)
    ln = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(ln > 0, ln, 1.0)


def _tangents(V, F, uv):
    e1, e2 = V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]
    d1, d2 = uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    det = np.where(np.abs(det) < 1e-14, 1.0, det)
    T = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / det[:, None]
    B = (e2 * d1[:, 0:1] - e1 * d2[:, 0:1]) / det[:, None]
    hand = np.sign((np.cross(np.cross(e1, e2), T) * B).sum(1))
    hand[hand == 0] = 1.0
    T = T / np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-300)
    tv = np.zeros_like(V)
    for k in range(3):
        np.add.at(tv, F[:, k], T)
    return tv, hand


def _lookup(tex, uv):
    H, W, C = tex.shape
    x = np.clip(uv[:, 0] * W - 0.5, 0, W - 1)
    y = np.clip((1 - uv[:, 1]) * H - 0.5, 0, H - 1)
    return np.stack([ndimage.map_coordinates(tex[..., c], [y, x], order=1, mode="nearest")
                     for c in range(C)], axis=1)


@dataclass
class SyntheticScene:
    rig: RigBundle
    beta: np.ndarray
    displacement: np.ndarray
    gammas: np.ndarray          # (N, J, 3)
    translations: np.ndarray    # (N, 3)
    albedo: np.ndarray
    normal_map: np.ndarray
    light_positions: np.ndarray  # (M, 3)
    ambient: np.ndarray
    diffuse: np.ndarray
    camera: object
    extras: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.gammas)

    def pose(self, t: int) -> PoseParams:
        return PoseParams(self.gammas[t].copy(), self.translations[t].copy())

    def vertices(self, t: int) -> np.ndarray:
        return personalized_vertices(self.rig, self.beta, self.pose(t), self.displacement)


def raytrace_mesh(V, faces, uv, albedo, normal_map, lights, ambient, diffuse, camera,
                  shadows: bool = True):
    """Ray-cast render of a world-space mesh. Returns (rgb, mask, depth, face_id, shadowed)."""
    H, W = camera.height, camera.width
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    d_cam = np.stack([(cc + 0.5 - camera.cx) / camera.fx, (rr + 0.5 - camera.cy) / camera.fy,
                      np.ones(H * W)], 1)
    d_world = d_cam @ camera.rotation          # R^T d
    o = -camera.rotation.T @ camera.translation
    tri = V[faces]
    lights = np.atleast_2d(lights)

    face = -np.ones(H * W, dtype=np.int64)
    tbest = np.full(H * W, np.inf)
    ub = np.zeros(H * W)
    vb = np.zeros(H * W)
    for s in range(0, H * W, CHUNK):
        t, u, v = ray_triangle(o, d_world[s:s + CHUNK], tri)
        j = np.argmin(t, axis=1)
        r = np.arange(len(j))
        tb = t[r, j]
        hit = np.isfinite(tb)
        face[s:s + CHUNK] = np.where(hit, j, -1)
        tbest[s:s + CHUNK] = tb
        ub[s:s + CHUNK] = u[r, j]
        vb[s:s + CHUNK] = v[r, j]

    rgb = np.ones((H * W, 3))
    shadowed = np.zeros((H * W, len(lights)), dtype=bool)
    px = np.flatnonzero(face >= 0)
    if px.size:
        f = face[px]
        w = np.stack([1 - ub[px] - vb[px], ub[px], vb[px]], 1)
        X = o + tbest[px, None] * d_world[px]
        vn = _normals(V, faces)
        N = (w[:, :, None] * vn[faces[f]]).sum(1)
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        uvp = (w[:, :, None] * uv[f]).sum(1)
        alb = _lookup(np.clip(albedo, 0, 1), uvp)
        nt = _lookup(normal_map, uvp)
        nt /= np.linalg.norm(nt, axis=1, keepdims=True)
        tv, hand = _tangents(V, faces, uv)
        T = (w[:, :, None] * tv[faces[f]]).sum(1)
        T -= (T * N).sum(1, keepdims=True) * N
        T /= np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-300)
        B = np.cross(N, T) * hand[f][:, None]
        Ns = nt[:, 0:1] * T + nt[:, 1:2] * B + nt[:, 2:3] * N
        Ns /= np.linalg.norm(Ns, axis=1, keepdims=True)
        col = alb * ambient
        for m, Lp in enumerate(lights):
            toL = Lp - X
            L = toL / np.linalg.norm(toL, axis=1, keepdims=True)
            lam = np.maximum((L * Ns).sum(1), 0.0)
            vis = np.ones(len(px))
            if shadows:
                for s in range(0, len(px), CHUNK):
                    sl = slice(s, s + CHUNK)
                    t, _, _ = ray_triangle(X[sl], toL[sl], tri)
                    own = f[sl]
                    t[np.arange(len(own)), own] = np.inf
                    blocked = ((t > 1e-6) & (t < 1.0)).any(1)
                    vis[sl] = np.where(blocked, 0.0, 1.0)
                shadowed[px, m] = vis == 0
            col = col + alb * diffuse * (lam * vis)[:, None]
        rgb[px] = np.clip(col, 0, 1)
    depth = np.full(H * W, np.inf)
    if px.size:
        depth[px] = (X @ camera.rotation.T + camera.translation)[:, 2]
    return (rgb.reshape(H, W, 3), (face >= 0).reshape(H, W), depth.reshape(H, W),
            face.reshape(H, W), shadowed.reshape(H, W, -1))


def raytrace_reference(scene: SyntheticScene, t: int, shadows: bool = True):
    """Render frame ``t`` of a synthetic scene; returns (rgb, mask, depth)."""
    V = scene.vertices(t)
    fine = scene.rig.subdivision[0]
    rgb, mask, depth, _, _ = raytrace_mesh(V, fine.faces, fine.uv, scene.albedo, scene.normal_map,
                                           scene.light_positions, scene.ambient, scene.diffuse,
                                           scene.camera, shadows)
    return rgb, mask, depth


# ---------------------------------------------------------------------- generator


@dataclass
class SynthSpec:
    n_frames: int = 20
    size: int = 128
    motion: str = "mixed"        # flip | fingers | mixed | static
    noise_rot: float = 0.05      # radians
    noise_trans: float = 0.005   # meters
    seed: int = 0
    texture_size: int = 128
    pattern: str = "checker"     # checker | gradient | flat
    light: tuple = (0.08, -0.12, 0.05)
    ambient: float = 0.35
    diffuse: float = 0.75
    distance: float = 0.3
    focal: float | None = None
    beta: tuple | None = None
    displacement_scale: float = 0.0
    shadows: bool = True


def procedural_albedo(size: int, pattern: str, seed: int = 0) -> np.ndarray:
    v, u = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    v = 1 - v
    if pattern == "flat":
        return np.full((size, size, 3), 0.7)
    if pattern == "gradient":
        return np.stack([0.3 + 0.5 * u, 0.3 + 0.5 * v, 0.6 - 0.3 * u * v], -1)
    rng = np.random.default_rng(seed)
    base = np.stack([0.3 + 0.5 * u, 0.35 + 0.4 * v, 0.5 + 0.2 * np.sin(6 * u)], -1)
    chk = ((np.floor(u * 8) + np.floor(v * 8)) % 2)[..., None]
    tint = rng.uniform(0.75, 1.0, 3)
    return np.clip(base * (0.7 + 0.3 * chk) * tint, 0, 1)


def scripted_poses(rig: RigBundle, n: int, motion: str, distance: float) -> tuple[np.ndarray, np.ndarray]:
    J = rig.n_joints
    s = np.linspace(0, 1, n) if n > 1 else np.zeros(1)
    gam = np.zeros((n, J, 3))
    if motion in ("flip", "mixed"):
        gam[:, 0, 1] = -0.6 + 1.2 * s
        gam[:, 0, 0] = 0.15 * np.sin(2 * np.pi * s)
    if motion in ("fingers", "mixed"):
        for j in range(1, J):
            gam[:, j, 0] = 0.5 * np.sin(np.pi * s + j) ** 2
    trans = np.zeros((n, 3))
    trans[:, 2] = distance
    trans[:, 0] = 0.01 * np.sin(2 * np.pi * s)
    return gam, trans


def perturb_poses(gammas, translations, noise_rot, noise_trans, rng):
    g = gammas + rng.normal(0, noise_rot, gammas.shape) if noise_rot > 0 else gammas.copy()
    t = translations + rng.normal(0, noise_trans, translations.shape) if noise_trans > 0 else translations.copy()
    return g, t


def make_scene(rig: RigBundle, spec: SynthSpec) -> SyntheticScene:
    from .render.camera import Camera
    rng = np.random.default_rng(spec.seed)
    gam, trans = scripted_poses(rig, spec.n_frames, spec.motion, spec.distance)
    beta = np.zeros(rig.n_betas) if spec.beta is None else np.asarray(spec.beta, float)
    D = np.zeros(rig.n_fine)
    if spec.displacement_scale > 0:
        D = np.clip(rng.normal(0, spec.displacement_scale, rig.n_fine), -0.005, 0.005)
    extent = np.ptp(rig.template.vertices, axis=0).max()
    f = spec.focal or 0.75 * spec.size * spec.distance / extent
    cam = Camera(f, f, spec.size / 2, spec.size / 2, spec.size, spec.size)
    nm = np.zeros((spec.texture_size, spec.texture_size, 3))
    nm[..., 2] = 1.0
    return SyntheticScene(rig, beta, D, gam, trans,
                          procedural_albedo(spec.texture_size, spec.pattern, spec.seed), nm,
                          np.atleast_2d(np.asarray(spec.light, float)),
                          np.full(3, spec.ambient), np.full(3, spec.diffuse), cam)


def generate_sequence(rig: RigBundle, spec: SynthSpec, out_dir=None, scene: SyntheticScene | None = None):
    """Render a scripted sequence with the ray caster.

    Returns ``(dataset, scene, init_poses)``; initial poses are the ground
    truth plus Gaussian noise. When ``out_dir`` is given, the standard
    sequence layout is written there together with ``ground_truth.json``.
    """
    from .avatar_io import SequenceDataset, write_sequence
    scene = scene or make_scene(rig, spec)
    rng = np.random.default_rng(spec.seed + 1)
    g0, t0 = perturb_poses(scene.gammas, scene.translations, spec.noise_rot, spec.noise_trans, rng)
    images, masks = [], []
    for t in range(scene.n_frames):
        rgb, mask, _ = raytrace_reference(scene, t, shadows=spec.shadows)
        images.append(rgb)
        masks.append(mask)
    init = [PoseParams(g0[t], t0[t]) for t in range(scene.n_frames)]
    ds = SequenceDataset(np.array(images), np.array(masks), init, scene.camera)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_sequence(ds, out_dir)
        gt = {"beta": scene.beta.tolist(),
              "poses": [{"gamma": scene.gammas[t].tolist(), "translation": scene.translations[t].tolist(),
                         "vertices": _coarse(scene, t).tolist()} for t in range(scene.n_frames)],
              "light_positions": scene.light_positions.tolist(),
              "ambient": scene.ambient.tolist(), "diffuse": scene.diffuse.tolist()}
        (out_dir / "ground_truth.json").write_text(json.dumps(gt))
        from .container import save_arrays
        save_arrays(out_dir / "ground_truth_maps", {"albedo": scene.albedo, "normal_map": scene.normal_map,
                                                    "displacement": scene.displacement}, kind="maps")
    return ds, scene, init


def _coarse(scene, t):
    from .rig import lbs
    p = scene.pose(t)
    return lbs(scene.rig, scene.beta, p.gamma, p.translation).vertices


# ---------------------------------------------------------------------- shadow test scene


def _grid(n: int, half: float, z: float, offset=(0.0, 0.0)):
    s = np.linspace(-half, half, n + 1)
    x, y = np.meshgrid(s + offset[0], s + offset[1], indexing="xy")
    V = np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], 1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    F = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])  # normals +z
    uv = np.stack([(x.ravel() - x.min()) / (2 * half), 1 - (y.ravel() - y.min()) / (2 * half)], 1)
    return V, F, uv


def occluder_scene(size: int = 96, gap: float = 0.04, light=(0.1, -0.06, 0.2)):
    """Ground plane with a floating square occluder between it and a point light.

    The camera looks down the -z axis from above onto the plane at z = 0; the
    occluder floats ``gap`` meters above it. Returns ``(V, faces, uv, camera,
    light)`` with per-corner ``uv`` (F, 3, 2).
    """
    from .render.camera import Camera
    Vp, Fp, uvp = _grid(16, 0.08, 0.0)
    Vo, Fo, uvo = _grid(4, 0.025, gap, offset=(-0.01, 0.01))
    V = np.concatenate([Vp, Vo])
    F = np.concatenate([Fp, Fo + len(Vp)])
    uv = np.concatenate([uvp, uvo])[F]
    cam = Camera.look_at([0.0, 0.0, 0.3], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0), f=size * 1.6,
                         width=size, height=size)
    return V, F, uv, cam, np.atleast_2d(np.asarray(light, float))
