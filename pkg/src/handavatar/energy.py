"""Energy terms and their weighted assembly.

Every term accepts tensors or arrays; image terms are means so weights do
not depend on resolution.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import face_normals, laplacian_matrix
from .render import RenderOptions, render_mesh
from .rig import lbs, personalized_vertices, regress_joints

GEO_TERMS = ("sil", "init", "verts", "lap", "norm", "arap")
APP_TERMS = ("photo", "vgg", "t_reg", "n_reg")
FRAME_TERMS = ("sil", "init", "lap", "norm", "arap", "photo", "vgg")
TEXTURE_JITTER = 2.0  # texels, std of the smoothness offsets
PYRAMID_LEVELS = 4


@dataclass
class EnergyWeights:
    sil: float = 7.0
    init: float = 10.0
    verts: float = 2.0
    lap: float = 4.0
    norm: float = 0.1
    arap: float = 0.2
    photo: float = 1.0
    vgg: float = 1.0
    t_reg: float = 2.0
    n_reg: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be nonnegative")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def zeros(cls) -> "EnergyWeights":
        return cls(**{f.name: 0.0 for f in fields(cls)})


# ---------------------------------------------------------------------- terms


def e_sil(mask, silhouette):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != tuple(ad.const(silhouette).shape):
        raise ValueError("mask and silhouette shapes differ")
    return ad.mean(ad.tabs(ad.const(silhouette) - mask))


def e_init(joints, init_joints):
    """Mean over joints of the L1 distance to the initial joints."""
    return ad.mean(ad.tsum(ad.tabs(ad.const(joints) - np.asarray(init_joints)), axis=-1))


def e_verts(D):
    return ad.tsum(ad.const(D) ** 2)


def e_lap(vertices, L):
    d = ad.sparse_matmul(L, ad.const(vertices))
    return ad.mean(ad.tsum(d * d, axis=-1))


def e_norm(vertices, faces, edge_faces):
    """Mean ``1 - cos`` between the two face normals of every interior edge."""
    ef = edge_faces[edge_faces[:, 1] >= 0]
    if len(ef) == 0:
        return ad.const(0.0)
    n = face_normals(ad.const(vertices), faces)
    return ad.mean(1.0 - ad.dot(n[ef[:, 0]], n[ef[:, 1]]))


def e_arap(vertices, template_vertices, edges):
    """Sum over directed one-ring pairs of squared edge-length change."""
    V = ad.const(vertices)
    T = np.asarray(template_vertices)
    i, j = edges[:, 0], edges[:, 1]
    rest = np.linalg.norm(T[i] - T[j], axis=1)
    cur = ad.norm(V[i] - V[j], eps=1e-30)
    return 2.0 * ad.tsum((cur - rest) ** 2)


def e_photo(color, image, mask, coverage):
    """Mean L1 over pixels in ``mask | coverage``; ``image`` already white outside the mask."""
    region = np.asarray(mask, bool) | np.asarray(coverage, bool)
    idx = np.flatnonzero(region.ravel())
    if idx.size == 0:
        return ad.const(0.0)
    C = ad.reshape(ad.const(color), (-1, 3))[idx]
    I = np.asarray(image).reshape(-1, 3)[idx]
    return ad.mean(ad.tabs(C - I))


def _blur_down_matrix(n: int) -> np.ndarray:
    """Rows of ``downsample2(blur([1 4 6 4 1] / 16, reflect))`` for a length-``n`` signal."""
    k = np.array([1, 4, 6, 4, 1]) / 16.0
    G = np.zeros((n, n))
    for i in range(n):
        for o, w in zip(range(-2, 3), k):
            j = i + o
            # scipy's "reflect" mode: (d c b a | a b c d | d c b a)
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            G[i, j] += w
    return G[::2]


@lru_cache(maxsize=16)
def pyramid_matrices(h: int, w: int, levels: int = PYRAMID_LEVELS):
    """Per-level (A, B) with level_{k+1} = A @ level_k @ B^T per channel."""
    out = []
    for _ in range(levels - 1):
        out.append((_blur_down_matrix(h), _blur_down_matrix(w)))
        h, w = (h + 1) // 2, (w + 1) // 2
    return tuple(out)


def _grad_l1(r, i):
    gx = ad.mean(ad.tabs(ad.tabs(r[:, 1:] - r[:, :-1]) - np.abs(i[:, 1:] - i[:, :-1])))
    gy = ad.mean(ad.tabs(ad.tabs(r[1:] - r[:-1]) - np.abs(i[1:] - i[:-1])))
    return 0.5 * (gx + gy)


def e_percep(rendered, image, levels: int = PYRAMID_LEVELS):
    """Gradient-pyramid distance, a hand-crafted stand-in for a learned perceptual loss.

    At each level of a Gaussian pyramid, the L1 distance between horizontal
    and between vertical finite-difference magnitudes; levels weigh equally.
    """
    r = ad.const(rendered)
    i = np.asarray(image, dtype=np.float64)
    total = _grad_l1(r, i)
    for A, B in pyramid_matrices(i.shape[0], i.shape[1], levels):
        r = ad.sandwich(r, A, B)
        i = np.einsum("ih,hwc,jw->ijc", A, i, B, optimize=True)
        total = total + _grad_l1(r, i)
    return total * (1.0 / levels)


def texel_centres(size: int) -> np.ndarray:
    v, u = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.stack([(u.ravel() + 0.5) / size, 1.0 - (v.ravel() + 0.5) / size], axis=1)


def draw_texture_offsets(rng: np.random.Generator, size: int) -> np.ndarray:
    """Gaussian texel offsets (size*size, 2) in texels."""
    return rng.normal(0.0, TEXTURE_JITTER, (size * size, 2))


def _smoothness(tex, offsets):
    tex = ad.const(tex)
    size = tex.shape[0]
    uv = texel_centres(size)
    shifted = uv + np.asarray(offsets) * np.array([1.0, -1.0]) / size
    a = ad.reshape(tex, (-1, 3))
    b = ad.bilinear_sample(tex, shifted)
    return ad.mean(ad.tsum(ad.tabs(a - b), axis=-1)) * (1.0 / 3.0)


def e_t_reg(albedo, offsets):
    """Mean over texels of ``|T(I) - T(I + eps)|_1 / 3``."""
    return _smoothness(albedo, offsets)


def e_n_reg(normal_map, offsets):
    """Smoothness as for the albedo plus mean ``|G(I) - z|^2 / 3``."""
    G = ad.reshape(ad.const(normal_map), (-1, 3))
    dz = G - np.array([0.0, 0.0, 1.0])
    return _smoothness(normal_map, offsets) + ad.mean(ad.tsum(dz * dz, axis=-1)) * (1.0 / 3.0)


# ---------------------------------------------------------------------- assembly


@dataclass
class EnergyReport:
    terms: dict            # term -> unweighted value (mean over frames for frame terms)
    weights: dict
    total: float
    per_frame: dict = field(default_factory=dict)  # frame -> {term: value}

    def weighted_sum(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.terms.items()))


class EnergyModel:
    """Binds a rig, camera and frame targets; evaluates E on a leaf view.

    Parameter groups read from the view: ``beta``, ``gamma_XXXX``,
    ``translation_XXXX``, ``D``, ``albedo``, ``normal_map``,
    ``light_position``, ``reflection``.
    """

    def __init__(self, rig, camera, images, masks, init_joints, weights: EnergyWeights | None = None,
                 options: RenderOptions | None = None, stop_normal_grad: bool = False,
                 root_relative_init: bool = True):
        self.rig = rig
        self.camera = camera
        self.images = images          # (N, H, W, 3), white outside masks
        self.masks = masks
        # keypoints are compared relative to the root joint: the initial
        # estimate fixes articulation, not the hand's distance from the camera
        self.root_relative_init = root_relative_init
        self.root = int(np.flatnonzero(np.asarray(rig.parents) < 0)[0])
        init_joints = np.asarray(init_joints, dtype=np.float64)
        if root_relative_init:
            init_joints = init_joints - init_joints[:, self.root:self.root + 1]
        self.init_joints = init_joints  # (N, J, 3)
        self.weights = weights or EnergyWeights()
        self.options = options or RenderOptions()
        self.stop_normal_grad = stop_normal_grad
        fine = rig.subdivision[0]
        self.fine = fine
        self.L = laplacian_matrix(fine.faces, fine.n_vertices)
        self.template_fine = rig.subdivision_map @ rig.template.vertices
        self.edges = fine.edges

    def active(self, terms) -> list[str]:
        return [t for t in terms if getattr(self.weights, t) > 0]

    def frame_terms(self, P, t: int, terms) -> dict:
        from .state import gamma_key, translation_key
        rig = self.rig
        posed = lbs(rig, P["beta"], P[gamma_key(t)], P[translation_key(t)])
        out = {}
        if "init" in terms:
            J = ad.const(regress_joints(rig, posed.vertices))
            if self.root_relative_init:
                J = J - J[self.root:self.root + 1]
            out["init"] = e_init(J, self.init_joints[t])
        need_fine = any(k in terms for k in ("sil", "lap", "norm", "arap", "photo", "vgg"))
        if not need_fine:
            return out
        V = personalized_vertices(rig, None, posed.vertices, P["D"], self.stop_normal_grad)
        if "lap" in terms:
            out["lap"] = e_lap(V, self.L)
        if "norm" in terms:
            out["norm"] = e_norm(V, self.fine.faces, self.edges.edge_faces)
        if "arap" in terms:
            out["arap"] = e_arap(V, self.template_fine, self.edges.edges)
        if any(k in terms for k in ("sil", "photo", "vgg")):
            need_color = "photo" in terms or "vgg" in terms
            opts = RenderOptions(self.options.shadows and need_color, self.options.shadow_map_size,
                                 "sil" in terms, need_color)
            r = render_mesh(V, self.fine, P["albedo"], P["normal_map"], P["light_position"],
                            P["reflection"], self.camera, opts)
            if "sil" in terms:
                out["sil"] = e_sil(self.masks[t], r.silhouette)
            if "photo" in terms:
                out["photo"] = e_photo(r.color, self.images[t], self.masks[t], r.face_id >= 0)
            if "vgg" in terms:
                out["vgg"] = e_percep(r.color, self.images[t])
        return out

    def global_terms(self, P, terms, offsets=None) -> dict:
        out = {}
        if "verts" in terms:
            out["verts"] = e_verts(P["D"])
        if "t_reg" in terms:
            out["t_reg"] = e_t_reg(P["albedo"], offsets)
        if "n_reg" in terms:
            out["n_reg"] = e_n_reg(P["normal_map"], offsets)
        return out

    def __call__(self, P, frames, terms, offsets=None):
        """Weighted total (tensor) and an :class:`EnergyReport`.

        Frame terms are averaged over ``frames``; global terms are added once.
        """
        terms = self.active(terms)
        w = self.weights
        per_frame = {}
        sums = {}
        for t in frames:
            ft = self.frame_terms(P, t, terms)
            per_frame[t] = {k: float(ad.value(v)) for k, v in ft.items()}
            for k, v in ft.items():
                sums[k] = v if k not in sums else sums[k] + v
        vals = {k: v * (1.0 / len(frames)) for k, v in sums.items()}
        vals.update(self.global_terms(P, terms, offsets))
        total = ad.const(0.0)
        for k in sorted(vals):
            total = total + getattr(w, k) * vals[k]
        rep = EnergyReport({k: float(ad.value(v)) for k, v in vals.items()},
                           {k: getattr(w, k) for k in vals}, float(ad.value(total)), per_frame)
        return total, rep


class EnergyLog:
    """Per-epoch energy rows (epoch, stage, term, value) written as CSV."""

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, epoch: int, stage: str, report: EnergyReport):
        for k in sorted(report.terms):
            self.rows.append((epoch, stage, k, report.terms[k]))
        self.rows.append((epoch, stage, "total", report.total))

    def totals(self) -> list[float]:
        return [r[3] for r in self.rows if r[2] == "total"]

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "stage", "term", "value"])
            for e, s, k, v in self.rows:
                wr.writerow([e, s, k, repr(float(v))])
