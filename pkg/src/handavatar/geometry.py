"""Triangle meshes, linear subdivision and mesh-local quantities.

Functions that compute geometry accept either plain arrays or
:class:`~handavatar.autodiff.Tensor` vertices and return the same kind.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from . import autodiff as ad


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray          # (V, 3) float, meters
    faces: np.ndarray             # (F, 3) int
    uv: np.ndarray | None = None  # (F, 3, 2) per face corner, in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> "TriMesh":
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError("faces must be an (F, 3) array")
        if f.size and (f.min() < 0 or f.max() >= self.n_vertices):
            raise MeshError("face index out of range")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate face(s): {np.flatnonzero(degenerate)[:5].tolist()}")
        if self.uv is not None:
            if self.uv.shape != (self.n_faces, 3, 2):
                raise MeshError("uv must be (F, 3, 2)")
            if self.uv.min() < 0 or self.uv.max() > 1:
                raise MeshError("uv coordinates outside [0, 1]")
        return self

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(np.asarray(vertices), self.faces, self.uv)

    @cached_property
    def edges(self) -> "EdgeTable":
        return build_edges(self.faces, self.n_vertices)


@dataclass
class EdgeTable:
    edges: np.ndarray        # (E, 2) sorted vertex pairs
    edge_faces: np.ndarray   # (E, 2) incident faces, -1 where missing
    face_edges: np.ndarray   # (F, 3) edge ids of (v0v1, v1v2, v2v0)

    @property
    def boundary(self) -> np.ndarray:
        return self.edge_faces[:, 1] < 0

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary

    def __len__(self):
        return len(self.edges)


def build_edges(faces: np.ndarray, n_vertices: int | None = None) -> EdgeTable:
    """Unique undirected edges with their incident faces.

    Raises :class:`MeshError` on an edge shared by more than two faces.
    """
    faces = np.asarray(faces, dtype=np.int64)
    F = len(faces)
    half = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    key = np.sort(half, axis=1)
    n = int(faces.max()) + 1 if n_vertices is None else n_vertices
    code = key[:, 0] * n + key[:, 1]
    uniq, inverse, counts = np.unique(code, return_inverse=True, return_counts=True)
    if (counts > 2).any():
        bad = uniq[counts > 2][0]
        raise MeshError(f"non-manifold edge ({bad // n}, {bad % n}) shared by "
                        f"{counts.max()} faces")
    edges = np.stack([uniq // n, uniq % n], axis=1)
    face_of_half = np.repeat(np.arange(F), 3)
    order = np.argsort(inverse, kind="stable")
    edge_faces = -np.ones((len(uniq), 2), dtype=np.int64)
    starts = np.searchsorted(inverse[order], np.arange(len(uniq)))
    edge_faces[:, 0] = face_of_half[order[starts]]
    two = counts == 2
    edge_faces[two, 1] = face_of_half[order[starts[two] + 1]]
    return EdgeTable(edges, edge_faces, inverse.reshape(F, 3))


def subdivide_linear(mesh: TriMesh) -> tuple[TriMesh, sparse.csr_matrix]:
    """One pass of midpoint subdivision.

    Returns the fine mesh and the sparse map ``S`` with
    ``fine.vertices == S @ mesh.vertices``. New vertex ``V + e`` is the
    midpoint of coarse edge ``e``; every face splits into four.
    """
    et = mesh.edges
    V, E = mesh.n_vertices, len(et)
    rows = np.concatenate([np.arange(V), V + np.arange(E), V + np.arange(E)])
    cols = np.concatenate([np.arange(V), et.edges[:, 0], et.edges[:, 1]])
    vals = np.concatenate([np.ones(V), np.full(2 * E, 0.5)])
    S = sparse.csr_matrix((vals, (rows, cols)), shape=(V + E, V))

    a, b, c = mesh.faces.T
    ab, bc, ca = (V + et.face_edges[:, k] for k in range(3))
    fine_faces = np.stack([
        np.stack([a, ab, ca], 1),
        np.stack([ab, b, bc], 1),
        np.stack([ca, bc, c], 1),
        np.stack([ab, bc, ca], 1),
    ], axis=1).reshape(-1, 3)

    fine_uv = None
    if mesh.uv is not None:
        ua, ub, uc = mesh.uv[:, 0], mesh.uv[:, 1], mesh.uv[:, 2]
        uab, ubc, uca = (ua + ub) / 2, (ub + uc) / 2, (uc + ua) / 2
        fine_uv = np.stack([
            np.stack([ua, uab, uca], 1),
            np.stack([uab, ub, ubc], 1),
            np.stack([uca, ubc, uc], 1),
            np.stack([uab, ubc, uca], 1),
        ], axis=1).reshape(-1, 3, 2)

    fine = TriMesh(S @ mesh.vertices, fine_faces, fine_uv)
    return fine, S


def _lift(x):
    return (x, False) if isinstance(x, ad.Tensor) else (ad.const(x), True)


def _lower(t, plain):
    return t.value if plain else t


def face_normals(vertices, faces, normalized=True):
    """Per-face normals; unnormalized length is twice the face area."""
    v, plain = _lift(vertices)
    tri = v[faces]
    n = ad.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalized:
        n = ad.normalize(n)
    return _lower(n, plain)


def vertex_normals(vertices, faces, return_isolated: bool = False):
    """Area-weighted vertex normals, unit length.

    Vertices referenced by no face get the zero vector; pass
    ``return_isolated=True`` to also receive their boolean mask.
    """
    v, plain = _lift(vertices)
    faces = np.asarray(faces)
    fn = face_normals(v, faces, normalized=False)
    contrib = ad.stack([fn, fn, fn], axis=1)  # (F, 3, 3)
    acc = ad.scatter_rows(ad.reshape(contrib, (-1, 3)), faces.reshape(-1), v.shape[0])
    n = _lower(ad.normalize(acc, eps=1e-300), plain)
    if return_isolated:
        isolated = np.bincount(faces.reshape(-1), minlength=v.shape[0]) == 0
        return n, isolated
    return n


def adjacency(faces, n_vertices: int) -> sparse.csr_matrix:
    et = build_edges(faces, n_vertices)
    i, j = et.edges.T
    data = np.ones(2 * len(i))
    A = sparse.csr_matrix((data, (np.concatenate([i, j]), np.concatenate([j, i]))),
                          shape=(n_vertices, n_vertices))
    return A


def laplacian_matrix(faces, n_vertices: int) -> sparse.csr_matrix:
    """Uniform Laplacian ``L = I - D^-1 A``; raises on vertices without neighbours."""
    A = adjacency(faces, n_vertices)
    deg = np.asarray(A.sum(axis=1)).ravel()
    if (deg == 0).any():
        raise MeshError(f"vertex {int(np.flatnonzero(deg == 0)[0])} has no neighbours")
    return (sparse.identity(n_vertices, format="csr") - sparse.diags(1.0 / deg) @ A).tocsr()


def uniform_laplacian(vertices, faces, L: sparse.csr_matrix | None = None):
    """``delta_v = v - mean(neighbours of v)`` for every vertex."""
    v, plain = _lift(vertices)
    if L is None:
        L = laplacian_matrix(faces, v.shape[0])
    return _lower(ad.sparse_matmul(L, v), plain)


def point_segment_distance(p, a, b):
    """Distance from points to segments (all (N, 3) arrays); brute-force helper."""
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-300), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=-1)
