"""Small procedural meshes and a toy articulated rig for tests and demos."""
from __future__ import annotations

import numpy as np

from .geometry import TriMesh, build_edges, subdivide_linear
from .rig import RigBundle


def triangle() -> TriMesh:
    return TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]],
                   [[[0, 0], [1, 0], [0, 1]]])


def tetrahedron() -> TriMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) / np.sqrt(3)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, f)


def unit_square() -> TriMesh:
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def icosahedron() -> TriMesh:
    p = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return TriMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)


def icosphere(level: int = 3, radius: float = 1.0) -> TriMesh:
    m = icosahedron()
    for _ in range(level):
        m, _ = subdivide_linear(m)
        m = m.with_vertices(m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True))
    return m.with_vertices(m.vertices * radius)


def hex_grid(n: int = 6, spacing: float = 1.0) -> TriMesh:
    """Planar equilateral triangulation; interior vertices have six neighbours."""
    idx = np.arange(n * n).reshape(n, n)
    jj, ii = np.meshgrid(np.arange(n), np.arange(n))
    x = (jj + 0.5 * (ii % 2)) * spacing
    y = ii * spacing * np.sqrt(3) / 2
    v = np.stack([x.ravel(), y.ravel(), np.zeros(n * n)], 1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = idx[i, j], idx[i, j + 1], idx[i + 1, j], idx[i + 1, j + 1]
            if i % 2 == 0:
                faces += [[a, b, c], [b, d, c]]
            else:
                faces += [[a, d, c], [a, b, d]]
    return TriMesh(v, faces)


def _stitch(ring_a, ring_b):
    """Triangle strip between two closed vertex loops of possibly different length."""
    n, m = len(ring_a), len(ring_b)
    faces, i, j = [], 0, 0
    while i < n or j < m:
        if j >= m or (i < n and (i + 1) / n <= (j + 1) / m):
            faces.append([ring_a[i % n], ring_a[(i + 1) % n], ring_b[j % m]])
            i += 1
        else:
            faces.append([ring_a[i % n], ring_b[(j + 1) % m], ring_b[j % m]])
            j += 1
    return faces


def capped_tube(rings: int = 48, ring_size: int = 16, cap_ring: int = 9,
                length: float = 0.09, radius: float = 0.01) -> TriMesh:
    """Genus-0 surface with one open boundary loop, shaped like a finger.

    The default arguments give 778 vertices and 1538 faces with a
    16-vertex boundary, the connectivity counts of the standard hand template.
    """
    verts, faces = [], []
    th = 2 * np.pi * np.arange(ring_size) / ring_size
    for r in range(rings):
        z = length * r / (rings - 1)
        verts += [[radius * np.cos(t), radius * np.sin(t), z] for t in th]
    ring = lambda r: list(range(r * ring_size, (r + 1) * ring_size))
    for r in range(rings - 1):
        faces += _stitch(ring(r), ring(r + 1))
    base = len(verts)
    th2 = 2 * np.pi * (np.arange(cap_ring) + 0.5) / cap_ring
    verts += [[0.5 * radius * np.cos(t), 0.5 * radius * np.sin(t), length + 0.4 * radius] for t in th2]
    inner = list(range(base, base + cap_ring))
    faces += _stitch(ring(rings - 1), inner)
    apex = len(verts)
    verts.append([0, 0, length + 0.6 * radius])
    faces += [[inner[k], inner[(k + 1) % cap_ring], apex] for k in range(cap_ring)]
    mesh = TriMesh(verts, faces)
    build_edges(mesh.faces, mesh.n_vertices)
    return mesh.validate()


# ---------------------------------------------------------------------- paddle


def _paddle_cells():
    cells = set()
    for i in range(5):
        for j in range(4):
            cells.add((i, j))
    for j in range(4, 9):
        for i in (0, 1, 3, 4):
            cells.add((i, j))
    return sorted(cells)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def paddle_rig(cell: float = 0.012, thickness: float = 0.016, seed: int = 0) -> RigBundle:
    """Four-joint toy hand: a palm slab with two fingers, one of them two-jointed.

    Joints: 0 root (palm), 1 finger A base, 2 finger A middle, 3 finger B base.
    The surface is a closed extruded lattice; 120 vertices and 236 faces.
    Fingers point along +y and the slab is thin along z.
    """
    cells = _paddle_cells()
    cellset = set(cells)
    pts = sorted({(i + di, j + dj) for i, j in cells for di in (0, 1) for dj in (0, 1)})
    pid = {p: k for k, p in enumerate(pts)}
    n = len(pts)
    xy = np.array(pts, float)
    xmax, ymax = xy[:, 0].max(), xy[:, 1].max()

    # layer 0: z = +t/2 (top), layer 1: z = -t/2 (bottom)
    verts = np.concatenate([
        np.c_[xy * cell, np.full(n, thickness / 2)],
        np.c_[xy * cell, np.full(n, -thickness / 2)],
    ])
    faces, uvs = [], []

    def top_uv(p):
        return [0.02 + 0.46 * p[0] / xmax, 0.22 + 0.76 * p[1] / ymax]

    def bot_uv(p):
        return [0.98 - 0.46 * p[0] / xmax, 0.22 + 0.76 * p[1] / ymax]

    for i, j in cells:
        q = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
        k = [pid[p] for p in q]
        for tri in ([0, 1, 2], [0, 2, 3]):
            faces.append([k[t] for t in tri])
            uvs.append([top_uv(q[t]) for t in tri])
        for tri in ([0, 2, 1], [0, 3, 2]):
            faces.append([n + k[t] for t in tri])
            uvs.append([bot_uv(q[t]) for t in tri])

    # boundary loop of the top layer, walked along its orientation
    nxt = {}
    for i, j in cells:
        q = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
        nb = [(i, j - 1), (i + 1, j), (i, j + 1), (i - 1, j)]
        for e in range(4):
            if nb[e] not in cellset:
                nxt[q[e]] = q[(e + 1) % 4]
    start = min(nxt)
    loop, p = [start], nxt[start]
    while p != start:
        loop.append(p)
        p = nxt[p]
    seg = [np.linalg.norm(np.subtract(loop[(s + 1) % len(loop)], loop[s])) for s in range(len(loop))]
    arc = np.concatenate([[0], np.cumsum(seg)]) / np.sum(seg)
    for s, a in enumerate(loop):
        b = loop[(s + 1) % len(loop)]
        ta, tb, ba, bb = pid[a], pid[b], n + pid[a], n + pid[b]
        ua, ub = 0.02 + 0.96 * arc[s], 0.02 + 0.96 * arc[s + 1]
        # top layer winds a->b counter-clockwise seen from +z, so the outward
        # wall normal is (b - a) x z
        faces += [[ta, ba, bb], [ta, bb, tb]]
        uvs += [[[ua, 0.18], [ua, 0.02], [ub, 0.02]], [[ua, 0.18], [ub, 0.02], [ub, 0.18]]]

    faces = np.array(faces)
    template = TriMesh(verts, faces, np.array(uvs))
    build_edges(faces, len(verts))

    # skinning
    x, y = np.tile(xy[:, 0], 2), np.tile(xy[:, 1], 2)
    J = 4
    W = np.zeros((len(verts), J))
    fa = x <= 2
    base = _smoothstep(y - 3.5)       # 0 below the knuckle row, 0.5 on it, 1 above
    mid = (y >= 7).astype(float)      # finger A hinges between rows 6 and 7
    W[:, 0] = 1 - base
    W[fa, 1] = base[fa] * (1 - mid[fa])
    W[fa, 2] = base[fa] * mid[fa]
    W[~fa, 3] = base[~fa]

    # joint regressor: averages of vertex groups
    R = np.zeros((J, len(verts)))
    groups = [
        (y >= 1) & (y <= 3) & (x >= 1) & (x <= 4),
        (y == 4) & fa,
        ((y == 6) | (y == 7)) & fa,
        (y == 4) & ~fa,
    ]
    for j, g in enumerate(groups):
        R[j, g] = 1.0 / g.sum()

    center = verts.mean(0)
    verts = verts - center
    template = TriMesh(verts, faces, np.array(uvs))

    z = verts[:, 2]
    shape = np.zeros((len(verts), 3, 4))
    shape[:, 1, 0] = 0.1 * cell * np.clip(y - 4, 0, None)             # finger length
    shape[:, 0, 1] = 0.08 * cell * (x - xmax / 2)                     # palm width
    shape[:, 2, 2] = 0.1 * np.sign(z) * thickness                     # thickness
    shape[:, 1, 3] = 0.05 * cell * np.clip(y - 4, 0, None) * np.where(fa, 1, -1)  # finger ratio

    rng = np.random.default_rng(seed)
    near = np.exp(-((y - 4.0) ** 2) / 2)[:, None, None]
    pose = rng.normal(0, 3e-4, (len(verts), 3, 9 * (J - 1))) * near

    return RigBundle(template, np.array([-1, 0, 1, 0]), W, R, shape, pose,
                     name="paddle").rounded().validate()
