"""Compiled inner loops: z-buffer rasterization, nearest contour edges, ray picking.

These kernels work on plain arrays and make only discrete decisions (which
face, which edge); the differentiable quantities are recomputed from the
chosen indices with tape operations.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@njit(cache=True)
def raster(xy, z, faces, height, width, near, ox, oy):
    """Nearest-face z-buffer over pixel centres.

    ``xy`` are continuous pixel coordinates of the vertices, ``z`` their
    positive camera depth. The output grid covers pixel columns
    ``ox .. ox + width`` and rows ``oy .. oy + height`` so callers can
    rasterize a margin around the image. Faces with a vertex closer than
    ``near`` are skipped. Ties keep the lower face index.
    """
    face_id = -np.ones((height, width), dtype=np.int32)
    depth = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 < near or z1 < near or z2 < near:
            continue
        x0, y0 = xy[i0, 0] - ox, xy[i0, 1] - oy
        x1, y1 = xy[i1, 0] - ox, xy[i1, 1] - oy
        x2, y2 = xy[i2, 0] - ox, xy[i2, 1] - oy
        area = _edge(x0, y0, x1, y1, x2, y2)
        if abs(area) < 1e-12:
            continue
        c0 = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        c1 = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        r0 = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        r1 = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = _edge(x1, y1, x2, y2, px, py) / area
                w1 = _edge(x2, y2, x0, y0, px, py) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                zz = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                if zz < depth[r, c]:
                    depth[r, c] = zz
                    face_id[r, c] = f
    return face_id, depth


@njit(cache=True)
def nearest_segments(points, a, b):
    """Index of and distance to the nearest 2D segment for every point."""
    n, m = points.shape[0], a.shape[0]
    idx = -np.ones(n, dtype=np.int64)
    dist = np.full(n, np.inf)
    for i in range(n):
        px, py = points[i, 0], points[i, 1]
        best, bj = np.inf, -1
        for j in range(m):
            ex, ey = b[j, 0] - a[j, 0], b[j, 1] - a[j, 1]
            qx, qy = px - a[j, 0], py - a[j, 1]
            ll = ex * ex + ey * ey
            t = 0.0
            if ll > 0:
                t = min(max((qx * ex + qy * ey) / ll, 0.0), 1.0)
            dx, dy = qx - t * ex, qy - t * ey
            d = dx * dx + dy * dy
            if d < best:
                best, bj = d, j
        idx[i] = bj
        dist[i] = np.sqrt(best)
    return idx, dist


@njit(cache=True)
def pick_faces(dirs, tri, cand):
    """Closest triangle hit by rays from the origin among candidate faces.

    ``dirs`` (Q, 3) ray directions, ``tri`` (F, 3, 3) triangle vertices in the
    same frame, ``cand`` (Q, K) candidate face ids (-1 = none). Returns the hit
    face per ray or -1 (Moller-Trumbore, two-sided).
    """
    q, k = cand.shape
    out = -np.ones(q, dtype=np.int64)
    for i in range(q):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = np.inf
        for s in range(k):
            f = cand[i, s]
            if f < 0:
                continue
            ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
            e1x, e1y, e1z = tri[f, 1, 0] - ax, tri[f, 1, 1] - ay, tri[f, 1, 2] - az
            e2x, e2y, e2z = tri[f, 2, 0] - ax, tri[f, 2, 1] - ay, tri[f, 2, 2] - az
            px, py, pz = dy * e2z - dz * e2y, dz * e2x - dx * e2z, dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < 1e-300:
                continue
            inv = 1.0 / det
            tx, ty, tz = -ax, -ay, -az
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx, qy, qz = ty * e1z - tz * e1y, tz * e1x - tx * e1z, tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if t > 0 and t < best:
                best = t
                out[i] = f
    return out
