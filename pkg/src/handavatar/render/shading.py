"""Texture lookups, tangent frames and ambient + diffuse shading."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad


def vertex_tangents(vertices, faces: np.ndarray, uv: np.ndarray):
    """Per-vertex tangents (along +u) and per-face frame handedness.

    Face tangents come from the UV parameterization and are averaged onto
    vertices (unnormalized), so interpolated tangents vary continuously
    across faces that share a chart.
    """
    V = ad.const(vertices)
    tri = V[faces]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    du1, dv1 = uv[:, 1, 0] - uv[:, 0, 0], uv[:, 1, 1] - uv[:, 0, 1]
    du2, dv2 = uv[:, 2, 0] - uv[:, 0, 0], uv[:, 2, 1] - uv[:, 0, 1]
    det = du1 * dv2 - du2 * dv1
    det = np.where(np.abs(det) < 1e-14, 1.0, det)
    T = (e1 * (dv2 / det)[:, None] - e2 * (dv1 / det)[:, None])
    Bv = (e2.value * (du1 / det)[:, None] - e1.value * (du2 / det)[:, None])
    N = np.cross(e1.value, e2.value)
    hand = np.where((np.cross(N, T.value) * Bv).sum(1) < 0, -1.0, 1.0)
    Tn = ad.normalize(T, eps=1e-30)
    contrib = ad.reshape(ad.stack([Tn, Tn, Tn], axis=1), (-1, 3))
    t_v = ad.scatter_rows(contrib, faces.reshape(-1), V.shape[0])
    return t_v, hand


def interpolate(attr, faces: np.ndarray, fid: np.ndarray, bary):
    """Barycentric interpolation of per-vertex rows at fragments."""
    return ad.tsum(ad.reshape(bary, (-1, 3, 1)) * attr[faces[fid]], axis=1)


def sample_maps(albedo, normal_map, uv, normal, tangent, handedness):
    """Albedo and world-space shading normal at fragments.

    ``normal`` is the unit geometric normal, ``tangent`` an (unnormalized)
    tangent, orthonormalized here against ``normal``; the bitangent is
    ``handedness * normal x tangent``. Tangent-space normal-map vectors are
    renormalized after the bilinear lookup.
    """
    alb = ad.bilinear_sample(albedo, uv)
    nt = ad.normalize(ad.bilinear_sample(normal_map, uv), eps=1e-30)
    N = ad.const(normal)
    T = ad.const(tangent)
    T = ad.normalize(T - ad.dot(T, N, keepdims=True) * N, eps=1e-30)
    B = ad.cross(N, T) * np.reshape(handedness, (-1, 1))
    n = nt[:, 0:1] * T + nt[:, 1:2] * B + nt[:, 2:3] * N
    return alb, ad.normalize(n, eps=1e-30)


def shade(albedo, normal, points, lights, ambient, diffuse, visibility=None):
    """``ambient * albedo + sum_m diffuse * albedo * max(L_m . N, 0) * V_m``, unclamped.

    ``lights`` is (M, 3); ``visibility`` (P, M) or ``None`` for fully lit.
    """
    alb = ad.const(albedo)
    lights = ad.const(lights)
    out = alb * ad.reshape(ad.const(ambient), (1, 3))
    for m in range(lights.shape[0]):
        L = ad.normalize(lights[m] - points, eps=1e-30)
        lam = ad.relu(ad.dot(L, normal, keepdims=True))
        if visibility is not None:
            lam = lam * ad.reshape(ad.const(visibility)[:, m], (-1, 1))
        out = out + alb * lam * ad.reshape(ad.const(diffuse), (1, 3))
    return out
