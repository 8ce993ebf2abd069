"""Frame compositor: rasterize, sample maps, shadow, shade, composite on white."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..geometry import TriMesh, vertex_normals
from .camera import Camera
from .raster import rasterize, soft_silhouette
from .shading import interpolate, sample_maps, shade, vertex_tangents
from .shadow import MAP_SIZE, visibility


@dataclass
class Lighting:
    positions: np.ndarray                 # (M, 3) meters
    ambient: np.ndarray                   # (3,) k_a * i_a per channel
    diffuse: np.ndarray                   # (3,) k_d * i_d per channel

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64).reshape(3)
        if len(self.positions) < 1:
            raise ValueError("need at least one light")
        if (self.ambient < 0).any() or (self.diffuse < 0).any():
            raise ValueError("light intensities must be nonnegative")

    @property
    def reflection(self) -> np.ndarray:
        """(2, 3) array: ambient row, diffuse row."""
        return np.stack([self.ambient, self.diffuse])


@dataclass
class AppearanceMaps:
    albedo: np.ndarray       # (R, R, 3) in [0, 1]
    normal_map: np.ndarray   # (R, R, 3) tangent-space vectors, z > 0

    @classmethod
    def flat(cls, size: int = 512, gray: float = 0.5) -> "AppearanceMaps":
        nm = np.zeros((size, size, 3))
        nm[..., 2] = 1.0
        return cls(np.full((size, size, 3), gray), nm)


@dataclass
class RenderOptions:
    shadows: bool = True
    shadow_map_size: int = MAP_SIZE
    silhouette: bool = True
    color: bool = True       # skip shading (white image) when only the silhouette is needed


@dataclass
class RenderOutput:
    color: object            # (H, W, 3) clamped, white background
    silhouette: object       # (H, W) soft coverage
    depth: np.ndarray        # (H, W), inf on background
    face_id: np.ndarray      # (H, W), -1 on background
    barycentrics: np.ndarray  # (H, W, 3)
    visibility: np.ndarray   # (H, W) light-0 visibility, 1 on background
    extras: dict = field(default_factory=dict)

    def numpy(self) -> "RenderOutput":
        return RenderOutput(ad.value(self.color), ad.value(self.silhouette), self.depth,
                            self.face_id, self.barycentrics, self.visibility, {})


def render_mesh(vertices, mesh: TriMesh, albedo, normal_map, lights, reflection,
                camera: Camera, options: RenderOptions | None = None) -> RenderOutput:
    """Render fine-mesh ``vertices`` (world, tensor or array) with topology/UVs from ``mesh``.

    ``lights`` (M, 3) and ``reflection`` (2, 3) (ambient row, diffuse row)
    may be tensors, as may the maps.
    """
    options = options or RenderOptions()
    faces = mesh.faces
    V = ad.const(vertices)
    H, W = camera.height, camera.width
    frag, Xc, xy = rasterize(V, faces, camera)

    if options.silhouette:
        sil = soft_silhouette(xy, Xc.value[:, 2], faces, mesh.edges, camera,
                              coverage=frag.face_id >= 0)
    else:
        sil = ad.const((frag.face_id >= 0).astype(np.float64))

    bary_img = np.zeros((H * W, 3))
    vis_img = np.ones(H * W)
    color_flat = ad.const(np.ones((H * W, 3)))
    P = len(frag.pix)
    if P and options.color:
        fid = frag.faces
        vn = vertex_normals(V, faces)
        N = ad.normalize(interpolate(vn, faces, fid, frag.bary), eps=1e-30)
        uv = ad.tsum(ad.reshape(frag.bary, (-1, 3, 1)) * mesh.uv[fid], axis=1)
        t_v, hand = vertex_tangents(V, faces, mesh.uv)
        T = interpolate(t_v, faces, fid, frag.bary)
        alb, n_shade = sample_maps(ad.clamp(ad.const(albedo), 0.0, 1.0), normal_map, uv, N, T, hand[fid])
        refl = ad.const(reflection)
        Vis = visibility(V, faces, lights, frag.hit, options.shadow_map_size) if options.shadows else None
        I = shade(alb, n_shade, frag.hit, lights, refl[0], refl[1], Vis)
        color_flat = ad.put(color_flat, (frag.pix[:, None] * 3 + np.arange(3)).ravel(),
                            ad.clamp(I, 0.0, 1.0))
        bary_img[frag.pix] = ad.value(frag.bary)
        if Vis is not None:
            vis_img[frag.pix] = Vis.value[:, 0]
    color = ad.reshape(color_flat, (H, W, 3))
    return RenderOutput(color, sil, frag.depth, frag.face_id, bary_img.reshape(H, W, 3),
                        vis_img.reshape(H, W), {"hit": frag.hit, "pix": frag.pix})


def render_frame(rig, beta, pose, displacement, appearance: AppearanceMaps, lighting: Lighting,
                 camera: Camera, options: RenderOptions | None = None,
                 stop_normal_grad: bool = False) -> RenderOutput:
    """Pose the rig, apply displacement and render one frame (plain arrays in, arrays out)."""
    from ..rig import personalized_vertices
    V = personalized_vertices(rig, beta, pose, displacement, stop_normal_grad)
    return render_mesh(V, rig.subdivision[0], appearance.albedo, appearance.normal_map,
                       lighting.positions, lighting.reflection, camera, options).numpy()
