"""Differentiable rasterizer with soft silhouettes and shadow-map visibility."""
from .camera import Camera
from .frame import (AppearanceMaps, Lighting, RenderOptions, RenderOutput, render_frame,
                    render_mesh)
from .raster import rasterize, silhouette_profile, soft_silhouette
from .shading import sample_maps, shade
from .shadow import UNOCCLUDED, depth_test, shadow_camera, visibility

__all__ = [
    "AppearanceMaps", "Camera", "Lighting", "RenderOptions", "RenderOutput", "UNOCCLUDED",
    "depth_test", "rasterize", "render_frame", "render_mesh", "sample_maps", "shade",
    "shadow_camera", "silhouette_profile", "soft_silhouette", "visibility",
]
