"""Pinhole camera, OpenCV convention (x right, y down, z forward)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))   # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)

    def validate(self) -> "Camera":
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        return self

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, X):
        """World points (N, 3) to camera space; tensors stay tensors."""
        if isinstance(X, ad.Tensor):
            return ad.matmul(X, self.rotation.T) + self.translation
        return np.asarray(X) @ self.rotation.T + self.translation

    def project(self, Xc):
        """Camera-space points to continuous pixel coordinates (N, 2).

        Pixel (row r, col c) has its centre at (c + 0.5, r + 0.5).
        """
        z = Xc[:, 2]
        u = Xc[:, 0] / z * self.fx + self.cx
        v = Xc[:, 1] / z * self.fy + self.cy
        if isinstance(Xc, ad.Tensor):
            return ad.stack([u, v], axis=1)
        return np.stack([u, v], axis=1)

    def pixel_rays(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Camera-space ray directions (z = 1) through pixel centres."""
        return np.stack([(cols + 0.5 - self.cx) / self.fx,
                         (rows + 0.5 - self.cy) / self.fy,
                         np.ones(len(rows))], axis=1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        keys = {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"}
        return cls(**{k: v for k, v in d.items() if k in keys}).validate()

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), *, f: float, width: int,
                height: int) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``up`` maps to image -y."""
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(-up, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(f, f, width / 2, height / 2, width, height, R, -R @ eye).validate()
