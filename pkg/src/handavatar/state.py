"""Optimizable avatar parameters and their mapping onto a ParamStore."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ParamStore
from .container import f32
from .render import AppearanceMaps, Lighting
from .rig import PoseParams

GEOMETRY = "geometry"
APPEARANCE = "appearance"


def gamma_key(t: int) -> str:
    return f"gamma_{t:04d}"


def translation_key(t: int) -> str:
    return f"translation_{t:04d}"


@dataclass
class AvatarState:
    beta: np.ndarray
    gammas: np.ndarray          # (N, J, 3)
    translations: np.ndarray    # (N, 3)
    displacement: np.ndarray    # (fine V,)
    albedo: np.ndarray          # (R, R, 3)
    normal_map: np.ndarray      # (R, R, 3)
    light_positions: np.ndarray  # (M, 3)
    reflection: np.ndarray      # (2, 3) ambient row, diffuse row

    @classmethod
    def initial(cls, rig, poses: list[PoseParams], texture_size: int = 512, gray: float = 0.5,
                light=(0.0, -0.3, 0.0), ambient: float = 0.5, diffuse: float = 0.5) -> "AvatarState":
        maps = AppearanceMaps.flat(texture_size, gray)
        return cls(np.zeros(rig.n_betas),
                   np.array([p.gamma for p in poses], dtype=float).reshape(len(poses), rig.n_joints, 3),
                   np.array([p.translation for p in poses], dtype=float).reshape(len(poses), 3),
                   np.zeros(rig.n_fine), maps.albedo, maps.normal_map,
                   np.atleast_2d(np.asarray(light, float)),
                   np.array([[ambient] * 3, [diffuse] * 3], dtype=float))

    @property
    def n_frames(self) -> int:
        return len(self.gammas)

    def pose(self, t: int) -> PoseParams:
        return PoseParams(self.gammas[t], self.translations[t])

    @property
    def appearance(self) -> AppearanceMaps:
        return AppearanceMaps(self.albedo, self.normal_map)

    @property
    def lighting(self) -> Lighting:
        return Lighting(self.light_positions, self.reflection[0], self.reflection[1])

    def copy(self) -> "AvatarState":
        return replace(self, **{k: np.array(v, copy=True) for k, v in self.__dict__.items()})

    def rounded(self) -> "AvatarState":
        """The state at the float32 precision used on disk."""
        return replace(self, **{k: f32(v) for k, v in self.__dict__.items()})

    # ------------------------------------------------------------ ParamStore

    def to_store(self) -> ParamStore:
        s = ParamStore()
        s.add("beta", self.beta, kind=GEOMETRY)
        for t in range(self.n_frames):
            s.add(gamma_key(t), self.gammas[t], kind=GEOMETRY)
            s.add(translation_key(t), self.translations[t], kind=GEOMETRY)
        s.add("D", self.displacement, kind=GEOMETRY)
        s.add("albedo", self.albedo, kind=APPEARANCE)
        s.add("normal_map", self.normal_map, kind=APPEARANCE)
        s.add("light_position", self.light_positions, kind=APPEARANCE)
        s.add("reflection", self.reflection, kind=APPEARANCE)
        return s

    @classmethod
    def from_store(cls, s: ParamStore) -> "AvatarState":
        n = sum(1 for k in s.names() if k.startswith("gamma_"))
        return cls(s["beta"].copy(),
                   np.array([s[gamma_key(t)] for t in range(n)]),
                   np.array([s[translation_key(t)] for t in range(n)]),
                   s["D"].copy(), s["albedo"].copy(), s["normal_map"].copy(),
                   s["light_position"].copy(), s["reflection"].copy())
