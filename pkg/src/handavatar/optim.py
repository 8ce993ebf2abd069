"""Adam, the staged fitting schedule and pose refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .energy import APP_TERMS, GEO_TERMS, EnergyLog, draw_texture_offsets
from .rig import DISPLACEMENT_CAP, lbs
from .state import APPEARANCE, GEOMETRY, AvatarState, gamma_key, translation_key

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 5


class DivergenceError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)   # per-group step count

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)


def project(name: str, value: np.ndarray) -> np.ndarray:
    """Feasible-set projection applied after every update."""
    if name == "albedo":
        return np.clip(value, 0.0, 1.0)
    if name == "D":
        return np.clip(value, -DISPLACEMENT_CAP, DISPLACEMENT_CAP)
    return value


def adam_step(state: AdamState, store: ad.ParamStore, grads: dict, names, lr: float | None = None) -> list[str]:
    """Bias-corrected Adam update of ``names`` in place; returns groups skipped for non-finite gradients."""
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    skipped = []
    for n in names:
        p = store.groups[n]
        if p.frozen:
            continue
        g = np.asarray(grads[n], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {n!r} shape {p.value.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; step skipped", n)
            skipped.append(n)
            continue
        m = state.m.get(n, np.zeros_like(g))
        v = state.v.get(n, np.zeros_like(g))
        k = state.steps.get(n, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** k)
        vhat = v / (1 - b2 ** k)
        p.value = project(n, p.value - lr * mhat / (np.sqrt(vhat) + state.eps))
        state.m[n], state.v[n], state.steps[n] = m, v, k
    return skipped


# ---------------------------------------------------------------------- schedule


@dataclass
class Stage:
    name: str
    terms: tuple
    kinds: tuple          # parameter kinds optimized in this stage
    epochs: int
    groups: tuple | None = None   # explicit group names; overrides kinds

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"stage {self.name}: negative epoch count")


@dataclass
class Schedule:
    stages: list
    lr_geometry: float = 1e-3
    lr_appearance: float = 1e-2
    batch_size: int = 8
    seed: int = 0

    @classmethod
    def default(cls, epochs=(100, 50, 50), **kw) -> "Schedule":
        e1, e2, e3 = epochs
        return cls([Stage("geometry", GEO_TERMS, (GEOMETRY,), e1),
                    Stage("joint", GEO_TERMS + APP_TERMS, (GEOMETRY, APPEARANCE), e2),
                    Stage("appearance", APP_TERMS, (APPEARANCE,), e3)], **kw)

    def validate(self, store: ad.ParamStore) -> "Schedule":
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for s in self.stages:
            for g in s.groups or ():
                if g not in store:
                    raise ValueError(f"stage {s.name}: unknown parameter group {g!r}")
        return self


@dataclass
class FitResult:
    store: ad.ParamStore
    log: EnergyLog
    epochs_run: int

    @property
    def state(self) -> AvatarState:
        return AvatarState.from_store(self.store)


def _stage_groups(stage: Stage, store: ad.ParamStore) -> list[str]:
    if stage.groups is not None:
        names = list(stage.groups)
    else:
        names = [n for n in store.names() if store.groups[n].kind in stage.kinds]
    return [n for n in names if not store.groups[n].frozen]


def run_schedule(model, store: ad.ParamStore, schedule: Schedule, energy_log: EnergyLog | None = None,
                 checkpoint_dir=None, checkpoint_every: int = 0, frames=None, on_epoch=None) -> FitResult:
    """Run every stage of ``schedule`` on ``store`` in place.

    An epoch visits all frames once, in a seeded shuffled order, in
    mini-batches; geometry and appearance groups have separate Adam states
    that persist across stages. The logged per-epoch energy is the mean of
    the batch reports.
    """
    schedule.validate(store)
    energy_log = energy_log or EnergyLog()
    frames = list(range(len(model.images))) if frames is None else list(frames)
    if not frames:
        raise ValueError("no frames to fit")
    rng = np.random.default_rng(schedule.seed)
    opt = {GEOMETRY: AdamState(schedule.lr_geometry), APPEARANCE: AdamState(schedule.lr_appearance)}
    tex = store["albedo"].shape[0] if "albedo" in store else 0
    epoch = 0
    for stage in schedule.stages:
        groups = _stage_groups(stage, store)
        terms = model.active(stage.terms)
        needs_offsets = any(t in terms for t in ("t_reg", "n_reg"))
        first, over = None, 0
        for _ in range(stage.epochs):
            order = [frames[i] for i in rng.permutation(len(frames))]
            reports = []
            for b in range(0, len(order), schedule.batch_size):
                batch = order[b:b + schedule.batch_size]
                offsets = draw_texture_offsets(rng, tex) if needs_offsets else None
                holder = {}

                def builder(P):
                    total, rep = model(P, batch, terms, offsets)
                    holder["rep"] = rep
                    return total

                _, grads, tape = ad.value_and_grad(builder, store)
                reports.append(holder["rep"])
                for kind, st in opt.items():
                    names = [n for n in groups if store.groups[n].kind == kind and n in tape.used]
                    adam_step(st, store, grads, names)
            rep = _average(reports)
            energy_log.add(epoch, stage.name, rep)
            epoch += 1
            if first is None:
                first = rep.total
            over = over + 1 if rep.total > DIVERGENCE_FACTOR * first else 0
            if over >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"stage {stage.name}: energy {rep.total:.4g} above {DIVERGENCE_FACTOR:g}x the stage's "
                    f"first epoch ({first:.4g}) for {DIVERGENCE_PATIENCE} epochs; terms {rep.terms}")
            if checkpoint_dir is not None and checkpoint_every > 0 and epoch % checkpoint_every == 0:
                from .avatar_io import save_state
                save_state(Path(checkpoint_dir) / f"epoch_{epoch:04d}", AvatarState.from_store(store),
                           {"epoch": epoch, "stage": stage.name})
            if on_epoch is not None:
                on_epoch(epoch, stage.name, rep)
    return FitResult(store, energy_log, epoch)


def _average(reports):
    from .energy import EnergyReport
    n = len(reports)
    terms = {k: sum(r.terms[k] for r in reports) / n for k in reports[0].terms}
    total = sum(r.total for r in reports) / n
    per_frame = {}
    for r in reports:
        per_frame.update(r.per_frame)
    return EnergyReport(terms, dict(reports[0].weights), total, per_frame)


# ---------------------------------------------------------------------- pose refinement

REFINE_MODES = ("sil", "full", "known")


def pose_groups(n_frames: int) -> list[str]:
    return [k for t in range(n_frames) for k in (gamma_key(t), translation_key(t))]


def refine_pose(model, state: AvatarState, mode: str = "known", epochs: int = 50, seed: int = 0,
                batch_size: int = 8, lr_pose: float = 1e-3, lr_appearance: float = 1e-2,
                energy_log: EnergyLog | None = None, gray: float = 0.5) -> tuple[AvatarState, EnergyLog]:
    """Update per-frame poses of a fitted avatar; shape and displacement stay frozen.

    ``sil`` uses the geometry terms only. ``known`` uses every term with the
    appearance frozen. ``full`` optimizes the appearance jointly with the
    poses, starting from a flat ``gray`` albedo and flat normal map.
    """
    if mode not in REFINE_MODES:
        raise ValueError(f"mode must be one of {REFINE_MODES}, got {mode!r}")
    st = state.copy()
    if mode == "full":
        st.albedo = np.full_like(st.albedo, gray)
        st.normal_map = np.zeros_like(st.normal_map)
        st.normal_map[..., 2] = 1.0
    store = st.to_store()
    poses = pose_groups(st.n_frames)
    if mode == "sil":
        stage = Stage("refine-sil", GEO_TERMS, (), epochs, tuple(poses))
    elif mode == "known":
        stage = Stage("refine-known", GEO_TERMS + APP_TERMS, (), epochs, tuple(poses))
    else:
        app = [n for n in store.names(APPEARANCE)]
        stage = Stage("refine-full", GEO_TERMS + APP_TERMS, (), epochs, tuple(poses + app))
    keep = set(stage.groups)
    store.freeze([n for n in store.names() if n not in keep])
    sched = Schedule([stage], lr_pose, lr_appearance, batch_size, seed)
    res = run_schedule(model, store, sched, energy_log)
    return AvatarState.from_store(res.store), res.log


def procrustes_align(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Similarity transform of ``X`` that best matches ``Y`` in least squares."""
    mx, my = X.mean(0), Y.mean(0)
    A, B = X - mx, Y - my
    U, s, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    scale = (s * np.diag(D)).sum() / (A * A).sum()
    return scale * A @ R + my


def pa_mpvpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-vertex error after similarity alignment, in millimetres."""
    return float(np.linalg.norm(procrustes_align(pred, gt) - gt, axis=1).mean() * 1000.0)


def pose_errors(rig, beta, gammas, translations, gt_vertices) -> np.ndarray:
    """Per-frame PA-MPVPE (mm) of coarse posed vertices against ground truth."""
    return np.array([pa_mpvpe(lbs(rig, beta, g, tr).vertices, np.asarray(v))
                     for g, tr, v in zip(gammas, translations, gt_vertices)])
