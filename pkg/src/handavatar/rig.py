"""Articulated hand model: blendshapes, joint regression and linear blend skinning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .container import f32, load_arrays, save_arrays
from .geometry import MeshError, TriMesh, subdivide_linear, vertex_normals

log = logging.getLogger(__name__)

DISPLACEMENT_CAP = 0.005  # meters


@dataclass(eq=False)
class RigBundle:
    template: TriMesh
    parents: np.ndarray          # (J,), root = -1, parents precede children
    skin_weights: np.ndarray     # (V, J)
    joint_regressor: np.ndarray  # (J, V)
    shape_basis: np.ndarray      # (V, 3, n_beta)
    pose_basis: np.ndarray       # (V, 3, 9 (J - 1))
    name: str = "rig"

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_betas(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices

    def validate(self) -> "RigBundle":
        V, J = self.n_vertices, self.n_joints
        self.template.validate()
        if self.skin_weights.shape != (V, J):
            raise MeshError(f"skin_weights shape {self.skin_weights.shape} != {(V, J)}")
        if (self.skin_weights < 0).any() or not np.allclose(self.skin_weights.sum(1), 1.0, atol=1e-6):
            raise MeshError("skin_weights rows must be nonnegative and sum to 1")
        if self.joint_regressor.shape != (J, V):
            raise MeshError("joint_regressor must be (J, V)")
        if self.shape_basis.shape[:2] != (V, 3):
            raise MeshError("shape_basis must be (V, 3, n_beta)")
        if self.pose_basis.shape != (V, 3, 9 * (J - 1)):
            raise MeshError("pose_basis must be (V, 3, 9 (J - 1))")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise MeshError("kinematic tree needs a single root at index 0")
        if any(self.parents[j] >= j for j in range(1, J)):
            raise MeshError("parents must precede children")
        joints = self.joint_regressor @ self.template.vertices
        lo, hi = self.template.vertices.min(0), self.template.vertices.max(0)
        if ((joints < lo - 1e-9) | (joints > hi + 1e-9)).any():
            raise MeshError("regressed rest joints outside the template bounding box")
        return self

    @cached_property
    def subdivision(self):
        """(fine rest mesh, coarse->fine sparse map)."""
        return subdivide_linear(self.template)

    @property
    def fine_faces(self) -> np.ndarray:
        return self.subdivision[0].faces

    @property
    def fine_uv(self) -> np.ndarray:
        return self.subdivision[0].uv

    @property
    def subdivision_map(self):
        return self.subdivision[1]

    @property
    def n_fine(self) -> int:
        return self.subdivision[1].shape[0]

    # ------------------------------------------------------------------ io

    def save(self, path):
        t = self.template
        arrays = {
            "template_vertices": t.vertices,
            "faces": t.faces,
            "skin_weights": self.skin_weights,
            "joint_regressor": self.joint_regressor,
            "shape_basis": self.shape_basis,
            "pose_basis": self.pose_basis,
        }
        if t.uv is not None:
            arrays["uv"] = t.uv
        meta = {"name": self.name, "parents": [int(p) for p in self.parents]}
        return save_arrays(path, arrays, meta, kind="rig")

    def rounded(self) -> "RigBundle":
        """Copy with every array at the float32 precision used on disk."""
        t = self.template
        uv = None if t.uv is None else f32(t.uv)
        return RigBundle(TriMesh(f32(t.vertices), t.faces, uv), self.parents.copy(),
                         f32(self.skin_weights), f32(self.joint_regressor),
                         f32(self.shape_basis), f32(self.pose_basis), self.name)

    @classmethod
    def load(cls, path) -> "RigBundle":
        arrays, meta = load_arrays(path, kind="rig")
        sw = arrays["skin_weights"]
        rig = cls(
            template=TriMesh(arrays["template_vertices"], arrays["faces"], arrays.get("uv")),
            parents=np.asarray(meta["parents"], dtype=np.int64),
            skin_weights=sw,
            joint_regressor=arrays["joint_regressor"],
            shape_basis=arrays["shape_basis"],
            pose_basis=arrays["pose_basis"],
            name=meta.get("name", "rig"),
        )
        return rig.validate()


@dataclass
class PoseParams:
    gamma: np.ndarray        # (J, 3) axis-angle, radians; row 0 is the global rotation
    translation: np.ndarray  # (3,) meters

    @classmethod
    def zeros(cls, n_joints: int) -> "PoseParams":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def check(self):
        if not (np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.translation))):
            raise ValueError("pose contains non-finite values")
        if (np.linalg.norm(self.gamma, axis=1) >= np.pi).any():
            log.warning("axis-angle magnitude >= pi in pose")
        return self


@dataclass
class ShapeParams:
    beta: np.ndarray
    displacement: np.ndarray = field(default=None)


# ---------------------------------------------------------------------- model


def shaped_vertices(rig: RigBundle, beta):
    b, plain = ad.const(beta), not isinstance(beta, ad.Tensor)
    if b.shape != (rig.n_betas,):
        raise ValueError(f"beta has shape {b.shape}, expected ({rig.n_betas},)")
    V = rig.n_vertices
    basis = rig.shape_basis.reshape(V * 3, rig.n_betas)
    v = ad.reshape(ad.matmul(basis, b), (V, 3)) + rig.template.vertices
    return v.value if plain else v


def shaped_template(rig: RigBundle, beta) -> TriMesh:
    return rig.template.with_vertices(shaped_vertices(rig, np.asarray(beta, dtype=float)))


@dataclass
class Posed:
    vertices: object    # (V, 3) array or Tensor
    joints: object      # (J, 3) world joint positions
    rotations: object   # (J, 3, 3) world joint rotations
    transforms: object  # (J, 4, 4) skinning transforms (array)


def lbs(rig: RigBundle, beta, gamma, translation) -> Posed:
    """Shape, pose correctives, forward kinematics and skinning.

    Inputs may be arrays or tensors; outputs follow suit.
    """
    plain = not any(isinstance(x, ad.Tensor) for x in (beta, gamma, translation))
    beta, gamma, translation = ad.const(beta), ad.const(gamma), ad.const(translation)
    J, V = rig.n_joints, rig.n_vertices
    if gamma.shape != (J, 3):
        raise ValueError(f"gamma has shape {gamma.shape}, expected {(J, 3)}")
    v_shaped = shaped_vertices(rig, beta)
    v_shaped = ad.const(v_shaped)
    joints = ad.matmul(rig.joint_regressor, v_shaped)
    R = ad.rodrigues(gamma)
    feat = ad.reshape(R[1:] - np.eye(3), (-1,))
    corr = ad.matmul(rig.pose_basis.reshape(V * 3, -1), feat)
    v_posed = v_shaped + ad.reshape(corr, (V, 3))

    # Forward kinematics written as offsets from the rest pose, (G - I) and
    # (t_G - joint), so the zero pose reproduces the shaped template exactly.
    I3 = np.eye(3)
    GR, Dt = [None] * J, [None] * J
    for j in range(J):
        p = rig.parents[j]
        if p < 0:
            GR[j], Dt[j] = R[j], ad.const(np.zeros(3))
        else:
            GR[j] = ad.matmul(GR[p], R[j])
            Dt[j] = ad.matmul(GR[p] - I3, joints[j] - joints[p]) + Dt[p]
    GR = ad.stack(GR)
    Dt = ad.stack(Dt)
    GmI = GR - I3
    At = Dt - ad.reshape(ad.matmul(GmI, ad.reshape(joints, (J, 3, 1))), (J, 3))
    W = rig.skin_weights
    Bv = ad.reshape(ad.matmul(W, ad.reshape(GmI, (J, 9))), (V, 3, 3))
    tv = ad.matmul(W, At)
    verts = v_posed + ad.tsum(Bv * ad.reshape(v_posed, (V, 1, 3)), axis=-1) + tv + translation
    world_joints = joints + Dt + translation

    T = np.zeros((J, 4, 4))
    T[:, :3, :3] = GR.value
    T[:, :3, 3] = At.value + translation.value
    T[:, 3, 3] = 1.0
    if plain:
        return Posed(verts.value, world_joints.value, GR.value, T)
    return Posed(verts, world_joints, GR, T)


def pose_mesh(rig: RigBundle, beta, pose: PoseParams) -> tuple[TriMesh, np.ndarray]:
    """Posed coarse mesh and per-joint 4x4 skinning transforms."""
    p = lbs(rig, np.asarray(beta, float), pose.gamma, pose.translation)
    return rig.template.with_vertices(p.vertices), p.transforms


def regress_joints(rig: RigBundle, vertices):
    return ad.matmul(rig.joint_regressor, vertices) if isinstance(vertices, ad.Tensor) \
        else rig.joint_regressor @ vertices


def personalized_vertices(rig: RigBundle, beta, pose_or_vertices, displacement,
                          stop_normal_grad: bool = False):
    """Fine personalized vertices ``S(M(gamma, beta)) + D * n``.

    ``pose_or_vertices`` is either a :class:`PoseParams` or already-posed coarse
    vertices (array or tensor). ``n`` are unit normals of the posed subdivided
    mesh; with ``stop_normal_grad`` they are treated as constants.
    """
    if isinstance(pose_or_vertices, PoseParams):
        coarse = lbs(rig, beta, pose_or_vertices.gamma, pose_or_vertices.translation).vertices
    else:
        coarse = pose_or_vertices
    plain = not isinstance(coarse, ad.Tensor) and not isinstance(displacement, ad.Tensor)
    S = rig.subdivision_map
    D = ad.const(displacement)
    if D.shape != (S.shape[0],):
        raise ValueError(f"displacement has length {D.shape}, expected {S.shape[0]}")
    fine = ad.sparse_matmul(S, ad.const(coarse))
    if stop_normal_grad:
        n = vertex_normals(fine.value, rig.fine_faces)
    else:
        n = vertex_normals(fine, rig.fine_faces)
    out = fine + ad.reshape(D, (-1, 1)) * n
    return out.value if plain else out


# ---------------------------------------------------------------------- fitting


@dataclass
class RigFit:
    gamma: np.ndarray
    beta: np.ndarray
    translation: np.ndarray
    mean_error: float
    restarts: int
    ok: bool  # mean error below the restart threshold

    @property
    def pose(self) -> PoseParams:
        return PoseParams(self.gamma, self.translation)


def fit_rig_to_vertices(rig: RigBundle, target: np.ndarray, max_restarts: int = 5,
                        threshold: float = 0.01, jitter: float = 0.2, seed: int = 0,
                        fit_shape: bool = True, max_iter: int = 3000) -> RigFit:
    """Pose/shape parameters whose skinned mesh best matches ``target`` vertices.

    Minimises the summed squared vertex distance with L-BFGS on tape
    gradients. When the mean per-vertex distance stays above ``threshold``
    the fit is re-run from a jittered pose, up to ``max_restarts`` times.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != (rig.n_vertices, 3):
        raise ValueError(f"target must be ({rig.n_vertices}, 3)")
    J, nb = rig.n_joints, rig.n_betas
    rng = np.random.default_rng(seed)
    scale = 1.0 / (rig.n_vertices * 1e-4)  # mean squared error in cm^2

    def unpack(x):
        g = x[: 3 * J].reshape(J, 3)
        b = x[3 * J: 3 * J + nb] if fit_shape else np.zeros(nb)
        t = x[-3:]
        return g, b, t

    def fun(x):
        g, b, t = unpack(x)
        store = ad.ParamStore()
        store.add("gamma", g)
        store.add("beta", b, frozen=not fit_shape)
        store.add("translation", t)

        def loss(P):
            v = lbs(rig, P["beta"], P["gamma"], P["translation"]).vertices
            return ad.tsum((v - target) ** 2) * scale

        val, grads, _ = ad.value_and_grad(loss, store)
        gx = [grads["gamma"].ravel()]
        if fit_shape:
            gx.append(grads["beta"])
        gx.append(grads["translation"])
        return val, np.concatenate(gx)

    v0 = lbs(rig, np.zeros(nb), np.zeros((J, 3)), np.zeros(3)).vertices
    t0 = target.mean(0) - v0.mean(0)
    best = None
    for attempt in range(max_restarts + 1):
        g0 = np.zeros((J, 3)) if attempt == 0 else rng.normal(0.0, jitter, (J, 3))
        x0 = np.concatenate([g0.ravel(), np.zeros(nb if fit_shape else 0), t0])
        res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                                options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12})
        g, b, t = unpack(res.x)
        err = float(np.linalg.norm(lbs(rig, b, g, t).vertices - target, axis=1).mean())
        if best is None or err < best.mean_error:
            best = RigFit(g, b, t, err, attempt, err <= threshold)
        if err <= threshold:
            break
    if not best.ok:
        log.warning("rig fit: mean vertex error %.4f m above %.3f m after %d restarts",
                    best.mean_error, threshold, max_restarts)
    return best
