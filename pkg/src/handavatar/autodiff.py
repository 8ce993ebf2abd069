"""Reverse-mode differentiation on a tape of coarse numpy primitives.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
on tensors that depend on a parameter are appended to the active
:class:`Tape` in creation order, which is a valid topological order; the
backward pass walks that list in reverse. Constants (tensors that do not
depend on any parameter) are never recorded.

Accumulation into shared inputs (gathers, texture samples) goes through
``np.bincount`` or ``np.add.at``, both of which reduce in index order, so a
backward pass is bit-reproducible.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a forward value contains NaN or Inf."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "op", "node_id", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor's reflected op

    def __init__(self, value, parents=(), backward_fn=None, op="const", name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.node_id = -1
        self.requires_grad = False
        self.name = name

    # numpy-ish conveniences
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _node(val, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(val, op=op)
    if any(p.requires_grad for p in parents):
        tape = active_tape()
        if tape is None:
            raise RuntimeError("differentiable op outside of an active Tape")
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.requires_grad = True
        tape._record(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return _node(av * bv, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def power(a, k: float) -> Tensor:
    a = const(a)
    av = a.value
    if k == 2:
        return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")
    return _node(av ** k, (a,), lambda g: (g * k * av ** (k - 1),), f"pow{k}")


def exp(a) -> Tensor:
    a = const(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = const(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a) -> Tensor:
    a = const(a)
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tabs(a) -> Tensor:
    a = const(a)
    av = a.value
    return _node(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def sin(a) -> Tensor:
    a = const(a)
    av = a.value
    return _node(np.sin(av), (a,), lambda g: (g * np.cos(av),), "sin")


def cos(a) -> Tensor:
    a = const(a)
    av = a.value
    return _node(np.cos(av), (a,), lambda g: (-g * np.sin(av),), "cos")


def tan(a) -> Tensor:
    a = const(a)
    out = np.tan(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 + out * out),), "tan")


def arcsin(a) -> Tensor:
    a = const(a)
    av = a.value
    return _node(np.arcsin(av), (a,), lambda g: (g / np.sqrt(1.0 - av * av),), "arcsin")


def sigmoid(a) -> Tensor:
    a = const(a)
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; the adjoint is zero wherever the clip is active."""
    a = const(a)
    av = a.value
    out = np.clip(av, lo, hi)
    inside = np.ones(av.shape, dtype=bool)
    if lo is not None:
        inside &= av >= lo
    if hi is not None:
        inside &= av <= hi
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a) -> Tensor:
    return clamp(a, 0.0, None)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), sa) if a.requires_grad else None,
                _unbroadcast(np.where(cond, 0.0, g), sb) if b.requires_grad else None)

    return _node(np.where(cond, a.value, b.value), (a, b), bw, "where")


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = const(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = const(a)
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / max(n, 1))


def amax(a, axis=None) -> Tensor:
    """Maximum; the adjoint goes to the first arg-max entry only."""
    a = const(a)
    av = a.value
    if axis is None:
        k = int(np.argmax(av))

        def bw(g):
            out = np.zeros(av.size)
            out[k] = g
            return (out.reshape(av.shape),)

        return _node(av.reshape(-1)[k], (a,), bw, "max")
    idx = np.expand_dims(np.argmax(av, axis=axis), axis)

    def bw(g):
        out = np.zeros_like(av)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis)
        return (out,)

    return _node(np.take_along_axis(av, idx, axis).squeeze(axis), (a,), bw, "max")


def reshape(a, shape) -> Tensor:
    a = const(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = const(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = const(a)
    shape = a.shape
    if isinstance(idx, np.ndarray) and idx.dtype.kind in "iu":
        return gather_rows(a, idx)

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), bw, "getitem")


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """``a[idx]`` for an integer array along axis 0 (any idx shape)."""
    a = const(a)
    shape = a.shape
    flat = idx.reshape(-1)

    def bw(g):
        g2 = g.reshape(flat.size, -1)
        cols = g2.shape[1]
        out = np.empty((shape[0], cols))
        for c in range(cols):
            out[:, c] = np.bincount(flat, weights=g2[:, c], minlength=shape[0])
        return (out.reshape(shape),)

    return _node(a.value[idx], (a,), bw, "gather")


def scatter_rows(values, idx: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``values`` into ``n`` output rows: ``out[idx[i]] += values[i]``."""
    values = const(values)
    v = values.value
    flat = idx.reshape(-1)
    v2 = v.reshape(flat.size, -1)
    out = np.empty((n, v2.shape[1]))
    for c in range(v2.shape[1]):
        out[:, c] = np.bincount(flat, weights=v2[:, c], minlength=n)
    out = out.reshape((n,) + v.shape[idx.ndim:])
    return _node(out, (values,), lambda g: (g[idx],), "scatter")


def put(base, flat_idx: np.ndarray, values) -> Tensor:
    """Copy of constant-or-tensor ``base`` with ``base.flat[flat_idx] = values``."""
    base, values = const(base), const(values)
    out = base.value.copy()
    out.reshape(-1)[flat_idx] = values.value.reshape(-1)
    vshape, bshape = values.shape, base.shape

    def bw(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb.reshape(-1)[flat_idx] = 0.0
            gb = gb.reshape(bshape)
        return gb, g.reshape(-1)[flat_idx].reshape(vshape)

    return _node(out, (base, values), bw, "put")


def stack(items, axis=0) -> Tensor:
    items = [const(x) for x in items]
    out = np.stack([x.value for x in items], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _node(out, tuple(items), bw, "stack")


def concatenate(items, axis=0) -> Tensor:
    items = [const(x) for x in items]
    sizes = [x.shape[axis] for x in items]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in items], axis=axis)
    return _node(out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def bw(g):
        ga = gb = None
        if bv.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * bv
            if b.requires_grad:
                gb = np.einsum("...ij,...i->j", av, g)
            return ga, gb
        if av.ndim == 1:  # (n,) @ (n, m)
            if a.requires_grad:
                ga = bv @ g
            if b.requires_grad:
                gb = np.outer(av, g)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _node(av @ bv, (a, b), bw, "matmul")


def sparse_matmul(S, x) -> Tensor:
    """``S @ x`` for a scipy sparse matrix ``S`` (constant)."""
    x = const(x)
    St = S.T.tocsr()
    return _node(S @ x.value, (x,), lambda g: (St @ g,), "spmm")


def sandwich(x, A: np.ndarray, B: np.ndarray) -> Tensor:
    """Per-channel ``A @ x[:, :, c] @ B.T`` for an (H, W, C) image."""
    x = const(x)
    out = np.einsum("ih,hwc,jw->ijc", A, x.value, B, optimize=True)
    return _node(out, (x,), lambda g: (np.einsum("ih,ijc,jw->hwc", A, g, B, optimize=True),), "sandwich")


def dot(a, b, keepdims=False) -> Tensor:
    return tsum(mul(a, b), axis=-1, keepdims=keepdims)


def cross(a, b) -> Tensor:
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def bw(g):
        return (_unbroadcast(np.cross(bv, g), av.shape) if a.requires_grad else None,
                _unbroadcast(np.cross(g, av), bv.shape) if b.requires_grad else None)

    return _node(np.cross(av, bv), (a, b), bw, "cross")


def norm(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm over the last axis, ``sqrt(|a|^2 + eps)``."""
    a = const(a)
    av = a.value
    n = np.sqrt((av * av).sum(-1) + eps)

    def bw(g):
        return ((g / np.where(n > 0, n, 1.0))[..., None] * av,)

    return _node(n, (a,), bw, "norm")


def normalize(a, eps: float = 1e-20) -> Tensor:
    """Unit vectors over the last axis."""
    a = const(a)
    av = a.value
    n = np.sqrt((av * av).sum(-1, keepdims=True) + eps)
    u = av / n

    def bw(g):
        return ((g - u * (g * u).sum(-1, keepdims=True)) / n,)

    return _node(u, (a,), bw, "normalize")


def _skew(v):
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


_SKEW_BASIS = _skew(np.eye(3))  # (3, 3, 3): _SKEW_BASIS[i] = [e_i]x


def rodrigues(r) -> Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses ``R = I + A K + B K^2`` with ``K = [r]x``, ``A = sin t / t`` and
    ``B = (1 - cos t) / t^2``; series expansions near ``t = 0`` keep both the
    value and the adjoint smooth at the identity.
    """
    r = const(r)
    rv = r.value
    t2 = (rv * rv).sum(-1)
    t = np.sqrt(t2)
    small = t < 1e-4
    ts = np.where(small, 1.0, t)
    A = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(ts) / ts)
    B = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(ts)) / ts ** 2)
    # dA/dt / t and dB/dt / t
    dA = np.where(small, -1 / 3 + t2 / 30, (ts * np.cos(ts) - np.sin(ts)) / ts ** 3)
    dB = np.where(small, -1 / 12 + t2 / 180, (ts * np.sin(ts) - 2 * (1 - np.cos(ts))) / ts ** 4)
    K = _skew(rv)
    K2 = K @ K
    R = np.eye(3) + A[..., None, None] * K + B[..., None, None] * K2

    def bw(g):
        out = np.empty(rv.shape)
        for i in range(3):
            Ei = _SKEW_BASIS[i]
            dR = (A[..., None, None] * Ei
                  + B[..., None, None] * (Ei @ K + K @ Ei)
                  + (dA * rv[..., i])[..., None, None] * K
                  + (dB * rv[..., i])[..., None, None] * K2)
            out[..., i] = (g * dR).sum((-1, -2))
        return (out,)

    return _node(R, (r,), bw, "rodrigues")


def bilinear_sample(tex, uv) -> Tensor:
    """Bilinearly sample an (H, W, C) texture at (N, 2) UV coordinates.

    ``u`` runs along columns and ``v`` upward (row 0 is ``v = 1``); texel
    centres sit at half-integer positions. Lookups clamp to the border.
    """
    tex, uv = const(tex), const(uv)
    T = tex.value
    H, W, C = T.shape
    u = uv.value[:, 0]
    v = uv.value[:, 1]
    x = np.clip(u * W - 0.5, 0.0, W - 1.0)
    y = np.clip((1.0 - v) * H - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    t00, t01, t10, t11 = T[y0, x0], T[y0, x1], T[y1, x0], T[y1, x1]
    top = t00 + fx * (t01 - t00)
    bot = t10 + fx * (t11 - t10)
    out = top + fy * (bot - top)
    # clamped coordinates carry no UV gradient
    ux = ((u * W - 0.5 >= 0) & (u * W - 0.5 <= W - 1)).astype(float) * W
    vy = ((((1.0 - v) * H - 0.5) >= 0) & (((1.0 - v) * H - 0.5) <= H - 1)).astype(float) * -H

    def bw(g):
        gt = guv = None
        if tex.requires_grad:
            w00 = (1 - fx) * (1 - fy)
            w01 = fx * (1 - fy)
            w10 = (1 - fx) * fy
            w11 = fx * fy
            idx = np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
            wg = np.concatenate([w00 * g, w01 * g, w10 * g, w11 * g])
            gt = np.empty((H * W, C))
            for c in range(C):
                gt[:, c] = np.bincount(idx, weights=wg[:, c], minlength=H * W)
            gt = gt.reshape(H, W, C)
        if uv.requires_grad:
            dfx = (1 - fy) * (t01 - t00) + fy * (t11 - t10)
            dfy = bot - top
            guv = np.stack([(g * dfx).sum(-1) * ux, (g * dfy).sum(-1) * vy], -1)
        return gt, guv

    return _node(out, (tex, uv), bw, "bilinear")


# ---------------------------------------------------------------- tape, params


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}
        self.loss: Tensor | None = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _record(self, t: Tensor):
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def param(self, name: str, val, frozen: bool = False) -> Tensor:
        t = Tensor(val, op="param", name=name)
        if not frozen:
            t.requires_grad = True
            self._record(t)
        self.leaves[name] = t
        return t

    def __len__(self):
        return len(self.nodes)

    def first_nonfinite(self) -> Tensor | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.value)):
                return node
        return None


def grad(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Adjoints of ``root`` with respect to every recorded node, keyed by node id."""
    adj: dict[int, np.ndarray] = {}
    if not root.requires_grad:
        return adj
    adj[root.node_id] = np.ones(root.shape)
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        g = adj.pop(node.node_id, None)
        if g is None:
            continue
        if node.op == "param":
            leaves[node.node_id] = g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = adj.get(p.node_id)
            adj[p.node_id] = pg if prev is None else prev + pg
    return leaves


@dataclass
class Param:
    value: np.ndarray
    frozen: bool = False
    kind: str = "geometry"  # which optimizer owns the group


@dataclass
class ParamStore:
    """Named parameter groups, each a float64 array."""

    groups: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, val, frozen: bool = False, kind: str = "geometry"):
        if name in self.groups:
            raise KeyError(f"duplicate parameter group {name!r}")
        self.groups[name] = Param(np.array(val, dtype=np.float64), frozen, kind)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.groups[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def names(self, kind: str | None = None) -> list[str]:
        return [n for n, p in self.groups.items() if kind is None or p.kind == kind]

    def freeze(self, names, frozen: bool = True):
        for n in names:
            self.groups[n].frozen = frozen

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.groups.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for n, v in snap.items():
            self.groups[n].value = v.copy()

    def copy(self) -> "ParamStore":
        return ParamStore({n: Param(p.value.copy(), p.frozen, p.kind) for n, p in self.groups.items()})


class LeafView(dict):
    """Mapping of group name to leaf tensor; records which groups were read."""

    def __init__(self, tape: Tape, store: ParamStore):
        super().__init__()
        self._tape = tape
        self._store = store
        self.used: set[str] = set()

    def __missing__(self, name):
        p = self._store.groups[name]
        t = self._tape.param(name, p.value, frozen=p.frozen)
        self[name] = t
        return t

    def __getitem__(self, name):
        self.used.add(name)
        return super().__getitem__(name)


def forward(builder: Callable[[LeafView], Tensor], store: ParamStore) -> tuple[float, Tape]:
    """Evaluate ``builder`` on leaf tensors for ``store``; returns (loss, tape).

    Parameter leaves are created lazily, so groups the builder never reads are
    absent from the tape.
    """
    with Tape() as tape:
        leaves = LeafView(tape, store)
        loss = builder(leaves)
    loss = const(loss)
    tape.loss = loss
    tape.used = leaves.used
    val = float(np.asarray(loss.value).reshape(-1)[0]) if loss.value.size == 1 else np.nan
    if not np.isfinite(val):
        bad = tape.first_nonfinite()
        if bad is not None:
            raise NonFiniteError(bad.node_id, bad.op)
        raise NonFiniteError(-1, loss.op)
    return val, tape


def backward(tape: Tape, store: ParamStore) -> dict[str, np.ndarray]:
    """Adjoints for every group of ``store``; frozen or unused groups get zeros."""
    out = {n: np.zeros_like(p.value) for n, p in store.groups.items()}
    if tape.loss is None or not tape.loss.requires_grad:
        return out
    by_id = grad(tape, tape.loss)
    for name, leaf in tape.leaves.items():
        if leaf.requires_grad and leaf.node_id in by_id:
            out[name] = by_id[leaf.node_id].reshape(out[name].shape)
    return out


def value_and_grad(builder, store: ParamStore):
    val, tape = forward(builder, store)
    return val, backward(tape, store), tape


# ---------------------------------------------------------------- finite differences


@dataclass
class GradCheckEntry:
    group: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    flagged: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    def _errors(self):
        return np.array([e.rel_error for e in self.entries if not e.flagged])

    @property
    def max_rel(self) -> float:
        e = self._errors()
        return float(e.max()) if e.size else 0.0

    @property
    def p95_rel(self) -> float:
        e = self._errors()
        return float(np.percentile(e, 95)) if e.size else 0.0

    @property
    def n_flagged(self) -> int:
        return sum(e.flagged for e in self.entries)

    def by_group(self) -> dict[str, tuple[int, int, float]]:
        """group -> (checked, flagged, max rel error among checked)."""
        out = {}
        for e in self.entries:
            n, f, m = out.get(e.group, (0, 0, 0.0))
            out[e.group] = (n + 1, f + e.flagged, m if e.flagged else max(m, e.rel_error))
        return out

    def passed(self, p95: float, max_rel: float) -> bool:
        return self.p95_rel < p95 and self.max_rel < max_rel


def sample_coords(store: ParamStore, n: int, rng: np.random.Generator,
                  groups: Sequence[str] | None = None) -> list[tuple[str, int]]:
    """Spread ``n`` random coordinates evenly over the (unfrozen) groups.

    Within a group coordinates are distinct while the group has room.
    """
    names = [g for g in (groups or store.names()) if not store.groups[g].frozen]
    counts = {g: n // len(names) + (k < n % len(names)) for k, g in enumerate(names)}
    coords = []
    for g in names:
        size = store[g].size
        c = counts[g]
        idx = rng.choice(size, c, replace=c > size)
        coords += [(g, int(i)) for i in idx]
    return coords


def finite_diff_check(loss_fn: Callable[[LeafView], Tensor], store: ParamStore,
                      coords: Sequence[tuple[str, int]], h: float = 1e-5,
                      floor: float = 1e-6, kink_tol: float = 0.1,
                      jump_tol: float = 1e-3) -> GradCheckReport:
    """Compare tape adjoints against central differences.

    A coordinate is flagged as straddling a discontinuity when its one-sided
    differences disagree (a kink such as an active clamp boundary) or when the
    central differences at ``h`` and ``h/2`` disagree (a jump, e.g. a pixel
    changing face). Flagged coordinates are reported but excluded from
    :attr:`GradCheckReport.max_rel` / :attr:`GradCheckReport.p95_rel`.
    """
    f0, grads, _ = value_and_grad(loss_fn, store)
    entries = []
    for group, i in coords:
        arr = store.groups[group].value
        flat = arr.reshape(-1)
        x0 = flat[i]

        def at(delta):
            flat[i] = x0 + delta
            try:
                return forward(loss_fn, store)[0]
            finally:
                flat[i] = x0

        fp, fm = at(h), at(-h)
        fp2, fm2 = at(h / 2), at(-h / 2)
        c1 = (fp - fm) / (2 * h)
        c2 = (fp2 - fm2) / h
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        a = float(grads[group].reshape(-1)[i])
        scale = max(abs(fwd), abs(bwd), floor)
        kink = abs(fwd - bwd) > kink_tol * scale
        jump = abs(c1 - c2) > jump_tol * max(abs(c1), abs(c2), floor)
        rel = abs(a - c1) / max(abs(a), abs(c1), floor)
        entries.append(GradCheckEntry(group, i, a, c1, rel, bool(kink or jump)))
    return GradCheckReport(entries)
