"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy float array. Operations executed while the
inputs are attached to a Tape are recorded; ``backward`` replays the records
in reverse to accumulate adjoints. Training runs in float32; gradient checks
rebuild the same graph in float64 (see gradcheck module).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on tape misuse (double backward, mixed tapes, non-scalar loss)."""


# Debug hook for the gradient-check suite: mapping op-name -> scale applied to
# that op's recorded adjoints. Lets the checker prove it detects a broken rule.
_ADJOINT_SCALE: dict[str, float] = {}


class Tape:
    """Ordered record of primitive applications for one reverse pass."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._n_nodes = 0
        self._consumed = False

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def watch(self, t: "Tensor") -> "Tensor":
        """Attach a tensor as a differentiable leaf of this tape."""
        if t.tape is self:
            return t
        if t.tape is not None:
            raise TapeError("tensor is already attached to a different tape")
        return Tensor(t.data, tape=self, node=self._new_node())

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """Immutable-shape dense array, optionally attached to a Tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        if self.tape is not None:
            raise TapeError("astype on attached tensor is not differentiable")
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _coerce_pair(a, b, broadcast: bool = True) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}; cast explicitly"
        )
    if broadcast:
        for da, db in zip(reversed(a.shape), reversed(b.shape)):
            if da != db and da != 1 and db != 1:
                raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")
    return a, b


def _find_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands attached to different tapes")
    return tape


def _attach(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap op output; record the adjoint rule if any input is on a tape."""
    tape = _find_tape(inputs)
    if tape is None:
        return Tensor(out_data)
    if tape._consumed:
        raise TapeError("tape already ran backward; start a new tape")
    scale = _ADJOINT_SCALE.get(name)
    if scale is not None:
        inner = bwd

        def bwd(g, _inner=inner, _s=scale):
            return tuple(None if gi is None else gi * _s for gi in _inner(g))

    node = tape._new_node()
    in_nodes = tuple(t.node for t in inputs)
    tape._records.append((node, in_nodes, bwd))
    return Tensor(out_data, tape=tape, node=node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient contributions back down to the pre-broadcast shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Gradients:
    """Result of a backward pass: adjoints addressable by tensor."""

    def __init__(self, tape: Tape, adjoints: dict[int, np.ndarray]):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            raise TapeError("tensor is not attached to the tape that was differentiated")
        g = self._adjoints.get(t.node)
        if g is None:
            return np.zeros_like(t.data)
        return g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Accumulate adjoints of ``loss`` for every node on ``tape``.

    Forward values are never mutated; accumulation is out-of-place. A tape
    can only be differentiated once.
    """
    if loss.tape is not tape or loss.node is None:
        raise TapeError("loss is not attached to this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("backward called twice on one tape")
    tape._consumed = True

    adjoints: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for out_node, in_nodes, bwd in reversed(tape._records):
        g = adjoints.get(out_node)
        if g is None:
            continue
        grads = bwd(g)
        for nid, gi in zip(in_nodes, grads):
            if nid is None or gi is None:
                continue
            acc = adjoints.get(nid)
            # out-of-place: bwd results may alias forward/adjoint buffers
            adjoints[nid] = gi if acc is None else acc + gi
    return Gradients(tape, adjoints)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _attach("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _attach("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _attach("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _attach("div", out, (a, b), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # stable two-sided form; exp only of non-positive arguments
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    y = y.astype(xd.dtype, copy=False)

    def bwd(g):
        return (g * (y * (1.0 - y)),)

    return _attach("sigmoid", y, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, x.data * x.data.dtype.type(slope))

    def bwd(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _attach("leaky_relu", y, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        return (g * y,)

    return _attach("exp", y, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def bwd(g):
        return (g * (0.5 / y),)

    return _attach("sqrt", y, (x,), bwd)


# ---------------------------------------------------------------------------
# contractions and normalizations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b, broadcast=False)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _attach("matmul", out, (a, b), bwd)


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 3D cross-correlation of [D,H,W,Cin] with [k,k,k,Cin,Cout]."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 5 or x.ndim != 4:
        raise ShapeError(f"conv3d expects 4-d input and 5-d kernel, got {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[1] != k or kernel.shape[2] != k or k % 2 == 0:
        raise ShapeError(f"kernel must be cubic with odd size, got {kernel.shape}")
    cin, cout = kernel.shape[3], kernel.shape[4]
    if x.shape[3] != cin:
        raise ShapeError(f"input channels {x.shape[3]} != kernel channels {cin}")
    out_dims = tuple((d + 2 * padding - k) // stride + 1 for d in x.shape[:3])
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d output dims {out_dims} degenerate for input {x.shape}")

    p = padding
    xp = np.pad(x.data, ((p, p), (p, p), (p, p), (0, 0))) if p else x.data
    do_, ho, wo = out_dims
    kd = kernel.data
    out2 = np.zeros((do_ * ho * wo, cout), dtype=x.data.dtype)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                patch = xp[dz:dz + stride * do_:stride,
                           dy:dy + stride * ho:stride,
                           dx:dx + stride * wo:stride, :]
                out2 += patch.reshape(-1, cin) @ kd[dz, dy, dx]
    out = out2.reshape(do_, ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gk = np.zeros_like(kd)
        gxp = np.zeros_like(xp)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    sl = (slice(dz, dz + stride * do_, stride),
                          slice(dy, dy + stride * ho, stride),
                          slice(dx, dx + stride * wo, stride), slice(None))
                    patch = xp[sl]
                    gk[dz, dy, dx] = patch.reshape(-1, cin).T @ g2
                    gxp[sl] += (g2 @ kd[dz, dy, dx].T).reshape(do_, ho, wo, cin)
        gx = gxp[p:gxp.shape[0] - p, p:gxp.shape[1] - p, p:gxp.shape[2] - p, :] if p else gxp
        return gx, gk

    return _attach("conv3d", out, (x, kernel), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last (channel) axis to zero mean / unit variance, then affine."""
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over zero-length channel axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0).reshape(gamma.shape)
        gbeta = g.reshape(-1, n).sum(axis=0).reshape(beta.shape)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _attach("layer_norm", out, (x, gamma, beta), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _attach("softmax", y, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return axes


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    if not axes:  # mean over no axes is the identity
        return reshape(x, x.shape)
    for a in axes:
        if x.shape[a] == 0:
            raise ShapeError(f"cannot reduce zero-length axis {a} of {x.shape}")
    out = x.data.mean(axis=axes)
    count = math.prod(x.shape[a] for a in axes)
    kshape = tuple(1 if a in axes else s for a, s in enumerate(x.shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape), x.shape) / x.data.dtype.type(count),)

    return _attach("reduce_mean", out, (x,), bwd)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        return reshape(x, x.shape)
    out = x.data.sum(axis=axes)
    kshape = tuple(1 if a in axes else s for a, s in enumerate(x.shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(kshape), x.shape).copy(),)

    return _attach("reduce_sum", out, (x,), bwd)


# ---------------------------------------------------------------------------
# data movement
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    out = x.data.reshape(shape)
    xshape = x.shape

    def bwd(g):
        return (g.reshape(xshape),)

    return _attach("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _attach("transpose", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _attach("concat", out, tensors, bwd)


def slice_(x: Tensor, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > x.ndim:
        raise ShapeError(f"slice key of length {len(key)} for rank {x.ndim}")
    for k in key:
        if not isinstance(k, slice):
            raise ShapeError("only slice indexing is supported on tensors")
    out = np.ascontiguousarray(x.data[key])
    xshape = x.shape

    def bwd(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _attach("slice", out, (x,), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    xshape = x.shape

    def bwd(g):
        return (_unbroadcast(g, xshape),)

    return _attach("broadcast_to", out, (x,), bwd)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Toroidal roll; adjoint is the inverse roll."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    out = np.roll(x.data, shifts, axis=axes)
    inv = tuple(-s for s in shifts)

    def bwd(g):
        return (np.roll(g, inv, axis=axes),)

    return _attach("roll", out, (x,), bwd)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by an integer index array; adjoint scatter-adds."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"take index out of range for table of {table.shape[0]} rows")
    out = table.data[index]
    tshape = table.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, index, g)
        return (gt,)

    return _attach("take", out, (table,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.step + 1
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        upd = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
        new_params[name] = Tensor(upd)
        new_m[name] = m.astype(p.data.dtype, copy=False)
        new_v[name] = v.astype(p.data.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, t)
