"""Minimal dense-tensor kernel with reverse-mode differentiation.

Everything is float64 and define-by-run: each op records its inputs and a
backward closure on the produced Tensor, so the tape is rebuilt every step
and variable-length sequences need no special casing. Storage and BLAS are
numpy; the tape, stop-gradient and the finite-difference oracle live here.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """An op produced NaN/Inf, which is an error state for this kernel."""


def _chk(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite result")
    return arr


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array plus its place on the autodiff tape.

    grad is accumulated during backward(); leaves that the loss never
    touches keep grad=None, which downstream code treats as zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), bwd: Callable | None = None):
        self.data = _chk(_as_array(data), op)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def const(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          bwd: Callable | None) -> Tensor:
    req = _needs(*parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents if req else (),
                  bwd=bwd if req else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise + broadcasting
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _chk(a.data / b.data, "div")

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, "div", (a, b), bwd)


def pow_const(a, p: float) -> Tensor:
    a = _t(a)
    out = _chk(a.data ** p, "pow")

    def bwd(g):
        _acc(a, g * p * a.data ** (p - 1))

    return _make(out, "pow", (a,), bwd)


def sqrt(a) -> Tensor:
    a = _t(a)
    out = _chk(np.sqrt(a.data), "sqrt")

    def bwd(g):
        _acc(a, g * 0.5 / out)

    return _make(out, "sqrt", (a,), bwd)


def exp(a) -> Tensor:
    a = _t(a)
    out = _chk(np.exp(a.data), "exp")

    def bwd(g):
        _acc(a, g * out)

    return _make(out, "exp", (a,), bwd)


def log(a) -> Tensor:
    a = _t(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _chk(np.log(a.data), "log")

    def bwd(g):
        _acc(a, g / a.data)

    return _make(out, "log", (a,), bwd)


def sin(a) -> Tensor:
    a = _t(a)
    out = np.sin(a.data)

    def bwd(g):
        _acc(a, g * np.cos(a.data))

    return _make(out, "sin", (a,), bwd)


def cos(a) -> Tensor:
    a = _t(a)
    out = np.cos(a.data)

    def bwd(g):
        _acc(a, g * -np.sin(a.data))

    return _make(out, "cos", (a,), bwd)


def abs_(a) -> Tensor:
    a = _t(a)
    out = np.abs(a.data)

    def bwd(g):
        _acc(a, g * np.sign(a.data))

    return _make(out, "abs", (a,), bwd)


def relu(a) -> Tensor:
    a = _t(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _acc(a, g * (a.data > 0.0))

    return _make(out, "relu", (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _t(a)
    # stable two-branch form
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), bwd)


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient flows where a > floor."""
    a = _t(a)
    out = np.maximum(a.data, floor)

    def bwd(g):
        _acc(a, g * (a.data > floor))

    return _make(out, "maximum", (a,), bwd)


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Data-dependent select with a constant 0/1 mask: mask*a + (1-mask)*b."""
    m = np.asarray(mask, dtype=np.float64)
    return add(mul(_t(a), m), mul(_t(b), 1.0 - m))


def stop_gradient(a) -> Tensor:
    """Identity forward; contributes zero gradient to its input."""
    a = _t(a)
    return _make(a.data, "stop_gradient", (a,), lambda g: None)


def passthrough(value, route) -> Tensor:
    """Forward `value` bitwise; backward routes the gradient to `route` as
    identity (the straight-through estimator's gradient rule)."""
    value, route = _t(value), _t(route)
    if value.data.shape != route.data.shape:
        raise ValueError(f"passthrough: shapes {value.shape} and {route.shape} differ")

    def bwd(g):
        _acc(route, g)

    return _make(value.data, "passthrough", (route,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(out, "reshape", (a,), bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _acc(a, np.transpose(g, inv))

    return _make(out, "transpose", (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_t(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)])

    return _make(out, "concat", tuple(parts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` extents from `start` along one axis."""
    a = _t(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ValueError(f"narrow: [{start}:{start + length}] out of range for "
                         f"axis {axis} of shape {a.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _acc(a, full)

    return _make(out, "narrow", (a,), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, "sum", (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int = 0) -> Tensor:
    a = _t(a)
    out = np.cumsum(a.data, axis=axis)

    def bwd(g):
        _acc(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    return _make(out, "cumsum", (a,), bwd)


def matmul(a, b) -> Tensor:
    """np.matmul semantics: [..., n, m] @ [..., m, k] with batch broadcasting."""
    a, b = _t(a), _t(b)
    try:
        out = _chk(np.matmul(a.data, b.data), "matmul")
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out, "matmul", (a, b), bwd)


def gather_rows(table, idx) -> Tensor:
    """Row lookup table[idx]: table [K, d], idx int array [...] -> [..., d]."""
    table = _t(table)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"gather_rows: index out of range [0, {table.data.shape[0]})")
    out = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _acc(table, gt)

    return _make(out, "gather_rows", (table,), bwd)


def take_diag(a) -> Tensor:
    """Diagonal of the trailing two axes: [..., n, n] -> [..., n]."""
    a = _t(a)
    out = np.diagonal(a.data, axis1=-2, axis2=-1).copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        n = a.data.shape[-1]
        ii = np.arange(n)
        full[..., ii, ii] = g
        _acc(a, full)

    return _make(out, "take_diag", (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family (max-subtraction stabilized)
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, out * (g - dot))

    return _make(out, "softmax", (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def bwd(g):
        soft = np.exp(out)
        _acc(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, "log_softmax", (a,), bwd)


# ---------------------------------------------------------------------------
# conv1d / transposed conv1d over time-major layouts [*, T, C]
# ---------------------------------------------------------------------------

def _promote3(x: np.ndarray):
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"conv1d: expected rank 2 or 3 input, got shape {x.shape}")


def conv1d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D convolution. x [*, T, Cin], w [k, Cin, Cout], out [*, T_out, Cout]
    with T_out = (T + 2*pad - k)//stride + 1.
    """
    x, w = _t(x), _t(w)
    xd, squeeze = _promote3(x.data)
    k, cin, cout = w.data.shape
    if xd.shape[-1] != cin:
        raise ValueError(f"conv1d: input channels {xd.shape[-1]} != weight Cin {cin}")
    B, T, _ = xd.shape
    t_out = (T + 2 * pad - k) // stride + 1
    if t_out < 1:
        raise ValueError(f"conv1d: length {T} too short for kernel {k} stride {stride} pad {pad}")
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0))) if pad else xd
    cols = np.empty((B, t_out, k, cin))
    for i in range(k):
        cols[:, :, i, :] = xp[:, i:i + t_out * stride:stride, :]
    w2 = w.data.reshape(k * cin, cout)
    out = cols.reshape(B, t_out, k * cin) @ w2
    if b is not None:
        b = _t(b)
        out = out + b.data
    out = _chk(out, "conv1d")
    if squeeze:
        out = out[0]

    def bwd(g):
        gg = g[None] if squeeze else g
        if w.requires_grad:
            gw = np.einsum("btkc,bto->kco", cols, gg)
            _acc(w, gw)
        if b is not None and b.requires_grad:
            _acc(b, gg.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = (gg @ w2.T).reshape(B, t_out, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i:i + t_out * stride:stride, :] += gcols[:, :, i, :]
            gx = gxp[:, pad:pad + T, :] if pad else gxp
            _acc(x, gx[0] if squeeze else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, "conv1d", parents, bwd)


def conv1d_transpose(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed 1-D convolution. x [*, T, Cin], w [k, Cin, Cout],
    out [*, T_out, Cout] with T_out = (T - 1)*stride - 2*pad + k.
    """
    x, w = _t(x), _t(w)
    xd, squeeze = _promote3(x.data)
    k, cin, cout = w.data.shape
    if xd.shape[-1] != cin:
        raise ValueError(f"conv1d_transpose: input channels {xd.shape[-1]} != weight Cin {cin}")
    B, T, _ = xd.shape
    t_full = (T - 1) * stride + k
    t_out = t_full - 2 * pad
    if t_out < 1:
        raise ValueError("conv1d_transpose: output length would be < 1")
    full = np.zeros((B, t_full, cout))
    for i in range(k):
        full[:, i:i + T * stride:stride, :] += xd @ w.data[i]
    out = full[:, pad:pad + t_out, :]
    if b is not None:
        b = _t(b)
        out = out + b.data
    out = _chk(out, "conv1d_transpose")
    if squeeze:
        out = out[0]

    def bwd(g):
        gg = g[None] if squeeze else g
        gfull = np.zeros((B, t_full, cout))
        gfull[:, pad:pad + t_out, :] = gg
        if b is not None and b.requires_grad:
            _acc(b, gg.sum(axis=(0, 1)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[i] = np.einsum("btc,bto->co", xd, gfull[:, i:i + T * stride:stride, :])
            _acc(w, gw)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for i in range(k):
                gx += gfull[:, i:i + T * stride:stride, :] @ w.data[i].T
            _acc(x, gx[0] if squeeze else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, "conv1d_transpose", parents, bwd)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _t(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gamma), beta)


def mse(a, b) -> Tensor:
    """Mean over all entries of the squared difference."""
    d = sub(_t(a), _t(b))
    return mean(mul(d, d))


def sq_norm_rows(a) -> Tensor:
    """Sum of squares over the last axis."""
    a = _t(a)
    return sum_(mul(a, a), axis=-1)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; fills .grad on reached leaves."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    # iterative topological order (graph is acyclic by construction)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def zero_grad(params) -> None:
    it = params.values() if isinstance(params, dict) else params
    for p in it:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, per coordinate."""
    if step <= 0:
        raise ValueError("finite_diff_grad: step must be > 0")
    x = _as_array(x)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_grad: non-finite evaluation")
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


# ---------------------------------------------------------------------------
# deterministic, splittable RNG
# ---------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream; split(label) derives an independent child stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, label) -> "Rng":
        h = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return Rng(int.from_bytes(h[:8], "little"))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def random(self) -> float:
        return float(self._gen.random())
