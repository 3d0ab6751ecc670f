"""Dense real tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :meth:`Tensor.backward`
walks the recorded graph once in reverse topological order.

Conventions:

* Broadcasting is only over size-1 axes between tensors of equal rank.
  Zero-dimensional tensors (and python scalars) broadcast against anything.
* Gradients of leaf tensors accumulate across ``backward`` calls; the
  optimizer is responsible for zeroing them.
* Every operation checks its output for NaN/Inf and raises
  :class:`NonFiniteError` instead of propagating silently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_FLOAT_TYPES = (np.float32, np.float64)

_grad_enabled = True
_mac_counter: list[int] | None = None


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of linear/matmul/conv ops executed inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    global _mac_counter
    prev = _mac_counter
    counter = [0]
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = prev


def _add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node.

        Without an explicit ``grad`` the tensor must hold a single element.
        Leaf gradients accumulate (``grad += new``) until zeroed.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=node.dtype, copy=True)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap the result of a primitive and register its backward rule.

    ``backward(g)`` returns one gradient (or None) per parent, each with the
    parent's shape.
    """
    check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = name
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def check_finite(data: np.ndarray, name: str) -> None:
    # NaN/Inf anywhere poisons the reduction, so one pass suffices
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(data, axis=None)
    if not np.isfinite(total):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{name} produced non-finite values")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    elif isinstance(b, Tensor):
        a = as_tensor(a, b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if len(sa) == 0:
        return sb
    if len(sb) == 0:
        return sa
    if len(sa) != len(sb):
        raise ValueError(f"cannot broadcast shapes {sa} and {sb}: rank differs")
    out = []
    for x, y in zip(sa, sb):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ValueError(f"cannot broadcast shapes {sa} and {sb}")
    return tuple(out)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(g, b.shape) if b.requires_grad else None)

    return apply_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g, a.shape) if a.requires_grad else None,
                unbroadcast(-g, b.shape) if b.requires_grad else None)

    return apply_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return apply_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        return (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return apply_op(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    p = a.dtype.type(p)
    out = a.data ** p
    return apply_op(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def tabs(a: Tensor) -> Tensor:
    return apply_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def hypot(a: Tensor, b: Tensor) -> Tensor:
    """sqrt(a^2 + b^2), with zero subgradient where both inputs vanish."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ValueError(f"hypot operands differ in shape: {a.shape} vs {b.shape}")
    out = np.hypot(a.data, b.data)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        scaled = np.where(out > 0, g / safe, 0)
        return (scaled * a.data if a.requires_grad else None,
                scaled * b.data if b.requires_grad else None)

    return apply_op(out, (a, b), bw, "hypot")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return apply_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "neg": neg,
    "exp": exp,
    "abs": tabs,
}


def elementwise(tag: str, a, b=None, c: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name; ``scale`` takes the python constant ``c``."""
    if tag == "scale":
        return scale(as_tensor(a), c)
    try:
        fn = ELEMENTWISE[tag]
    except KeyError:
        raise ValueError(f"unknown elementwise op {tag!r}") from None
    return fn(a, b) if b is not None else fn(a)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kshape), a.shape),)

    return apply_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return apply_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        z = np.zeros_like(a.data)
        if fancy:
            np.add.at(z, idx, g)  # repeated indices accumulate
        else:
            z[idx] = g
        return (z,)

    return apply_op(np.ascontiguousarray(out), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return apply_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def split(a: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    """Split into ``n`` equal parts along ``axis``."""
    ax = axis % a.ndim
    if a.shape[ax] % n:
        raise ValueError(f"axis of size {a.shape[ax]} not divisible by {n}")
    step = a.shape[ax] // n
    parts = []
    for i in range(n):
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(i * step, (i + 1) * step)
        parts.append(getitem(a, tuple(idx)))
    return parts


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; batch axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _add_macs(out.size * a.shape[-1])

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if x.dtype != w.dtype:
        raise TypeError(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    n_in, n_out = w.shape
    out = np.matmul(x.data, w.data)
    if b is not None:
        out += b.data
    _add_macs(out.size * n_in)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = np.matmul(g, w.data.T) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.matmul(x.data.reshape(-1, n_in).T, g.reshape(-1, n_out))
        if b is None:
            return gx, gw
        gb = g.reshape(-1, n_out).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return apply_op(out, parents, bw, "linear")


def softmax_lastaxis(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return apply_op(out, (a,), bw, "softmax")


LN_EPS = 1e-5


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, n_axes: int = 1) -> Tensor:
    """Normalize over the trailing ``n_axes`` axes, then apply ``gamma``/``beta``."""
    norm_shape = a.shape[a.ndim - n_axes:]
    if gamma.shape != norm_shape or beta.shape != norm_shape:
        raise ValueError(f"gamma/beta shape must be {norm_shape}, got {gamma.shape}/{beta.shape}")
    axes = tuple(range(a.ndim - n_axes, a.ndim))
    n = int(np.prod(norm_shape))
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(LN_EPS))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(a.ndim - n_axes))

    def bw(g):
        gx = None
        if a.requires_grad:
            gh = g * gamma.data
            s1 = gh.sum(axis=axes, keepdims=True)
            s2 = (gh * xhat).sum(axis=axes, keepdims=True)
            gx = (inv / n) * (n * gh - s1 - xhat * s2)
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return apply_op(out, (a, gamma, beta), bw, "layernorm")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    value, gate = split(a, 2, axis)
    return mul(value, sigmoid(gate))


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def conv1d_depthwise(a: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 'same' convolution (cross-correlation) of ``a`` (..., C, L) with ``kernel`` (C, k)."""
    c, k = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel size must be odd, got {k}")
    if a.shape[-2] != c:
        raise ValueError(f"channel mismatch: input {a.shape}, kernel {kernel.shape}")
    if a.dtype != kernel.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {kernel.dtype}")
    length = a.shape[-1]
    half = k // 2
    pad = [(0, 0)] * (a.ndim - 1) + [(half, half)]
    ap = np.pad(a.data, pad)
    w = kernel.data
    out = np.zeros_like(a.data)
    for j in range(k):
        out += w[:, j:j + 1] * ap[..., j:j + length]
    _add_macs(a.size * k)

    def bw(g):
        ga = gk = None
        if a.requires_grad:
            gp = np.zeros_like(ap)
            for j in range(k):
                gp[..., j:j + length] += w[:, j:j + 1] * g
            ga = gp[..., half:half + length]
        if kernel.requires_grad:
            g2 = g.reshape(-1, c, length)
            ap2 = ap.reshape(-1, c, ap.shape[-1])
            gk = np.empty_like(w)
            for j in range(k):
                gk[:, j] = np.einsum("ncl,ncl->c", g2, ap2[..., j:j + length])
        return ga, gk

    return apply_op(out, (a, kernel), bw, "conv1d_depthwise")


def conv2d(a: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """'Same' 2-D cross-correlation of ``a`` (..., Cin, T, F) with ``kernel`` (Cout, Cin, kt, kf)."""
    cout, cin, kt, kf = kernel.shape
    if kt % 2 == 0 or kf % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {(kt, kf)}")
    if a.ndim < 3 or a.shape[-3] != cin:
        raise ValueError(f"channel mismatch: input {a.shape}, kernel {kernel.shape}")
    if a.dtype != kernel.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {kernel.dtype}")
    lead = a.shape[:-3]
    t, f = a.shape[-2:]
    ht, hf = kt // 2, kf // 2
    x = a.data.reshape((-1, cin, t, f))
    nb = x.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (ht, ht), (hf, hf)))
    # cols: (B, Cin, kt, kf, T, F) -> (B, Cin*kt*kf, T*F)
    cols = np.empty((nb, cin, kt, kf, t, f), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            cols[:, :, i, j] = xp[:, :, i:i + t, j:j + f]
    cols = cols.reshape(nb, cin * kt * kf, t * f)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    _add_macs(out.size * cin * kt * kf)
    out = out.reshape(lead + (cout, t, f))
    parents = (a, kernel) if bias is None else (a, kernel, bias)

    def bw(g):
        g2 = g.reshape(nb, cout, t * f)
        ga = gk = None
        if a.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(nb, cin, kt, kf, t, f)
            gp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gp[:, :, i:i + t, j:j + f] += gcols[:, :, i, j]
            ga = gp[:, :, ht:ht + t, hf:hf + f].reshape(a.shape)
        if kernel.requires_grad:
            gk = np.einsum("bos,bks->ok", g2, cols).reshape(kernel.shape)
        if bias is None:
            return ga, gk
        gb = g2.sum(axis=(0, 2)) if bias.requires_grad else None
        return ga, gk, gb

    return apply_op(out, parents, bw, "conv2d")


def pool_avg(a: Tensor, factor: int, axis: int) -> Tensor:
    """Mean over non-overlapping windows of ``factor``; the tail is edge-padded first."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return a
    ax = axis % a.ndim
    n = a.shape[ax]
    n_out = -(-n // factor)
    padn = n_out * factor - n
    x = a.data
    if padn:
        pad = [(0, 0)] * a.ndim
        pad[ax] = (0, padn)
        x = np.pad(x, pad, mode="edge")
    shp = a.shape[:ax] + (n_out, factor) + a.shape[ax + 1:]
    out = x.reshape(shp).mean(axis=ax + 1)

    def bw(g):
        gx = np.repeat(g / factor, factor, axis=ax)
        if padn:
            head = [slice(None)] * a.ndim
            head[ax] = slice(0, n)
            tail = [slice(None)] * a.ndim
            tail[ax] = slice(n, n + padn)
            last = [slice(None)] * a.ndim
            last[ax] = slice(n - 1, n)
            extra = gx[tuple(tail)].sum(axis=ax, keepdims=True)
            gx = gx[tuple(head)].copy()
            gx[tuple(last)] += extra
        return (gx,)

    return apply_op(out, (a,), bw, "pool_avg")


def upsample_repeat(a: Tensor, factor: int, axis: int, length: int | None = None) -> Tensor:
    """Repeat each element ``factor`` times along ``axis`` and truncate to ``length``."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    ax = axis % a.ndim
    n = a.shape[ax]
    length = n * factor if length is None else length
    if length > n * factor:
        raise ValueError(f"cannot upsample {n} x{factor} to {length}")
    if factor == 1 and length == n:
        return a
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(0, length)
    out = np.repeat(a.data, factor, axis=ax)[tuple(idx)]

    def bw(g):
        padn = n * factor - length
        if padn:
            pad = [(0, 0)] * a.ndim
            pad[ax] = (0, padn)
            g = np.pad(g, pad)
        shp = a.shape[:ax] + (n, factor) + a.shape[ax + 1:]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return apply_op(np.ascontiguousarray(out), (a,), bw, "upsample_repeat")
