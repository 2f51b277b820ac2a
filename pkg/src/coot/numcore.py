"""Dense NumPy tensors with tape-based reverse-mode differentiation.

Only the operations the embedding model needs are provided. Every op checks
its forward value for NaN/Inf and records a closure that maps the output
gradient back to its parents. ``backward`` walks the graph in a deterministic
reverse topological order, so repeated runs accumulate gradients in the same
order and produce bit-identical results.

Storage defaults to float32. Ops preserve the dtype of their inputs, which lets
:func:`grad_check` re-run a whole computation in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
_reduce_sum = np.add.reduce

_grad_enabled = True
_finite_checks = True
# ops that only move values around cannot turn finite inputs non-finite
_SHAPE_OPS = frozenset({"reshape", "transpose", "swapaxes", "getitem", "take_rows", "concat", "stack"})


@contextlib.contextmanager
def unchecked():
    """Skip the per-op finite check inside the block; callers check the result themselves."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = False
    try:
        yield
    finally:
        _finite_checks = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-d array that optionally tracks how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if not np.isfinite(g).all():
                        raise FloatingPointError(f"non-finite gradient for {node.name or node}")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x``; floating arrays keep their precision, anything else becomes float32."""
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _const_like(x, ref: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _check_finite(arr: np.ndarray, op: str):
    # one reduction catches inf/nan cheaply; confirm elementwise on a hit
    if not math.isfinite(_reduce_sum(arr, axis=None)) and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if type(data) is not np.ndarray:
        data = np.asarray(data)
    if _finite_checks and op not in _SHAPE_OPS:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._parents = ()
    out._backward = None
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _make(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * pos,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return _make(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul width mismatch: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, np.argsort(axes)),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward, "getitem")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[index]`` along axis 0; repeated indices accumulate in order."""
    index = np.asarray(index, dtype=np.int64)
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / float(n))


def max_(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max along ``axis`` over positions where ``mask`` is true.

    The gradient flows to the first maximal position only.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("empty sequence")
        xd = np.where(mask, xd, -np.inf)
    arg = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out.astype(dtype), (x,), backward, "max")


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; masked-out positions get exactly zero weight."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("empty sequence")
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        n = xd.shape[-1]
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx.astype(xd.dtype),
                _unbroadcast(g * xhat, gain.shape),
                _unbroadcast(g, bias.shape))

    return _make(out.astype(xd.dtype), (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep.astype(x.dtype))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if (norm <= 0).any():
        raise ValueError("degenerate vector")
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), backward, "l2_normalize")


def cosine_distance(x, y) -> Tensor:
    """1 - x.y / (|x||y|) for two vectors."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("cosine_distance expects two vectors of equal length")
    return 1.0 - (l2_normalize(x) * l2_normalize(y)).sum()


def pairwise_cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosine distances between rows of ``a`` (N x d) and ``b`` (M x d)."""
    return 1.0 - l2_normalize(a) @ transpose(l2_normalize(b))


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out positions where ``mask`` is false (mask broadcasts over trailing dims)."""
    m = np.asarray(mask, dtype=x.dtype)
    while m.ndim < x.ndim:
        m = m[..., None]
    return x * Tensor(m)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    entries: list[GradCheckEntry] = field(repr=False)

    def worst(self, k: int = 10) -> list[GradCheckEntry]:
        return sorted(self.entries, key=lambda e: -e.rel_err)[:k]

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err <= tol


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3,
               dtype=np.float64, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar ``f()`` to central differences.

    ``f`` must be deterministic and read its parameters from ``params`` on every
    call. During the check every parameter is cast to ``dtype``; original values
    are restored afterwards.
    """
    params = list(params)
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(dtype)
            p.grad = None
        out = f()
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued computation")
        out.backward()
        analytic = []
        for p in params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {p.name}")
            analytic.append(np.array(g, dtype=np.float64))
            p.grad = None

        entries = []
        with no_grad(), unchecked():
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + h
                    fp = float(f().data)
                    flat[j] = orig - h
                    fm = float(f().data)
                    flat[j] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise FloatingPointError(f"non-finite loss perturbing {p.name}")
                    num = (fp - fm) / (2.0 * h)
                    a = float(ga.reshape(-1)[j])
                    idx = np.unravel_index(j, p.shape)
                    entries.append(GradCheckEntry(p.name or "?", tuple(int(i) for i in idx),
                                                  a, num, relative_error(a, num, floor)))
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
    worst = max((e.rel_err for e in entries), default=0.0)
    return GradCheckReport(worst, len(entries), entries)
