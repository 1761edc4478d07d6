"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable operation takes and returns :class:`Tensor` objects and
records a closure that maps the output gradient onto its inputs.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients additively.

Compute runs in 32-bit floats by default.  ``set_precision("float64")`` (or
the :func:`precision` context manager) switches newly created tensors to
64-bit, which is what the finite-difference checks use.
"""
from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "set_precision", "get_dtype", "precision",
    "no_grad", "is_grad_enabled", "from_op", "parameter", "constant",
    "matmul", "linear", "add", "sub", "mul", "scale", "mul_const", "add_const",
    "reshape", "transpose", "broadcast_to", "concat", "take", "getitem",
    "softmax", "layer_norm", "gelu", "tsum", "mean", "mean_sq", "cross_entropy",
    "attention", "ParamStore", "MacCounter", "count_macs", "mac_scope", "grad_check", "GradCheckReport",
]

GELU_C = 0.7978845608
GELU_A = 0.044715
LN_EPS = 1e-5

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in values or gradients."""


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the working precision."""
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Intermediate gradients are released once consumed; leaves keep theirs.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            node.grad = None
        for node in order:
            if node._backward is None and node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NonFiniteError(f"non-finite gradient reached leaf {node.name or node.shape}")

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _contig(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d input to shape (1,)
    return np.ascontiguousarray(a).reshape(np.shape(a))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    t.grad = g if t.grad is None else t.grad + g


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a forward result and its backward closure as a graph node.

    ``backward`` receives the output gradient and must call ``accumulate`` on
    the parents (exposed as :func:`_accum`) itself.  Public so that custom
    operations can be added without touching this module.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _dtype else data.astype(_dtype)
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


accumulate = _accum


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# --------------------------------------------------------------------------
# multiply-accumulate instrumentation


@dataclass
class MacCounter:
    """Tallies multiply-accumulates per (scope, kind)."""

    counts: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, kind: str, macs: int) -> None:
        self.counts[("/".join(_scope_stack), kind)] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_counter: MacCounter | None = None
_scope_stack: list[str] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    global _counter
    old = _counter
    _counter = MacCounter()
    try:
        yield _counter
    finally:
        _counter = old


@contextlib.contextmanager
def mac_scope(name: str) -> Iterator[None]:
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


def _record(kind: str, macs: int) -> None:
    if _counter is not None:
        _counter.add(kind, macs)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _record("matmul", out.size * a.shape[-1])

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(ad, -1, -2) @ g)

    return from_op(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ w + b``."""
    cin = x.shape[-1]
    if w.ndim != 2 or w.shape[0] != cin or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {None if b is None else b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    _record("linear", x2.shape[0] * cin * w.shape[1])
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, _col_sum(g2))

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, backward)


# --------------------------------------------------------------------------
# elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (reshape or broadcast_to explicitly)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return from_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return from_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g * bd)
        if b.requires_grad:
            _accum(b, g * ad)

    return from_op(ad * bd, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return from_op(a.data * s, (a,), lambda g: _accum(a, g * s))


def add_const(a: Tensor, c) -> Tensor:
    return from_op(a.data + c, (a,), lambda g: _accum(a, g))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable array (masks, keep factors).

    ``c`` may carry size-1 axes that broadcast against ``a``; the result keeps
    ``a``'s shape.
    """
    c = np.asarray(c, dtype=a.data.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"mul_const: constant {c.shape} does not broadcast into {a.shape}")
    return from_op(a.data * c, (a,), lambda g: _accum(a, g * c))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * (GELU_C * (1.0 + 3.0 * GELU_A * x2))
        dt *= 0.5 * xd
        dt += 0.5 * (1.0 + t)
        _accum(x, g * dt)

    return from_op(out, (x,), backward)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    src = x.shape
    return from_op(out, (x,), lambda g: _accum(x, g.reshape(src)))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return from_op(_contig(x.data.transpose(axes)), (x,),
                   lambda g: _accum(x, _contig(g.transpose(inv))))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicitly expand leading (or size-1) axes; the gradient is summed back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    keep = tuple(i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        r = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            r = r.sum(axis=keep, keepdims=True)
        _accum(x, _contig(r))

    return from_op(_contig(out), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, _contig(g[tuple(sl)]))

    return from_op(out, xs, backward)


def take(x: Tensor, indices: np.ndarray, axis: int, unique: bool = False) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape.

    With ``unique=True`` the backward pass uses plain assignment, which is
    only correct when every repeated index points at a row whose gradient is
    thrown away (a constant pad row, say); otherwise repeated indices
    accumulate.
    """
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    out = np.take(x.data, indices, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        gm = gm.reshape(-1, *moved.shape[1:])
        flat = indices.reshape(-1)
        if unique:
            moved[flat] = gm
        else:
            np.add.at(moved, flat, gm)
        _accum(x, gx)

    return from_op(out, (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = _contig(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        _accum(x, gx)

    return from_op(out, (x,), backward)


# --------------------------------------------------------------------------
# reductions and normalisation


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, _contig(np.broadcast_to(g, src)))

    return from_op(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def mean_sq(x: Tensor) -> Tensor:
    """Mean of squared entries (a scalar)."""
    xd = x.data
    n = xd.size
    out = np.asarray(np.vdot(xd.ravel(), xd.ravel()) / n)
    return from_op(out, (x,), lambda g: _accum(x, xd * (2.0 * g / n)))


def _softmax(xd: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(x.data, axis)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return from_op(y, (x,), backward)


def _row_mean(a: np.ndarray) -> np.ndarray:
    """Mean over the trailing axis, kept as a size-1 axis (BLAS matvec beats ufunc.reduce here)."""
    d = a.shape[-1]
    return (a.reshape(-1, d) @ np.full(d, 1.0 / d, dtype=a.dtype)).reshape(*a.shape[:-1], 1)


def _col_sum(a2: np.ndarray) -> np.ndarray:
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xc = x.data - _row_mean(x.data)
    rstd = 1.0 / np.sqrt(_row_mean(xc * xc) + eps)
    xhat = xc
    xhat *= rstd
    out = xhat * gain.data
    out += bias.data

    def backward(g):
        if x.requires_grad:
            dxhat = g * gain.data
            dx = dxhat - _row_mean(dxhat)
            dx -= xhat * _row_mean(dxhat * xhat)
            dx *= rstd
            _accum(x, dx)
        g2 = g.reshape(-1, d)
        if gain.requires_grad:
            _accum(gain, _col_sum(g2 * xhat.reshape(-1, d)))
        if bias.requires_grad:
            _accum(bias, _col_sum(g2))

    return from_op(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over all leading positions."""
    c = logits.shape[-1]
    z = logits.data.reshape(-1, c)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} rows vs {labels.shape[0]} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"cross_entropy: labels outside [0, {c})")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    out = np.asarray((lse[:, 0] - z[rows, labels]).mean())

    def backward(g):
        p = np.exp(z - lse)
        p[rows, labels] -= 1.0
        _accum(logits, (p * (g / n)).reshape(logits.shape))

    return from_op(out, (logits,), backward)


# --------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over the last two axes.

    ``q`` is ``(..., Nq, D)``, ``k`` is ``(..., Nk, D)`` and ``v`` is
    ``(..., Nk, Dv)``; leading extents must be equal.  Heads split the channel
    axis; logits are scaled by ``1/sqrt(D/heads)``.
    """
    *lead, nq, dq = q.shape
    if k.shape[:-2] != tuple(lead) or v.shape[:-2] != tuple(lead) or k.shape[-1] != dq or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if dq % heads or v.shape[-1] % heads:
        raise ShapeError(f"attention: channels {dq}/{v.shape[-1]} not divisible by {heads} heads")
    nk, dv = k.shape[-2], v.shape[-1]
    dh, dvh = dq // heads, dv // heads
    s = 1.0 / math.sqrt(dh)

    def split(a, n, c):
        return np.swapaxes(a.reshape(*lead, n, heads, c), -2, -3)

    qh, kh, vh = split(q.data, nq, dh), split(k.data, nk, dh), split(v.data, nk, dvh)
    p = _softmax(np.matmul(qh, np.swapaxes(kh, -1, -2)) * s, -1)
    oh = np.matmul(p, vh)
    out = np.swapaxes(oh, -2, -3).reshape(*lead, nq, dv)
    batch = int(np.prod(lead)) if lead else 1
    _record("score", batch * nq * nk * dq)
    _record("value", batch * nq * nk * dv)

    def backward(g):
        gh = split(g, nq, dvh)
        if v.requires_grad:
            dvh_ = np.matmul(np.swapaxes(p, -1, -2), gh)
            _accum(v, np.swapaxes(dvh_, -2, -3).reshape(v.shape))
        if q.requires_grad or k.requires_grad:
            dp = np.matmul(gh, np.swapaxes(vh, -1, -2))
            dp -= (dp * p).sum(axis=-1, keepdims=True)
            dp *= p
            dp *= s
            if q.requires_grad:
                _accum(q, np.swapaxes(np.matmul(dp, kh), -2, -3).reshape(q.shape))
            if k.requires_grad:
                _accum(k, np.swapaxes(np.matmul(np.swapaxes(dp, -1, -2), qh), -2, -3).reshape(k.shape))

    return from_op(_contig(out), (q, k, v), backward)


# --------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_rel_err: list[float]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tol for e in self.max_rel_err)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_err)
        extra = f" ({'; '.join(self.failures)})" if self.failures else ""
        return f"grad_check {status}: max rel err per input [{errs}] tol {self.tol:.0e}{extra}"


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], tol: float = 1e-4,
               step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central differences in 64-bit.

    A non-scalar output is reduced with a fixed random projection so the
    whole Jacobian is exercised.  The relative error of each entry is taken
    against ``max(|analytic|, |numeric|)`` floored at 0.1% of the input's
    largest numeric gradient, so entries near zero do not dominate.  A second
    floor at 1e-6 of the largest gradient over all inputs covers inputs whose
    true gradient is zero (a key bias under softmax, say), where only
    difference noise remains.
    """
    with precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tensors = [parameter(a) for a in arrays]
        out = fn(*tensors)
        proj = None
        if out.size != 1:
            proj = np.random.default_rng(seed).standard_normal(out.shape)

        def scalar(o: Tensor) -> Tensor:
            return tsum(mul_const(o, proj)) if proj is not None else tsum(o)

        failures: list[str] = []
        if not np.all(np.isfinite(out.data)):
            bad = np.argwhere(~np.isfinite(out.data))[0]
            return GradCheckReport([math.inf] * len(arrays), tol, [f"non-finite output at {tuple(int(i) for i in bad)}"])
        scalar(out).backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        nums: list[np.ndarray | None] = []
        with no_grad():
            for i, a in enumerate(arrays):
                num = np.zeros_like(a)
                flat = a.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + step
                    fp = scalar(fn(*[constant(x) for x in arrays])).item()
                    flat[j] = orig - step
                    fm = scalar(fn(*[constant(x) for x in arrays])).item()
                    flat[j] = orig
                    num.reshape(-1)[j] = (fp - fm) / (2 * step)
                if not (np.all(np.isfinite(num)) and np.all(np.isfinite(analytic[i]))):
                    loc = np.argwhere(~(np.isfinite(num) & np.isfinite(analytic[i])))[0]
                    failures.append(f"input {i}: non-finite gradient at {tuple(int(j) for j in loc)}")
                    num = None
                nums.append(num)
        scale = max((float(np.abs(n).max()) for n in nums if n is not None and n.size), default=0.0)
        errs = []
        for num, ana in zip(nums, analytic):
            if num is None:
                errs.append(math.inf)
                continue
            floor = max(1e-3 * np.abs(num).max(), 1e-6 * scale, 1e-12)
            denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)
            errs.append(float((np.abs(num - ana) / denom).max()))
    return GradCheckReport(errs, tol, failures)


class ParamStore(dict):
    """Ordered mapping of parameter name to leaf :class:`Tensor`."""

    def add(self, name: str, shape, rng: np.random.Generator | None = None, init: str = "normal",
            std: float = 0.02) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "normal":
            data = rng.standard_normal(shape) * std
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = parameter(data, name=name)
        self[name] = t
        return t

    def num_params(self, prefix: str | tuple[str, ...] | None = None) -> int:
        return sum(t.size for n, t in self.items() if prefix is None or n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns names that were not found."""
        missing = []
        for n, t in self.items():
            if n not in arrays:
                missing.append(n)
                continue
            a = np.asarray(arrays[n])
            if a.shape != t.shape:
                raise ShapeError(f"parameter {n!r}: stored shape {a.shape} != model shape {t.shape}")
            t.data = a.astype(t.data.dtype, copy=True)
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return missing
