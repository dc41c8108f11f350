"""Reverse-mode automatic differentiation on an append-only tape.

A :class:`Var` carries a float or ``numpy`` array value plus a handle into the
:class:`Tape` that recorded it. Variables without a tape are constants: mixing
them into an expression never records anything and never receives gradient.

Nodes may be array-valued; every elementwise primitive broadcasts like numpy
and its vector-Jacobian product undoes the broadcast. Scalar-granular use is a
special case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "DomainError",
    "TapeSealedError",
    "GradCheckResult",
    "lift",
    "value_of",
    "grad_check",
]


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain."""


class TapeSealedError(RuntimeError):
    pass


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=float)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_finite(op, value):
    ok = math.isfinite(value) if isinstance(value, float) else np.isfinite(value).all()
    if not ok:
        raise DomainError(f"{op} produced a non-finite value")


class Tape:
    """Append-only record of operations.

    Each node stores its parent node ids and one vector-Jacobian product per
    parent. Parents always precede children, so a single reverse sweep over
    the list is a valid topological traversal.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple[Callable, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._ops: list[str] = []
        self._params: dict[str, int] = {}
        self.checkpoints: list[int] = []
        self.sealed = False
        self.kinks = 0

    def __len__(self):
        return len(self._parents)

    def seal(self):
        self.sealed = True

    def checkpoint(self) -> int:
        self.checkpoints.append(len(self._parents))
        return self.checkpoints[-1]

    def _append(self, op, parents, vjps, value) -> Var:
        if self.sealed:
            raise TapeSealedError("tape sealed")
        self._parents.append(tuple(parents))
        self._vjps.append(tuple(vjps))
        self._shapes.append(np.shape(value))
        self._ops.append(op)
        return Var(value, self, len(self._parents) - 1)

    def parameter(self, name: str, value) -> Var:
        """Register a named leaf whose gradient :meth:`backward` reports."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        value = np.array(value, dtype=float)
        _check_finite(f"parameter {name}", value)
        var = self._append("param", (), (), value)
        self._params[name] = var.index
        return var

    def record(self, op: str, inputs: Sequence, value, partials: Sequence) -> Var:
        """Append a node with explicit local partial derivatives.

        ``partials[i]`` is either an array of elementwise local derivatives
        d(out)/d(inputs[i]) (broadcast against the output) or a callable that
        maps the output cotangent to the input cotangent.
        """
        if len(partials) != len(inputs):
            raise ValueError("partials and inputs differ in length")
        if self.sealed:
            raise TapeSealedError("tape sealed")
        _check_finite(op, value)
        parents, vjps = [], []
        for x, d in zip(inputs, partials):
            if not isinstance(x, Var) or x.tape is None:
                continue
            if x.tape is not self:
                raise ValueError("operand recorded on a different tape")
            if callable(d):
                vjp = d
            else:
                d = np.asarray(d, dtype=float)
                shape = np.shape(x.value)
                vjp = lambda g, d=d, shape=shape: _unbroadcast(g * d, shape)
            parents.append(x.index)
            vjps.append(vjp)
        return self._append(op, parents, vjps, value)

    def backward(self, seed: Var) -> dict[str, np.ndarray]:
        """Gradient of scalar ``seed`` with respect to every registered parameter."""
        if not isinstance(seed, Var) or seed.tape is not self:
            raise ValueError("seed is not on this tape")
        if np.size(seed.value) != 1:
            raise ValueError("seed must be scalar-valued")
        grads: list = [None] * (seed.index + 1)
        grads[seed.index] = np.ones(np.shape(seed.value))
        for i in range(seed.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for p, vjp in zip(self._parents[i], self._vjps[i]):
                gp = vjp(g)
                if grads[p] is None:
                    grads[p] = np.array(gp, dtype=float)
                else:
                    grads[p] = grads[p] + gp
        out = {}
        for name, idx in self._params.items():
            if idx <= seed.index and grads[idx] is not None:
                out[name] = grads[idx]
            else:
                out[name] = np.zeros(self._shapes[idx])
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else x


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _emit(op, inputs, value, partials):
    tape = _tape_of(*inputs)
    if tape is None:
        return Var(value)
    return tape.record(op, inputs, value, partials)


class Var:
    """A value on (or off) a tape. ``tape is None`` marks a constant."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape | None = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        kind = "const" if self.tape is None else f"node {self.index}"
        return f"Var({self.value!r}, {kind})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    # arithmetic ---------------------------------------------------------
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
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


# elementwise primitives ---------------------------------------------------


def add(a, b):
    va, vb = value_of(a), value_of(b)
    return _emit("add", (a, b), va + vb, (1.0, 1.0))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    return _emit("sub", (a, b), va - vb, (1.0, -1.0))


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    return _emit("mul", (a, b), va * vb, (vb, va))


def div(a, b):
    va, vb = value_of(a), value_of(b)
    if np.any(np.asarray(vb) == 0):
        raise DomainError("division by zero")
    out = va / vb
    return _emit("div", (a, b), out, (1.0 / vb, -out / vb))


def neg(a):
    return _emit("neg", (a,), -value_of(a), (-1.0,))


def power(a, k):
    if isinstance(k, Var):
        raise TypeError("only constant exponents are supported")
    va = value_of(a)
    if k == 2:
        return mul(a, a)
    if not float(k).is_integer() and np.any(np.asarray(va) < 0):
        raise DomainError("fractional power of a negative number")
    return _emit("pow", (a,), va**k, (k * va ** (k - 1),))


def sin(a):
    va = value_of(a)
    return _emit("sin", (a,), np.sin(va), (np.cos(va),))


def cos(a):
    va = value_of(a)
    return _emit("cos", (a,), np.cos(va), (-np.sin(va),))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(value_of(a))
    return _emit("exp", (a,), out, (out,))


def log(a):
    va = value_of(a)
    if np.any(np.asarray(va) <= 0):
        raise DomainError("log of a non-positive number")
    return _emit("log", (a,), np.log(va), (1.0 / va,))


def sqrt(a):
    va = value_of(a)
    if np.any(np.asarray(va) <= 0):
        raise DomainError("sqrt requires a strictly positive argument")
    out = np.sqrt(va)
    return _emit("sqrt", (a,), out, (0.5 / out,))


def asin(a):
    va = value_of(a)
    if np.any(np.abs(va) >= 1):
        raise DomainError("asin argument outside (-1, 1)")
    return _emit("asin", (a,), np.arcsin(va), (1.0 / np.sqrt(1.0 - va * va),))


def atan2(y, x):
    vy, vx = value_of(y), value_of(x)
    r2 = vy * vy + vx * vx
    if np.any(np.asarray(r2) == 0):
        raise DomainError("atan2(0, 0)")
    return _emit("atan2", (y, x), np.arctan2(vy, vx), (vx / r2, -vy / r2))


def tanh(a):
    out = np.tanh(value_of(a))
    return _emit("tanh", (a,), out, (1.0 - out * out,))


def sigmoid(a):
    va = value_of(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * va))
    return _emit("sigmoid", (a,), out, (out * (1.0 - out),))


def elu(a):
    va = value_of(a)
    neg_part = np.expm1(np.minimum(va, 0.0))
    out = np.where(va > 0, va, neg_part)
    return _emit("elu", (a,), out, (np.where(va > 0, 1.0, neg_part + 1.0),))


def softplus(a):
    va = value_of(a)
    out = np.logaddexp(0.0, va)
    return _emit("softplus", (a,), out, (0.5 * (1.0 + np.tanh(0.5 * va)),))


def vabs(a):
    """Absolute value; the subgradient at 0 is 0."""
    va = value_of(a)
    sign = np.sign(va)
    tape = _tape_of(a)
    if tape is not None and np.any(np.asarray(va) == 0):
        tape.kinks += 1
    return _emit("abs", (a,), np.abs(va), (sign,))


def where(mask, a, b):
    """Select by a constant boolean mask; no gradient flows through ``mask``."""
    mask = np.asarray(value_of(mask), dtype=bool)
    va, vb = value_of(a), value_of(b)
    return _emit("where", (a, b), np.where(mask, va, vb), (mask.astype(float), (~mask).astype(float)))


def clip(a, lo, hi):
    va = value_of(a)
    inside = (va >= lo) & (va <= hi)
    return _emit("clip", (a,), np.clip(va, lo, hi), (inside.astype(float),))


def detach(a):
    return Var(value_of(a))


# structural primitives ----------------------------------------------------


def getitem(a, idx):
    va = value_of(a)
    shape = np.shape(va)
    out = va[idx]

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _emit("getitem", (a,), out, (vjp,))


def reshape(a, shape):
    va = np.asarray(value_of(a))
    orig = va.shape
    return _emit("reshape", (a,), va.reshape(shape), (lambda g: np.reshape(g, orig),))


def transpose(a):
    va = np.asarray(value_of(a))
    return _emit("transpose", (a,), np.swapaxes(va, -1, -2), (lambda g: np.swapaxes(g, -1, -2),))


def stack(items: Sequence, axis: int = 0):
    vals = [np.asarray(value_of(x), dtype=float) for x in items]
    shapes = [v.shape for v in vals]
    out = np.stack(np.broadcast_arrays(*vals), axis=axis)

    def make(i):
        return lambda g: _unbroadcast(np.take(g, i, axis=axis), shapes[i])

    return _emit("stack", tuple(items), out, tuple(make(i) for i in range(len(items))))


def concat(items: Sequence, axis: int = -1):
    vals = [np.asarray(value_of(x), dtype=float) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _emit("concat", tuple(items), out, tuple(make(i) for i in range(len(items))))


def vsum(a, axis=None):
    va = np.asarray(value_of(a))
    shape = va.shape
    out = va.sum(axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _emit("sum", (a,), out, (vjp,))


def mean(a, axis=None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return vsum(a, axis) * (1.0 / n)


def matmul(a, b):
    va, vb = np.asarray(value_of(a)), np.asarray(value_of(b))
    out = va @ vb

    def ga(g):
        if vb.ndim == 1:
            return _unbroadcast(np.multiply.outer(g, vb), va.shape)
        return _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)

    def gb(g):
        if va.ndim == 1:
            return _unbroadcast(np.multiply.outer(va, g), vb.shape)
        if vb.ndim == 1:
            return _unbroadcast((np.swapaxes(va, -1, -2) @ g[..., None])[..., 0], vb.shape)
        return _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)

    return _emit("matmul", (a, b), out, (ga, gb))


def segment_sum(a, segments, n: int):
    """Sum rows of ``a`` into ``n`` buckets, each bucket exactly rounded.

    Rounding is independent of row order (``math.fsum``), which keeps results
    bit-identical under any permutation of the contributing rows.
    """
    va = np.asarray(value_of(a), dtype=float)
    segments = np.asarray(segments, dtype=int)
    out = np.zeros((n,) + va.shape[1:])
    for k in range(n):
        rows = va[segments == k]
        if len(rows):
            flat = rows.reshape(len(rows), -1)
            out[k] = np.array([math.fsum(col) for col in flat.T]).reshape(va.shape[1:])
    return _emit("segment_sum", (a,), out, (lambda g: np.asarray(g)[segments],))


def gauss_solve(A, b):
    """Batched Gaussian elimination with partial pivoting.

    ``A`` has shape (..., n, n), ``b`` (..., n). Raises :class:`DomainError`
    on an exactly zero pivot.
    """
    A = np.array(A, dtype=float)
    x = np.array(b, dtype=float)
    n = A.shape[-1]
    batch = A.shape[:-2]
    A = A.reshape((-1, n, n))
    x = x.reshape((-1, n))
    rows = np.arange(A.shape[0])
    for k in range(n):
        p = k + np.argmax(np.abs(A[:, k:, k]), axis=1)
        if np.any(A[rows, p, k] == 0):
            raise DomainError("singular matrix in gauss_solve")
        swap = p != k
        if np.any(swap):
            r = rows[swap]
            A[r, k], A[r, p[swap]] = A[r, p[swap]].copy(), A[r, k].copy()
            x[r, k], x[r, p[swap]] = x[r, p[swap]].copy(), x[r, k].copy()
        for i in range(k + 1, n):
            f = A[:, i, k] / A[:, k, k]
            A[:, i, k:] -= f[:, None] * A[:, k, k:]
            x[:, i] -= f * x[:, k]
    for k in range(n - 1, -1, -1):
        acc = x[:, k].copy()
        for j in range(k + 1, n):
            acc -= A[:, k, j] * x[:, j]
        x[:, k] = acc / A[:, k, k]
    return x.reshape(batch + (n,))


def solve(A, b):
    """Differentiable linear solve ``A x = b`` (batched)."""
    vA, vb = np.asarray(value_of(A)), np.asarray(value_of(b))
    with np.errstate(over="ignore", invalid="ignore"):
        x = gauss_solve(vA, vb)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite result in solve")

    def gb(g):
        return _unbroadcast(gauss_solve(np.swapaxes(vA, -1, -2), g), vb.shape)

    def gA(g):
        lam = gauss_solve(np.swapaxes(vA, -1, -2), g)
        return _unbroadcast(-lam[..., :, None] * x[..., None, :], vA.shape)

    return _emit("solve", (A, b), x, (gA, gb))


# verification oracle ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_error: float
    errors: np.ndarray
    ad: np.ndarray
    fd: np.ndarray
    nonsmooth: list[int] = field(default_factory=list)

    @property
    def smooth(self) -> bool:
        return not self.nonsmooth


def grad_check(f: Callable[[Var], Var], params, h: float = 1e-6) -> GradCheckResult:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` receives the parameter vector as a single :class:`Var` and must
    return a scalar :class:`Var`. The error per coordinate is
    ``|g_ad - g_fd| / max(1, |g_fd|)``. Coordinates where the forward and
    backward one-sided differences disagree are reported in ``nonsmooth``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    p0 = np.array(params, dtype=float).reshape(-1)
    tape = Tape()
    out = f(tape.parameter("p", p0))
    ad = np.asarray(tape.backward(out)["p"], dtype=float).reshape(-1)
    f0 = float(value_of(out))

    def probe(p, i):
        try:
            val = float(value_of(f(Var(p))))
        except DomainError as exc:
            raise DomainError(f"f not evaluable at probe index {i}: {exc}") from exc
        if not math.isfinite(val):
            raise DomainError(f"non-finite f at probe index {i}")
        return val

    fd = np.empty_like(p0)
    nonsmooth = []
    for i in range(p0.size):
        e = np.zeros_like(p0)
        e[i] = h
        fp, fm = probe(p0 + e, i), probe(p0 - e, i)
        fd[i] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > max(1e-3, math.sqrt(h)) * max(1.0, abs(fd[i])):
            nonsmooth.append(i)
    errors = np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))
    return GradCheckResult(float(errors.max(initial=0.0)), errors, ad, fd, nonsmooth)
