"""Dense float64 arrays with an explicit reverse-mode tape.

Every differentiable quantity in the package is a :class:`DiffArray`.  Arrays
created through :meth:`Tape.variable` (or produced by an operation whose
inputs live on a tape) are recorded; arrays created directly are constants.
There is no global state: each computation owns its :class:`Tape`, and two
tapes never share nodes.

Broadcasting is deliberately absent apart from ``scalar * array``.  The few
structured products the rest of the package needs (per-row scaling, bias
rows, batched vector-matrix products) are explicit operations.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's domain or produced a non-finite value."""


class ContractError(ValueError):
    """A precondition on the call itself was violated."""


class DiffArray:
    __slots__ = ("data", "grad", "node_id", "tape", "__weakref__")

    def __init__(self, data, *, tape: Tape | None = None, node_id: int | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise DomainError("DiffArray values must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None, node_id: int | None) -> DiffArray:
        # arr is a fresh float64 array already checked for finiteness
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out.data, out.grad, out.tape, out.node_id = arr, None, tape, node_id
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node={self.node_id}"
        return f"DiffArray(shape={self.shape}, {kind})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if _is_scalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    if isinstance(x, DiffArray):
        return x.size == 1 and x.ndim <= 1
    return np.ndim(x) == 0


def const(data) -> DiffArray:
    return DiffArray(data)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Records primitive operations in creation order (hence topologically)."""

    def __init__(self):
        self._values: list[DiffArray] = []
        self._records: list[tuple[int, tuple[int | None, ...], Vjp | None]] = []

    def __len__(self) -> int:
        return len(self._values)

    def variable(self, data) -> DiffArray:
        """A new leaf whose gradient will be populated by :meth:`backward`."""
        out = DiffArray(data, tape=self, node_id=len(self._values))
        self._values.append(out)
        self._records.append((out.node_id, (), None))
        return out

    def _push(self, data: np.ndarray, inputs: Sequence[DiffArray], vjp: Vjp) -> DiffArray:
        out = DiffArray._wrap(data, self, len(self._values))
        self._values.append(out)
        self._records.append((out.node_id, tuple(x.node_id for x in inputs), vjp))
        return out

    @property
    def leaves(self) -> list[DiffArray]:
        return [self._values[nid] for nid, ins, _ in self._records if not ins]

    def backward(self, output: DiffArray) -> None:
        """Populate ``grad`` on every node of this tape with d(output)/d(node)."""
        if output.tape is not self:
            raise ContractError("output was not produced on this tape")
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[output.node_id] = np.ones(output.shape)
        for nid, inputs, vjp in reversed(self._records[: output.node_id + 1]):
            g = grads[nid]
            if g is None or vjp is None:
                continue
            for src, gin in zip(inputs, vjp(g)):
                if gin is None or src is None:
                    continue
                if grads[src] is None:
                    grads[src] = np.array(gin, dtype=np.float64)
                else:
                    grads[src] = grads[src] + gin
        for value, g in zip(self._values, grads):
            value.grad = np.zeros(value.shape) if g is None else g.reshape(value.shape)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise DomainError(f"{name} produced non-finite values")


def _tape_of(inputs: Iterable[DiffArray]) -> Tape | None:
    tape = None
    for x in inputs:
        if x.tape is None:
            continue
        if tape is None:
            tape = x.tape
        elif x.tape is not tape:
            raise ContractError("operands belong to different tapes")
    return tape


def apply_op(name: str, data: np.ndarray, inputs: Sequence[DiffArray], vjp: Vjp) -> DiffArray:
    """Wrap a forward result; record it if any input is on a tape.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    Other modules use this to register their own primitives.
    """
    data = np.array(data, dtype=np.float64)
    _check_finite(data, name)
    tape = _tape_of(inputs)
    if tape is None:
        return DiffArray._wrap(data, None, None)
    return tape._push(data, inputs, vjp)


def _same_shape(op: str, a: DiffArray, b: DiffArray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- primitives ---------------------------------------------------------------


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return apply_op("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _same_shape("add", a, b)
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _same_shape("sub", a, b)
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return apply_op("mul", A * B, (a, b), lambda g: (g * B, g * A))


def neg(a) -> DiffArray:
    a = as_diff(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def scale(x, s) -> DiffArray:
    """``s * x`` for a scalar ``s`` (a float or a one-element DiffArray)."""
    x = as_diff(x)
    if isinstance(s, DiffArray):
        if s.size != 1:
            raise DimensionError(f"scale: factor must be scalar, got shape {s.shape}")
        sv, X = s.item(), x.data
        return apply_op(
            "scale", sv * X, (x, s), lambda g: (sv * g, np.array(np.sum(g * X)).reshape(s.shape))
        )
    sv = float(s)
    return apply_op("scale", sv * x.data, (x,), lambda g: (sv * g,))


def relu(x) -> DiffArray:
    x = as_diff(x)
    mask = x.data > 0.0  # subgradient 0 at the kink
    return apply_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x) -> DiffArray:
    x = as_diff(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input contains non-positive values")
    X = x.data
    return apply_op("log", np.log(X), (x,), lambda g: (g / X,))


def exp(x) -> DiffArray:
    x = as_diff(x)
    with np.errstate(over="ignore"):  # overflow is reported as a DomainError below
        out = np.exp(x.data)
    return apply_op("exp", out, (x,), lambda g: (g * out,))


def power(x, p: float) -> DiffArray:
    """``x ** p`` for a constant real exponent; x must be positive unless p is an integer."""
    x = as_diff(x)
    p = float(p)
    X = x.data
    if not p.is_integer() and np.any(X < 0.0):
        raise DomainError("power: negative base with fractional exponent")
    if p == 0.0:
        return apply_op("power", np.ones_like(X), (x,), lambda g: (np.zeros_like(g),))
    return apply_op("power", X**p, (x,), lambda g: (g * p * X ** (p - 1.0),))


def clip(x, lo: float, hi: float) -> DiffArray:
    x = as_diff(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return apply_op("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def abs_(x) -> DiffArray:
    x = as_diff(x)
    sign = np.sign(x.data)
    return apply_op("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def smooth_l1(x) -> DiffArray:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = as_diff(x)
    X = x.data
    quad = np.abs(X) <= 1.0  # kink takes the quadratic-side derivative
    out = np.where(quad, 0.5 * X * X, np.abs(X) - 0.5)
    dx = np.where(quad, X, np.sign(X))
    return apply_op("smooth_l1", out, (x,), lambda g: (g * dx,))


def sigmoid(x) -> DiffArray:
    x = as_diff(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def reshape(x, shape: Sequence[int]) -> DiffArray:
    x = as_diff(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(src),))


def sum_(x, axis: int | None = None) -> DiffArray:
    x = as_diff(x)
    src = x.shape
    if axis is None:
        return apply_op("sum", np.array([x.data.sum()]), (x,), lambda g: (np.full(src, g.item()),))
    ax = axis % x.ndim
    return apply_op(
        "sum", x.data.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), src),)
    )


def mean(x) -> DiffArray:
    x = as_diff(x)
    if x.size == 0:
        raise ContractError("mean of an empty array")
    return scale(sum_(x), 1.0 / x.size)


def concat(xs: Sequence, axis: int = -1) -> DiffArray:
    xs = [as_diff(x) for x in xs]
    if not xs:
        raise ContractError("concat needs at least one input")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[d] != xs[0].shape[d] for d in range(nd) if d != ax):
            raise DimensionError(
                f"concat: shapes {[x.shape for x in xs]} differ off axis {ax}"
            )
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return apply_op("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def concat_channels(*xs) -> DiffArray:
    """The channel-wise ``||`` operator: concatenation along the last axis."""
    return concat(xs, axis=-1)


def scale_by(x, s) -> DiffArray:
    """Multiply ``x`` by ``s`` where ``s.shape`` is a leading prefix of ``x.shape``.

    Covers per-node scalars on N x C latents and per-edge affinities on
    N x K x C samples without general broadcasting.
    """
    x, s = as_diff(x), as_diff(s)
    if s.shape != x.shape[: s.ndim]:
        raise DimensionError(f"scale_by: {s.shape} is not a prefix of {x.shape}")
    extra = x.ndim - s.ndim
    S = s.data.reshape(s.shape + (1,) * extra)
    X = x.data
    axes = tuple(range(s.ndim, x.ndim))
    return apply_op("scale_by", X * S, (x, s), lambda g: (g * S, np.sum(g * X, axis=axes)))


def bias_add(x, b) -> DiffArray:
    """``x + b`` where ``b.shape`` is a trailing suffix of ``x.shape``."""
    x, b = as_diff(x), as_diff(b)
    if b.ndim == 0 or b.shape != x.shape[x.ndim - b.ndim :]:
        raise DimensionError(f"bias_add: {b.shape} is not a suffix of {x.shape}")
    axes = tuple(range(x.ndim - b.ndim))
    return apply_op("bias_add", x.data + b.data, (x, b), lambda g: (g, np.sum(g, axis=axes)))


def batched_vecmat(v, m) -> DiffArray:
    """Per-batch ``v[..., :] @ m[..., :, :]``: (B..., C) x (B..., C, D) -> (B..., D)."""
    v, m = as_diff(v), as_diff(m)
    if m.ndim != v.ndim + 1 or m.shape[:-1] != v.shape:
        raise DimensionError(f"batched_vecmat: {v.shape} against {m.shape}")
    V, Mx = v.data, m.data
    out = np.einsum("...c,...cd->...d", V, Mx)
    return apply_op(
        "batched_vecmat",
        out,
        (v, m),
        lambda g: (np.einsum("...d,...cd->...c", g, Mx), V[..., :, None] * g[..., None, :]),
    )


def logsumexp(x, axis: int = -1) -> DiffArray:
    x = as_diff(x)
    ax = axis % x.ndim
    X = x.data
    top = X.max(axis=ax, keepdims=True)
    e = np.exp(X - top)
    z = e.sum(axis=ax, keepdims=True)
    out = (np.log(z) + top).squeeze(ax)
    soft = e / z
    return apply_op("logsumexp", out, (x,), lambda g: (np.expand_dims(g, ax) * soft,))


def take(x, index: np.ndarray, axis: int = 0) -> DiffArray:
    """Gather along ``axis`` by integer index (repeats allowed)."""
    x = as_diff(x)
    idx = np.asarray(index, dtype=np.intp)
    ax = axis % x.ndim
    src = x.shape

    def vjp(g):
        out = np.zeros(src)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return apply_op("take", np.take(x.data, idx, axis=ax), (x,), vjp)


def scatter_mean(x, cell: np.ndarray, n_cells: int) -> DiffArray:
    """Average rows of ``x`` (N x C) into ``n_cells`` bins; ``cell[i] < 0`` drops row i.

    Empty bins are zero.  Linear in ``x``, hence exactly differentiable.
    """
    x = as_diff(x)
    cell = np.asarray(cell, dtype=np.intp)
    if x.ndim != 2 or cell.shape != (x.shape[0],):
        raise DimensionError(f"scatter_mean: rows {x.shape} against cells {cell.shape}")
    keep = cell >= 0
    counts = np.bincount(cell[keep], minlength=n_cells).astype(np.float64)
    out = np.zeros((n_cells, x.shape[1]))
    np.add.at(out, cell[keep], x.data[keep])
    nz = counts > 0
    out[nz] /= counts[nz, None]
    inv = np.zeros(x.shape[0])
    inv[keep] = 1.0 / counts[cell[keep]]

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[keep] = g[cell[keep]] * inv[keep, None]
        return (gx,)

    return apply_op("scatter_mean", out, (x,), vjp)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "concat_channels": concat_channels,
    "relu": relu,
    "log": log,
    "neg": neg,
    "scale": scale,
}


def elementwise(op: str, *inputs) -> DiffArray:
    """Dispatch one of the named elementwise primitives."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def backward(output: DiffArray) -> None:
    """Convenience wrapper around ``output.tape.backward(output)``."""
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is None:
        raise ContractError("output is a constant; nothing to differentiate")
    output.tape.backward(output)


def finite_diff_check(
    f: Callable[[DiffArray], DiffArray], x, step: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(as_diff(x).data, dtype=np.float64)
    tape = Tape()
    xv = tape.variable(x0)
    out = f(xv)
    if out.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    if out.tape is None:
        analytic = np.zeros_like(x0)
    else:
        tape.backward(out)
        analytic = xv.grad
    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        vals = []
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sgn * step
            try:
                v = f(DiffArray(probe.reshape(x0.shape))).item()
            except DomainError as exc:
                raise DomainError(f"finite_diff_check: f not evaluable near coordinate {i}") from exc
            if not np.isfinite(v):
                raise DomainError(f"finite_diff_check: non-finite value near coordinate {i}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
