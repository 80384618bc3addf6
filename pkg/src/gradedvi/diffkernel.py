"""Minimal reverse-mode differentiation over dense 2-D float64 arrays.

Forward evaluation records operation nodes on a Tape; Tape.backward walks the
record once in reverse and accumulates exact gradients into every leaf tensor
that requires them.  The op set is exactly what the variational estimators
need: dense matrix algebra, stable elementwise nonlinearities, row reductions,
and a handful of structural helpers (concat, reshape, stop_gradient,
triangular inverse).

Everything is float64 and row-major.  Tapes are cheap and rebuilt for every
training step; they are never shared between workers.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input value lies outside the operation's domain (e.g. log of 0)."""


class TapeError(RuntimeError):
    """The tape was used in an unsupported way (e.g. backward twice)."""


class Tensor2:
    """Dense 2-D tensor with an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 requires a 2-D array, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._grad_owned = True

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor2(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def const(data, name: str | None = None) -> Tensor2:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor2(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor2:
    """Wrap an array as a trainable leaf."""
    return Tensor2(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "output", "backward")

    def __init__(self, op: str, output: Tensor2, backward):
        self.op = op
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, op: str, output: Tensor2, backward) -> None:
        self._nodes.append(_Node(op, output, backward))

    def backward(self, root: Tensor2) -> None:
        """Accumulate gradients of the scalar `root` into all live leaves.

        Each recorded node is visited exactly once, in reverse creation
        order.  A tape can back-propagate only once; rebuild the graph for
        another pass.
        """
        if self._spent:
            raise TapeError("tape already consumed by backward(); rebuild the graph")
        self._spent = True
        if root.data.size != 1:
            raise ShapeError(f"backward root must be 1x1, got {root.shape}")
        root.grad = np.ones((1, 1))
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)


def _accum(t: Tensor2, g: np.ndarray, own: bool = True) -> None:
    """Add g into t's gradient buffer.

    own=True promises g is freshly allocated and never reused by the caller,
    so it can be stored directly on first accumulation; own=False forces a
    copy there (g may be a view of, or alias, another tensor's gradient).
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(tape: Tape | None, op: str, inputs, out_data, backward) -> Tensor2:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor2(out_data, requires_grad=needs)
    if needs and tape is not None:
        tape.record(op, out, backward)
    return out


def _as_pair(a: Tensor2, b) -> tuple[Tensor2, bool]:
    """Return (b_tensor_or_none, is_scalar)."""
    if isinstance(b, Tensor2):
        return b, False
    return None, True


def _binary_shapes(op: str, a: Tensor2, b: Tensor2) -> bool:
    """Validate elementwise operand shapes; True if b broadcasts as 1x1."""
    if a.shape == b.shape:
        return False
    if b.shape == (1, 1):
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(tape: Tape | None, a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(tape, "matmul", (a, b), out_data, backward)


def transpose(tape: Tape | None, x: Tensor2) -> Tensor2:
    out_data = np.ascontiguousarray(x.data.T)

    def backward(g):
        _accum(x, g.T, own=False)

    return _make(tape, "transpose", (x,), out_data, backward)


def tril_inverse(tape: Tape | None, x: Tensor2) -> Tensor2:
    """Inverse of a lower-triangular matrix with nonzero diagonal."""
    if x.rows != x.cols:
        raise ShapeError(f"tril_inverse: square matrix required, got {x.shape}")
    k = np.linalg.inv(x.data)

    def backward(g):
        _accum(x, -k.T @ g @ k.T)

    return _make(tape, "tril_inverse", (x,), k, backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(tape: Tape | None, a: Tensor2, b) -> Tensor2:
    bt, is_scalar = _as_pair(a, b)
    if is_scalar:
        def backward(g):
            _accum(a, g, own=False)

        return _make(tape, "add", (a,), a.data + float(b), backward)
    bcast = _binary_shapes("add", a, bt)

    def backward(g):
        _accum(a, g, own=False)
        if bcast:
            _accum(bt, g.sum().reshape(1, 1))
        else:
            _accum(bt, g, own=False)

    return _make(tape, "add", (a, bt), a.data + bt.data, backward)


def sub(tape: Tape | None, a: Tensor2, b) -> Tensor2:
    bt, is_scalar = _as_pair(a, b)
    if is_scalar:
        def backward(g):
            _accum(a, g, own=False)

        return _make(tape, "sub", (a,), a.data - float(b), backward)
    bcast = _binary_shapes("sub", a, bt)

    def backward(g):
        _accum(a, g, own=False)
        _accum(bt, -g.sum().reshape(1, 1) if bcast else -g)

    return _make(tape, "sub", (a, bt), a.data - bt.data, backward)


def mul(tape: Tape | None, a: Tensor2, b) -> Tensor2:
    bt, is_scalar = _as_pair(a, b)
    if is_scalar:
        c = float(b)

        def backward(g):
            _accum(a, g * c)

        return _make(tape, "mul", (a,), a.data * c, backward)
    bcast = _binary_shapes("mul", a, bt)

    def backward(g):
        _accum(a, g * bt.data)
        gb = g * a.data
        _accum(bt, gb.sum().reshape(1, 1) if bcast else gb)

    return _make(tape, "mul", (a, bt), a.data * bt.data, backward)


def div(tape: Tape | None, a: Tensor2, b: Tensor2) -> Tensor2:
    bcast = _binary_shapes("div", a, b)

    def backward(g):
        _accum(a, g / b.data)
        gb = -g * a.data / (b.data * b.data)
        _accum(b, gb.sum().reshape(1, 1) if bcast else gb)

    return _make(tape, "div", (a, b), a.data / b.data, backward)


def square(tape: Tape | None, x: Tensor2) -> Tensor2:
    def backward(g):
        _accum(x, 2.0 * x.data * g)

    return _make(tape, "square", (x,), x.data * x.data, backward)


def pow_const(tape: Tape | None, x: Tensor2, p: float) -> Tensor2:
    """x**p elementwise; x must be strictly positive for non-integer p."""
    out_data = np.power(x.data, p)

    def backward(g):
        _accum(x, p * np.power(x.data, p - 1.0) * g)

    return _make(tape, "pow_const", (x,), out_data, backward)


def exp(tape: Tape | None, x: Tensor2) -> Tensor2:
    out_data = np.exp(x.data)

    def backward(g):
        _accum(x, out_data * g)

    return _make(tape, "exp", (x,), out_data, backward)


def log(tape: Tape | None, x: Tensor2) -> Tensor2:
    if np.any(x.data <= 0.0):
        idx = tuple(int(v) for v in np.argwhere(x.data <= 0.0)[0])
        raise DomainError(f"log: non-positive entry {x.data[idx]!r} at index {idx}")

    def backward(g):
        _accum(x, g / x.data)

    return _make(tape, "log", (x,), np.log(x.data), backward)


def log1p_exp(tape: Tape | None, x: Tensor2) -> Tensor2:
    """Softplus log(1 + e^x), computed without overflow on either tail."""
    xd = x.data
    out_data = np.where(xd > 0.0,
                        xd + np.log1p(np.exp(-np.abs(xd))),
                        np.log1p(np.exp(np.minimum(xd, 0.0))))

    def backward(g):
        _accum(x, _sigmoid_values(xd) * g)

    return _make(tape, "log1p_exp", (x,), out_data, backward)


def _sigmoid_values(xd: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(xd))
    return np.where(xd >= 0.0, 1.0, e) / (1.0 + e)


def sigmoid(tape: Tape | None, x: Tensor2) -> Tensor2:
    out_data = _sigmoid_values(x.data)

    def backward(g):
        _accum(x, out_data * (1.0 - out_data) * g)

    return _make(tape, "sigmoid", (x,), out_data, backward)


def gelu(tape: Tape | None, x: Tensor2) -> Tensor2:
    """Exact x * Phi(x) with Phi the standard normal CDF (erf form)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out_data = xd * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        _accum(x, (cdf + xd * pdf) * g)

    return _make(tape, "gelu", (x,), out_data, backward)


def clamp_min(tape: Tape | None, x: Tensor2, floor: float) -> Tensor2:
    out_data = np.maximum(x.data, floor)
    mask = x.data > floor

    def backward(g):
        _accum(x, g * mask)

    return _make(tape, "clamp_min", (x,), out_data, backward)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(tape: Tape | None, x: Tensor2) -> Tensor2:
    def backward(g):
        _accum(x, np.full(x.shape, g[0, 0]))

    return _make(tape, "sum", (x,), x.data.sum().reshape(1, 1), backward)


def tmean(tape: Tape | None, x: Tensor2) -> Tensor2:
    n = x.data.size

    def backward(g):
        _accum(x, np.full(x.shape, g[0, 0] / n))

    return _make(tape, "mean", (x,), x.data.mean().reshape(1, 1), backward)


def sum_rows(tape: Tape | None, x: Tensor2) -> Tensor2:
    """Per-row sum over columns; (B, M) -> (B, 1)."""

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape), own=False)

    return _make(tape, "sum_rows", (x,), x.data.sum(axis=1, keepdims=True), backward)


def logsumexp_rows(tape: Tape | None, x: Tensor2) -> Tensor2:
    """Per-row log-sum-exp, max-shifted; backward is the row softmax."""
    m = x.data.max(axis=1, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=1, keepdims=True)
    out_data = m + np.log(total)

    def backward(g):
        _accum(x, g * (shifted / total))

    return _make(tape, "logsumexp_rows", (x,), out_data, backward)


def broadcast_add_rowvec(tape: Tape | None, x: Tensor2, bias: Tensor2) -> Tensor2:
    if bias.rows != 1 or bias.cols != x.cols:
        raise ShapeError(f"broadcast_add_rowvec: bias {bias.shape} vs x {x.shape}")

    def backward(g):
        _accum(x, g, own=False)
        _accum(bias, g.sum(axis=0, keepdims=True))

    return _make(tape, "broadcast_add_rowvec", (x, bias), x.data + bias.data, backward)


def mul_colvec(tape: Tape | None, x: Tensor2, c: Tensor2) -> Tensor2:
    """Scale row i of x by c[i, 0]."""
    if c.cols != 1 or c.rows != x.rows:
        raise ShapeError(f"mul_colvec: col vector {c.shape} vs x {x.shape}")

    def backward(g):
        _accum(x, g * c.data)
        _accum(c, (g * x.data).sum(axis=1, keepdims=True))

    return _make(tape, "mul_colvec", (x, c), x.data * c.data, backward)


def reshape(tape: Tape | None, x: Tensor2, rows: int, cols: int) -> Tensor2:
    if rows * cols != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    out_data = x.data.reshape(rows, cols).copy()

    def backward(g):
        _accum(x, g.reshape(x.shape), own=False)

    return _make(tape, "reshape", (x,), out_data, backward)


def concat_cols(tape: Tape | None, a: Tensor2, b: Tensor2) -> Tensor2:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    na = a.cols

    def backward(g):
        _accum(a, g[:, :na], own=False)
        _accum(b, g[:, na:], own=False)

    return _make(tape, "concat_cols", (a, b), np.hstack([a.data, b.data]), backward)


def stop_gradient(tape: Tape | None, x: Tensor2) -> Tensor2:
    """Forward identity; contributes nothing to any gradient."""
    return Tensor2(x.data, requires_grad=False)
