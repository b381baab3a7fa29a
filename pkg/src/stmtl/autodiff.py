"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value in the model (feature maps, attention weights, losses) is a
Tensor.  Each operation records its differentiable inputs and a backward
rule on the output node; ``backward()`` replays the recorded graph once in
reverse topological order.  Everything is float64: the artifact exists to
be verified against finite differences, not to be fast.

Broadcasting is deliberately restricted: two operands must have identical
shapes, or one must be a scalar, or one must equal a trailing suffix of
the other (row-vector over matrix).  Anything else raises DimensionError
naming both shapes.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BoundsError, ContractError, DataError, DimensionError, NumericError

_node_ids = itertools.count()


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``grad`` is allocated (zero-filled) exactly when ``requires_grad`` is
    true; it always matches ``data`` in shape.  Tensors produced by
    operations keep references to their differentiable parents, forming
    the computation graph that ``backward`` walks.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id",
                 "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_node_ids)
        self._parents: tuple = ()
        self._backward_fn = None
        self._backward_done = False

    # ---- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """A detached copy of the underlying values."""
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- gradient machinery ---------------------------------------------

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Populate ``grad`` on every differentiable tensor reachable from this scalar.

        The recorded operations are replayed exactly once in reverse
        topological order.  A second call on the same output is an error:
        the graph has been consumed.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no differentiable inputs")
        if self._backward_done:
            raise ContractError("backward() already called on this graph; rebuild it before differentiating again")

        # Iterative post-order DFS; graphs can be a few thousand nodes deep.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node)
        self._backward_done = True

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def constant(value) -> Tensor:
    """A non-differentiable tensor (labels, positional tables, weights-as-data)."""
    return Tensor(np.asarray(value, dtype=np.float64))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Learnable parameter drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# op plumbing


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[Tensor], None] | None) -> Tensor:
    """Wrap an op result, recording the graph edge only when it matters."""
    grad_parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(grad_parents))
    if grad_parents:
        out._parents = grad_parents
        out._backward_fn = backward
    return out


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    pa, pb = int(np.prod(sa)), int(np.prod(sb))
    if pa == 1 or pb == 1:
        return True
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return True
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return True
    return False


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are neither equal, scalar, "
            f"nor a trailing-suffix broadcast")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo broadcasting: sum grad down to the given operand shape."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += _reduce_to(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(out.grad, b.shape)

    return _result(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += _reduce_to(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(-out.grad, b.shape)

    return _result(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += _reduce_to(out.grad * b.data, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(out.grad * a.data, b.shape)

    return _result(out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += _reduce_to(out.grad / b.data, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(-out.grad * a.data / (b.data * b.data), b.shape)

    return _result(out_data, (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route their gradient to the first argument."""
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += _reduce_to(out.grad * take_a, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(out.grad * ~take_a, b.shape)

    return _result(out_data, (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route their gradient to the first argument."""
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += _reduce_to(out.grad * take_a, a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(out.grad * ~take_a, b.shape)

    return _result(out_data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)

    def bw(out: Tensor):
        x.grad += out.grad * mask

    return _result(out_data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out_data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                        np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def bw(out: Tensor):
        x.grad += out.grad * out.data * (1.0 - out.data)

    return _result(out_data, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient sign(x) (0 at the kink)."""
    sign = np.sign(x.data)
    out_data = np.abs(x.data)

    def bw(out: Tensor):
        x.grad += out.grad * sign

    return _result(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D tensors; backward is dA = dC Bᵀ, dB = Aᵀ dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")
    out_data = a.data @ b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a.grad += out.grad @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ out.grad

    return _result(out_data, (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; each row sums to 1."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: input contains NaN or infinity")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(out: Tensor):
        # dx = (dy - sum(dy * y, row)) * y
        inner = (out.grad * out.data).sum(axis=1, keepdims=True)
        x.grad += (out.grad - inner) * out.data

    return _result(out_data, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0, variance 1, then scale and shift."""
    if x.ndim != 2:
        raise DimensionError(f"layer_norm needs a 2-D tensor, got {x.shape}")
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({n},)")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    out_data = x_hat * gamma.data + beta.data

    def bw(out: Tensor):
        g = out.grad * gamma.data
        if x.requires_grad:
            gm = g.mean(axis=1, keepdims=True)
            gxm = (g * x_hat).mean(axis=1, keepdims=True)
            x.grad += (g - gm - x_hat * gxm) * inv_std
        if gamma.requires_grad:
            gamma.grad += (out.grad * x_hat).sum(axis=0)
        if beta.requires_grad:
            beta.grad += out.grad.sum(axis=0)

    return _result(out_data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out_data = x.data.reshape(shape)

    def bw(out: Tensor):
        x.grad += out.grad.reshape(x.shape)

    return _result(out_data, (x,), bw)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose2d needs a 2-D tensor, got {x.shape}")
    out_data = x.data.T.copy()

    def bw(out: Tensor):
        x.grad += out.grad.T

    return _result(out_data, (x,), bw)


def _concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bw(out: Tensor):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t.grad += out.grad[tuple(sl)]

    return _result(out_data, tuple(tensors), bw)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    ndim = tensors[0].ndim if tensors else 0
    return _concat(tensors, axis=ndim - 1)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, axis=0)


def _slice_axis(x: Tensor, lo: int, hi: int, axis: int) -> Tensor:
    extent = x.shape[axis]
    if not (0 <= lo <= hi <= extent):
        raise BoundsError(f"slice [{lo}:{hi}] outside axis {axis} of extent {extent}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(lo, hi)
    sl = tuple(sl)
    out_data = x.data[sl].copy()

    def bw(out: Tensor):
        x.grad[sl] += out.grad

    return _result(out_data, (x,), bw)


def slice_last_dim(x: Tensor, lo: int, hi: int) -> Tensor:
    return _slice_axis(x, lo, hi, axis=x.ndim - 1)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    return _slice_axis(x, lo, hi, axis=0)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by index; backward scatter-adds into the sources."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise BoundsError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out_data = x.data[idx].copy()

    def bw(out: Tensor):
        np.add.at(x.grad, idx, out.grad)

    return _result(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out_data = np.array([x.data.sum()])

    def bw(out: Tensor):
        x.grad += out.grad[0]

    return _result(out_data, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out_data = np.array([x.data.sum() / n])

    def bw(out: Tensor):
        x.grad += out.grad[0] / n

    return _result(out_data, (x,), bw)


def cross_entropy_rows(logits: Tensor, targets, weights=None,
                       reduction: str = "mean") -> Tensor:
    """Per-row softmax cross-entropy against integer targets.

    ``weights`` multiplies each row's contribution; the "mean" reduction
    divides by the number of rows (not the weight total), so down-weighted
    rows genuinely count less.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows needs 2-D logits, got {logits.shape}")
    m, n = logits.shape
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != (m,):
        raise DimensionError(f"cross_entropy_rows: targets shape {t.shape} != ({m},)")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise DataError(f"cross_entropy_rows: class index out of range [0, {n})")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    per_row = log_norm - shifted[np.arange(m), t]
    total = float((w * per_row).sum())
    scale = 1.0 / m if reduction == "mean" else 1.0
    out_data = np.array([total * scale])

    def bw(out: Tensor):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(m), t] -= 1.0
        logits.grad += out.grad[0] * scale * w[:, None] * probs

    return _result(out_data, (logits,), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar function of ``x.data`` that rebuilds its
    graph on every call.  ``coords`` restricts the probe to a subset of
    flat coordinates (useful when x is large); the default probes all of
    them.  Error metric: |analytic - numeric| / max(1, |analytic|).
    """
    if not x.requires_grad:
        raise ContractError("grad_check target must require gradients")
    x.zero_grad()
    loss = f(x)
    loss.backward()
    analytic = x.grad.copy().reshape(-1)

    index_list = range(x.size) if coords is None else list(coords)
    worst = 0.0
    for i in index_list:
        orig = float(x.data.flat[i])
        x.data.flat[i] = orig + h
        lo_plus = float(f(x).data.reshape(-1)[0])
        x.data.flat[i] = orig - h
        lo_minus = float(f(x).data.reshape(-1)[0])
        x.data.flat[i] = orig
        numeric = (lo_plus - lo_minus) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst
