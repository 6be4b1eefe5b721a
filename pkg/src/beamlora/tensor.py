"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations the adapter needs are supported: matmul,
same-shape add/sub/mul, row scaling by a vector, softmax over a vector,
tanh, sum, mean-squared error and cross-entropy. Any other shape pairing is
a ``DimensionError``.

Tape policy: every differentiable op records its inputs and a closure that
pushes the upstream gradient back to them. ``backward`` walks the recorded
graph once in reverse topological order and then releases it, so a loss can
be backpropagated exactly once. Gradients accumulate on leaves until
``zero_grad`` is called.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on NaN/Inf inputs or overflow."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its preconditions."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE)
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _check_finite(*ts: Tensor) -> None:
    for t in ts:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in input of shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return _result(ad @ bd, (a, b), fn)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return _result(ad * bd, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""

    def fn(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), fn)


def scale_rows(v: Tensor, m: Tensor) -> Tensor:
    """Scale row ``i`` of ``m`` by ``v[i]``; the only broadcast pattern supported."""
    if v.data.ndim != 1 or m.data.ndim != 2 or v.shape[0] != m.shape[0]:
        raise DimensionError(f"scale_rows: vector {v.shape} does not match rows of {m.shape}")
    vd, md = v.data, m.data

    def fn(g):
        _accumulate(v, np.sum(g * md, axis=1))
        _accumulate(m, g * vd[:, None])

    return _result(vd[:, None] * md, (v, m), fn)


def softmax(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got shape {v.shape}")
    _check_finite(v)
    z = np.exp(v.data - np.max(v.data))
    s = z / np.sum(z)

    def fn(g):
        _accumulate(v, s * (g - np.dot(g, s)))

    return _result(s, (v,), fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def fn(g):
        _accumulate(a, g * (1.0 - y * y))

    return _result(y, (a,), fn)


def tensor_sum(a: Tensor) -> Tensor:
    def fn(g):
        _accumulate(a, np.full_like(a.data, g))

    return _result(np.sum(a.data), (a,), fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Squared error summed over outputs and averaged over samples.

    For ``d x batch`` operands this is ``sum((pred - target)**2) / batch``;
    vectors are treated as a single sample.
    """
    _same_shape("mse", pred, target)
    diff = pred.data - target.data
    n = diff.shape[-1] if diff.ndim == 2 else 1

    def fn(g):
        _accumulate(pred, g * 2.0 * diff / n)
        _accumulate(target, -g * 2.0 * diff / n)

    return _result(np.asarray(np.sum(diff * diff) / n), (pred, target), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is classes x batch, one label per column."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[1],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    _check_finite(logits)
    z = logits.data - np.max(logits.data, axis=0, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=0, keepdims=True))
    cols = np.arange(labels.size)
    n = labels.size

    def fn(g):
        p = np.exp(logp)
        p[labels, cols] -= 1.0
        _accumulate(logits, g * p / n)

    return _result(np.asarray(-np.mean(logp[labels, cols])), (logits,), fn)


def frobenius_norm(m: Tensor | np.ndarray) -> float:
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    if data.ndim != 2:
        raise DimensionError(f"frobenius_norm expects a matrix, got shape {data.shape}")
    with np.errstate(over="raise"):
        try:
            # rescale first so squaring cannot overflow for finite input
            peak = float(np.max(np.abs(data))) if data.size else 0.0
            if peak == 0.0:
                return 0.0
            if not np.isfinite(peak):
                raise NumericError("frobenius_norm of non-finite matrix")
            return peak * float(np.sqrt(np.sum((data / peak) ** 2)))
        except FloatingPointError as exc:
            raise NumericError("frobenius_norm overflow") from exc


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._parents = ()
        node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
