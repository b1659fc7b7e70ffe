"""Dense-tensor arithmetic with recorded-operation reverse-mode gradients.

Every operation here computes its result eagerly with numpy and, when any
input participates in gradient tracking, records a closure that maps the
upstream gradient to gradients for the inputs.  ``backward`` walks the
recorded graph once per call and accumulates into the ``grad`` buffers of
leaf tensors only, so repeated backward calls add up linearly.

The op set is deliberately closed: matmul, the elementwise family
(add/sub/mul/scale/exp/silu/tanh/soft_clamp), full reductions, row
gather/concat, row L2-normalisation, and the two losses the networks train
with.  No broadcasting beyond a trailing bias vector in ``add`` and a
size-1 scalar factor in ``mul``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus the bookkeeping needed for the reverse pass.

    ``data`` is row-major float32 by default (float64 is accepted for
    gradient-check harnesses).  ``grad`` is lazily allocated and only ever
    populated on leaf tensors created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every participating leaf's grad.

        ``self`` must be scalar.  Gradients are computed fresh for each
        call using a local table, then added into leaf ``grad`` buffers,
        so two calls without a reset double the accumulated gradient.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.data.dtype, copy=True)
                else:
                    acc += pg


def _track(*tensors: Tensor) -> bool:
    return grad_enabled() and any(
        t.requires_grad or t._parents for t in tensors
    )


def _result(data, parents, backward) -> Tensor:
    if parents is None:
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not match"
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects rank-2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data
    if not _track(a, b):
        return _result(out, None, None)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias over the last axis."""
    bias = b.data.ndim == 1 and a.data.ndim == 2 and b.data.shape[0] == a.data.shape[1]
    if not bias:
        _require_same_shape("add", a, b)
    out = a.data + b.data
    if not _track(a, b):
        return _result(out, None, None)

    def backward(g):
        gb = g.sum(axis=0) if bias else g
        return g, gb

    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = a.data - b.data
    if not _track(a, b):
        return _result(out, None, None)

    def backward(g):
        return g, -g

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a single-element scalar tensor."""
    scalar = b.data.size == 1
    if not scalar:
        _require_same_shape("mul", a, b)
    out = a.data * b.data
    if not _track(a, b):
        return _result(out, None, None)

    def backward(g):
        if scalar:
            return g * b.data, np.sum(g * a.data).reshape(b.data.shape)
        return g * b.data, g * a.data

    return _result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    out = a.data * a.data.dtype.type(c)
    if not _track(a):
        return _result(out, None, None)
    return _result(out, (a,), lambda g: (g * a.data.dtype.type(c),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not _track(a):
        return _result(out, None, None)
    return _result(out, (a,), lambda g: (g * out,))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); sigmoid evaluated on the non-overflowing branch."""
    x = a.data
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    out = x * sig
    if not _track(a):
        return _result(out, None, None)

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _result(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    if not _track(a):
        return _result(out, None, None)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def soft_clamp(a: Tensor, limit: float) -> Tensor:
    """Smooth squash ``limit * tanh(x / limit)``, range-bounded to [-limit, limit].

    Behaves like the identity near zero but guarantees the output never
    leaves the band, without the dead gradient of a hard clamp.
    """
    lim = a.data.dtype.type(limit)
    t = np.tanh(a.data / lim)
    out = lim * t
    if not _track(a):
        return _result(out, None, None)
    return _result(out, (a,), lambda g: (g * (1.0 - t * t),))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar of shape ())."""
    out = a.data.sum(dtype=a.data.dtype)
    if not _track(a):
        return _result(out, None, None)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    """Mean of all elements (scalar of shape ())."""
    n = a.data.dtype.type(a.data.size)
    out = a.data.sum(dtype=a.data.dtype) / n
    if not _track(a):
        return _result(out, None, None)

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _result(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    if not _track(*tensors):
        return _result(out, None, None)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _result(out, tuple(tensors), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects rank-2 input, got {a.data.shape}")
    out = np.ascontiguousarray(a.data.T)
    if not _track(a):
        return _result(out, None, None)
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a rank-2 tensor; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects rank-2 input, got {a.data.shape}")
    out = a.data[idx]
    if not _track(a):
        return _result(out, None, None)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(out, (a,), backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a rank-2 tensor to unit L2 norm."""
    if a.data.ndim != 2:
        raise DimensionError(
            f"l2_normalize_rows expects rank-2 input, got {a.data.shape}"
        )
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    norms = np.maximum(norms, a.data.dtype.type(eps))
    out = a.data / norms
    if not _track(a):
        return _result(out, None, None)

    def backward(g):
        # d(x/|x|) = (g - n (n.g)) / |x| with n the unit row
        dots = np.sum(out * g, axis=1, keepdims=True)
        return ((g - out * dots) / norms,)

    return _result(out, (a,), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference (scalar tensor)."""
    _require_same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = pred.data.dtype.type(pred.data.size)
    out = np.sum(diff * diff, dtype=pred.data.dtype) / n
    if not _track(pred, target):
        return _result(out, None, None)

    def backward(g):
        base = g * 2.0 * diff / n
        return base, -base

    return _result(out, (pred, target), backward)


def cross_entropy_mean(logits: Tensor, target_indices) -> Tensor:
    """Mean over rows of -log softmax(row)[target]; numerically stable."""
    idx = np.asarray(target_indices, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(
            f"cross_entropy_mean expects rank-2 logits, got {logits.data.shape}"
        )
    if idx.shape != (logits.data.shape[0],):
        raise DimensionError(
            f"cross_entropy_mean: {idx.shape[0] if idx.ndim else 0} targets for "
            f"{logits.data.shape[0]} rows"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(denom)
    rows = np.arange(idx.shape[0])
    n = logits.data.dtype.type(idx.shape[0])
    out = -log_probs[rows, idx].sum(dtype=logits.data.dtype) / n
    if not _track(logits):
        return _result(out, None, None)

    def backward(g):
        grad = ez / denom
        grad[rows, idx] -= 1.0
        return (g * grad / n,)

    return _result(out, (logits,), backward)
