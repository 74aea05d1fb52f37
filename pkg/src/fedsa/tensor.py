"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a new :class:`Tensor` and, when any operand requires a
gradient (and recording is not disabled by :func:`no_grad`), links it to its
operands together with a backward rule. :func:`backward` linearises the
reachable graph into a :class:`Tape` and replays it in reverse.

Grads accumulate. Calling :func:`backward` twice on the same graph adds the
gradients a second time; zero them explicitly between steps.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _backend


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or infinity")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + g.reshape(self.shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: subtract(self, other)  # noqa: E731
    __mul__ = lambda self, other: multiply(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _recording() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result("add", a.data + b.data, (a, b), bw)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result("subtract", a.data - b.data, (a, b), bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result("multiply", a.data * b.data, (a, b), bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias of shape ``(C,)`` along the last axis of ``x``."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, bias.shape[0]).sum(axis=0))

    return _result("add_bias", x.data + bias.data, (x, bias), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result("matmul", a.data @ b.data, (a, b), bw)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 'same' convolution. ``x`` is NHWC, ``w`` is (kh, kw, c_in, c_out)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d operands, got {x.shape} vs {w.shape}")
    kh, kw, cin, _ = w.shape
    if x.shape[3] != cin or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(_backend.conv2d_backward_input(g, wd))
        if w.requires_grad:
            w._accumulate(_backend.conv2d_backward_weight(xd, g, w.shape))

    return _result("conv2d", np.asarray(_backend.conv2d_forward(xd, wd)), (x, w), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _result("relu", x.data * mask, (x,), bw)


def mean_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"mean_pool2x2: needs NHWC with even H and W, got {x.shape}")
    n, h, w, c = x.shape
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        x._accumulate(up)

    return _result("mean_pool2x2", out, (x,), bw)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    n = x.shape[0]

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _result("flatten", x.data.reshape(n, -1), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _result("reshape", out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {logits.shape[1]} classes")
    n = labels.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g.reshape(()) * p / n)

    return _result("softmax_cross_entropy", np.array([loss]), (logits,), bw)


def sum_of_squares(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * g.reshape(()) * x.data)

    return _result("sum_of_squares", np.array([np.sum(x.data * x.data)]), (x,), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        x._accumulate(c * g)

    return _result("scale", x.data * c, (x,), bw)


def reduce_sum(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.full(x.shape, g.reshape(())))

    return _result("reduce_sum", np.array([x.data.sum()]), (x,), bw)


def negate(x: Tensor) -> Tensor:
    return scale(x, -1.0)


_BINARY = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "conv2d": conv2d,
    "add_bias": add_bias,
}
_UNARY = {
    "relu": relu,
    "mean_pool2x2": mean_pool2x2,
    "flatten": flatten,
    "sum_of_squares": sum_of_squares,
    "reduce_sum": reduce_sum,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch an op by name.

    ``scale`` takes ``(x, c)``; ``softmax_cross_entropy`` takes
    ``(logits, labels)``.
    """
    if kind in _BINARY:
        return _BINARY[kind](*operands)
    if kind in _UNARY:
        return _UNARY[kind](*operands)
    if kind == "scale":
        return scale(*operands, **kwargs)
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(*operands, **kwargs)
    raise ValueError(f"unknown op kind {kind!r}")


class Tape:
    """Topologically ordered record of the ops reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_backward(self, root: Tensor) -> None:
        interior = [n for n in self.nodes if n._backward is not None]
        for n in interior:
            n.grad = None
        root._accumulate(np.ones(root.shape))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # only leaves keep their grads
        for n in interior:
            n.grad = None


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf with requires_grad."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    Tape.from_root(root).replay_backward(root)


def grad_wrt_input(forward: Callable[[Tensor], Tensor], x, scalarize: Callable[[Tensor], Tensor] = reduce_sum) -> np.ndarray:
    """Gradient of ``scalarize(forward(x))`` with respect to ``x``.

    ``forward`` maps an input tensor to a hidden representation; the returned
    array has the shape of ``x``.
    """
    xt = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    root = scalarize(forward(xt))
    backward(root)
    if xt.grad is None:
        return np.zeros(xt.shape)
    return xt.grad


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale grads so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * factor
    return total


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * grad`` followed by zeroing grads."""
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: missing grad on parameter of shape {p.shape}")
    for p in params:
        if lr != 0:
            p.data = p.data - lr * p.grad
        p.grad = None
