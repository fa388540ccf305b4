"""A small reverse-mode autodiff engine over dense numpy arrays.

Only the handful of operations the micro-detector needs are provided. Each
op records its parents and a closure mapping the output gradient to one
gradient per parent; :func:`backward` walks the graph in reverse
topological order and accumulates into leaf ``grad`` buffers.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from simdet.errors import ConfigurationError, NonFiniteError, StateError

DTYPE = np.float32

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense array with an optional gradient accumulator.

    Leaves created by the user (parameters, inputs) have no parents. Graph
    nodes keep a reference to their parents and a backward closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        if dtype is None:
            # float arrays keep their precision (the gradient oracles run in
            # float64); everything else becomes float32
            is_float = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float else DTYPE
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: GradFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.data.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.data.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.data.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.data.dtype))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def graph_node(data: np.ndarray, parents: tuple[Tensor, ...], backward: GradFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    return graph_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return graph_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return graph_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sum_all(a: Tensor) -> Tensor:
    return graph_node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return graph_node(
        np.asarray(a.data.mean(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),),
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return graph_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return graph_node(s, (a,), lambda g: (g * s * (1 - s),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return graph_node(a.data * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# convolution (NHWC input, HWIO kernel)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on ``(N, H, W, C)`` input with ``(kh, kw, C, O)`` kernel."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wid, c = x.shape
    if c != cin:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    if kh == 1 and kw == 1:
        cols = xp[:, ::stride, ::stride, :][:, :ho, :wo, :].reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g: np.ndarray):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pad : pad + h, pad : pad + wid, :] if pad else dxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return graph_node(out, parents, backward)


# ---------------------------------------------------------------------------
# backward pass


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any trainable tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if check_finite and not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")


def detach_graph(t: Tensor) -> None:
    """Drop graph references so intermediate buffers can be freed."""
    for node in _topo_order(t):
        node._parents = ()
        node._backward = None
