"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable primitive used by the networks and losses lives here.  A
``Tensor`` records the op that produced it and a closure mapping the output
gradient to input gradients; ``gradients`` walks the recorded graph in exact
reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(ValueError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or '<leaf>'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        graph = Graph.from_output(self)
        grads = graph.backprop(self)
        for node in graph.nodes:
            if node.op == "leaf" and node.requires_grad and id(node) in grads:
                g = grads[id(node)]
                node.grad = g.copy() if node.grad is None else node.grad + g

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, o):
        return matmul(self, o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out._backward = backward
    out.name = ""
    return out


def custom(data, parents: Sequence[Tensor], backward: BackwardFn, op: str = "custom") -> Tensor:
    """Build a node with a user-supplied backward rule (used for fault injection)."""
    return _node(np.asarray(data, dtype=DTYPE), op, parents, backward)


@dataclass
class Graph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def ids(self) -> set[int]:
        return {id(n) for n in self.nodes}

    def backprop(self, output: Tensor) -> dict[int, np.ndarray]:
        if output.size != 1:
            raise GraphError(f"output must be scalar, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op} backward produced {pg.shape} for input {parent.shape}")
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        return grads


def gradients(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(output)/d(t) for every t in ``wrt``; zeros where t does not influence output."""
    if output.size != 1:
        raise GraphError(f"output must be scalar, got shape {output.shape}")
    graph = Graph.from_output(output)
    members = graph.ids()
    for t in wrt:
        if not t.requires_grad:
            raise GraphError("gradient requested for a tensor without requires_grad")
        if id(t) not in members:
            raise GraphError("tensor is not part of the graph of the output")
    grads = graph.backprop(output)
    return [grads.get(id(t), np.zeros_like(t.data)).copy() for t in wrt]


def finite_diff_check(f: Callable[[Tensor], Tensor], t: Tensor, step: float = 1e-5) -> float:
    """Max elementwise relative error between autodiff and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(t.data.copy(), requires_grad=True)
    out = f(x)
    if id(x) in Graph.from_output(out).ids():
        (auto,) = gradients(out, [x])
    else:
        auto = np.zeros_like(x.data)
    base = t.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for k in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert.reshape(-1)[k] += sign * step
            v = f(Tensor(pert)).item()
            if not np.isfinite(v):
                raise NonFiniteError(f"f is non-finite at perturbation of element {k}")
            vals.append(v)
        flat[k] = (vals[0] - vals[1]) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(auto - numeric) / denom)) if base.size else 0.0


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    # subgradient at 0 is 0
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: (g / a.data,))


def pow(a, p: float) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * a.data ** (p - 1)
        if p < 1:
            d = np.where(a.data == 0, 0.0, d)  # subgradient 0 at the sqrt-type kink
        return (g * d,)

    return _node(out, "pow", (a,), back)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    pick = a.data >= b.data
    return _node(np.where(pick, a.data, b.data), "maximum", (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    pick = a.data <= b.data
    return _node(np.where(pick, a.data, b.data), "minimum", (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, "leaky_relu", (a,), lambda g: (g * factor,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out, "mean", (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), back)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _node(out, "l2_normalize", (a,), back)


def instance_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of an N×C×H×W tensor to zero mean, unit variance."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"instance_norm expects N×C×H×W, got {a.shape}")
    mu = a.data.mean(axis=(2, 3), keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def back(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, "instance_norm", (a,), back)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def gather(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(out, "gather", (a,), back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # N×C×Ho×Wo×kh×kw view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N×Ho×Wo×O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    n, _, ho, wo = g.shape
    c, (kh, kw) = w.shape[1], w.shape[2:]
    h, wd = in_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # N×Ho×Wo×C×kh×kw
    hp, wp = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, padding:padding + h, padding:padding + wd]


def _conv_weight_grad(g: np.ndarray, x: np.ndarray, stride: int, padding: int,
                      kh: int, kw: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)
    ho, wo = g.shape[2:]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O×C×kh×kw


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: N×C×H×W, w: O×C×kh×kw, b: O."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    out = _conv_forward(x.data, w.data, stride, padding)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gx = _conv_input_grad(g, w.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, stride, padding, kh, kw) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, "conv2d", parents, back)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: N×Cin×H×W, w: Cin×Cout×kh×kw; output side (H-1)*stride - 2*padding + kh."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    kh, kw = w.shape[2:]
    ho = (x.shape[2] - 1) * stride - 2 * padding + kh
    wo = (x.shape[3] - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}")
    out = _conv_input_grad(x.data, w.data, stride, padding, (ho, wo))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gx = _conv_forward(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, stride, padding, kh, kw) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(np.ascontiguousarray(out), "conv_transpose2d", parents, back)


def op_catalog() -> frozenset[str]:
    return frozenset({
        "add", "sub", "mul", "div", "neg", "abs", "exp", "log", "pow", "clamp", "maximum",
        "minimum", "matmul",
        "conv2d", "conv_transpose2d", "leaky_relu", "relu", "tanh", "sigmoid", "softmax",
        "mean", "sum", "l2_normalize", "instance_norm", "reshape", "transpose", "gather",
        "concat",
    })
