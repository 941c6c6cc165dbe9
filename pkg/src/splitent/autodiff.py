"""Minimal reverse-mode differentiation over numpy arrays.

Every op takes and returns :class:`Tensor`. A node records its parents and a
closure that maps the output gradient to one gradient per parent. Shapes are
explicit: apart from the bias-add inside ``conv2d``/``dense``/``add_channel``
there is no broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its domain."""


class GraphError(RuntimeError):
    """Raised on invalid backward calls (non-scalar, detached, or consumed graphs)."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar for same-shape algebra
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return scale_add(self, other, -1.0)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def make_op(
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    name: str,
) -> Tensor:
    """Wrap ``out`` as a graph node; parents that need no gradient are pruned."""
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=name)
    return Tensor(out, _op=name)


# --------------------------------------------------------------------------- graph


@dataclass
class Graph:
    """Executed ops in topological order; ``parents[i]`` index earlier nodes."""

    nodes: list[Tensor] = field(default_factory=list)
    parents: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
        index = {id(n): i for i, n in enumerate(order)}
        parents = [tuple(index[id(p)] for p in n._parents if id(p) in index) for n in order]
        return cls(order, parents)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The graph's backward closures are released afterwards, so a second call on
    the same loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward(); rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input requires grad")

    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._consumed:
            raise GraphError(f"node {node._op} belongs to a consumed graph")
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"{node._op}: gradient shape {pg.shape} != parent shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._consumed = True


# --------------------------------------------------------------------------- layers


def _conv_out(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(f"conv2d: {axis}={size} with kernel {k}, stride {stride}, pad {pad} gives no integer output size")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,kh,kw]`` plus per-filter bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, kc, kh, kw = w.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if b.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({k},)")
    ho = _conv_out(h, kh, stride, pad, "H")
    wo = _conv_out(wd, kw, stride, pad, "W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.data.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = w.data.reshape(k, -1)
    out = (w2 @ cols2).reshape(k, n, ho, wo).transpose(1, 0, 2, 3) + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(k, -1)
        gw = (g2 @ cols2.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd])
        return gx, gw, gb

    return make_op(out, (x, w, b), bw, "conv2d")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w.T + b`` for ``x[N,D]``, ``w[M,D]``, ``b[M]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T + b.data

    def bw(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return make_op(out, (x, w, b), bw, "dense")


def add_channel(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector ``b[C]`` to ``x[N,C,...]`` (the one permitted broadcast)."""
    if x.data.ndim < 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_channel: bias {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    out = x.data + b.data.reshape(view)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return make_op(out, (x, b), lambda g: (g, g.sum(axis=axes)), "add_channel")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return ((np.broadcast_to(g[:, :, None, None], x.shape) / (h * w)).astype(g.dtype),)

    return make_op(out, (x,), bw, "global_avg_pool")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of ``x[N,C,H,W]``."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), bw, "upsample2x")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_op(out, (x,), bw, "channel_slice")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# --------------------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale_add(a: Tensor, b: Tensor, c: float) -> Tensor:
    """``a + c * b`` for same-shape tensors and a python scalar ``c``."""
    _check_same(a, b, "scale_add")
    cc = a.data.dtype.type(c)
    return make_op(a.data + cc * b.data, (a, b), lambda g: (g, cc * g), "scale_add")


def scale(a: Tensor, c: float) -> Tensor:
    cc = a.data.dtype.type(c)
    return make_op(a.data * cc, (a,), lambda g: (g * cc,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_const(a: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a same-shape constant array that receives no gradient."""
    m = np.asarray(m, dtype=a.data.dtype)
    if m.shape != a.shape:
        raise DimensionError(f"mul_const: mask {m.shape} != {a.shape}")
    return make_op(a.data * m, (a,), lambda g: (g * m,), "mul_const")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sgn = np.sign(x.data)
    return make_op(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min()})")
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return make_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(x.data, 0).astype(x.data.dtype)
    return make_op(out, (x,), lambda g: (g * special.expit(x.data),), "softplus")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return make_op(out, (x,), lambda g: (g * inside,), "clamp")


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(x.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_op(np.asarray(out, dtype=x.data.dtype), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return make_op(out, (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


# --------------------------------------------------------------------------- losses & quantization


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``, stabilised by max-subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = np.asarray(np.mean(logsumexp - z[rows, labels]), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return make_op(out, (logits,), bw, "softmax_cross_entropy")


def add_uniform_noise(x: Tensor, seed: int) -> Tensor:
    """``x + u`` with ``u ~ U(-0.5, 0.5)`` from a seeded generator; ``u`` is a constant for backward."""
    u = np.random.default_rng(seed).uniform(-0.5, 0.5, size=x.shape).astype(x.data.dtype)
    return make_op(x.data + u, (x,), lambda g: (g,), "add_uniform_noise")


def round_half_away(a: np.ndarray) -> np.ndarray:
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


def round_ste(x: Tensor) -> Tensor:
    """Round half away from zero; the backward pass is the identity."""
    return make_op(round_half_away(x.data).astype(x.data.dtype), (x,), lambda g: (g,), "round_ste")


# --------------------------------------------------------------------------- gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    eps: float = 1e-2,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``point``.

    The denominator per component is ``max(|analytic|, |numeric|, 1e-6)``.
    ``indices`` restricts the numeric side to a subset of flat positions.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    backward(y)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = float(f(Tensor(plus.reshape(base.shape))).data)
        fm = float(f(Tensor(minus.reshape(base.shape))).data)
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic.reshape(-1)[i])
        denom = max(np.abs(a), np.abs(numeric), 1e-6)
        worst = max(worst, np.abs(a - numeric) / denom)
    return float(worst)
