"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure that turns
the output gradient into parent gradients.  ``backward`` topologically sorts
the nodes reachable from a scalar loss and runs the closures once each, in
reverse order.  The graph is released afterwards, so a second ``backward``
on the same loss is an error.

Arrays are float64 unless a tensor is created with ``dtype=np.float32``.
Broadcasting follows numpy; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
KL_CLAMP = 1e-12

_node_ids = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised when a computation graph is used out of order."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, np.ndarray):
        if dtype is None:
            return x if x.dtype.kind == "f" else x.astype(DEFAULT_DTYPE)
        return x.astype(dtype, copy=False)
    return np.asarray(x, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain constant (no gradient w.r.t. ``c``)."""
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), "div", fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), "gelu", fn)


# -- shape ops ------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = _is_basic_index(index)

    def fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), "getitem", fn)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", fn)


# -- reductions -----------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        if b.ndim == 2 and a.ndim > 2:
            # shared weight matrix: fold batch axes into rows
            k, n = b.shape
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), "embedding", fn)


# -- normalisation and probability ---------------------------------------
def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean, True = keep) forces excluded entries to
    exactly zero without ever materialising infinities.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    with np.errstate(over="ignore"):  # -big - big -> -inf, exp -> 0
        z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), "softmax", fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = g * gamma.data
        n = x.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), "layer_norm", fn)


def cross_entropy_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[t, target_t] over unmasked positions.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` have the leading
    shape.  ``mask`` True marks positions that count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ValueError(f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_logits: every position is masked")
    if targets[mask].size and targets[mask].max() >= logits.shape[-1]:
        raise IndexError("target index exceeds vocabulary")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    safe_targets = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (mask[..., None] / count),)

    return _make(np.asarray(loss), (logits,), "cross_entropy", fn)


def kl_divergence(p, q: Tensor) -> Tensor:
    """KL(p || q) along the last axis; ``p`` is a fixed target.

    Entries with p == 0 contribute nothing.  ``q`` is clamped below at
    ``KL_CLAMP`` before the log.  Leading axes are kept, so a (L, n) pair
    yields L divergences.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=q.dtype)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"kl_divergence length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    p = np.broadcast_to(p, q.shape)
    qc = np.maximum(q.data, KL_CLAMP)
    support = p > 0
    ratio = np.where(support, p, 1.0) / qc
    terms = np.where(support, p * np.log(ratio), 0.0)
    out = terms.sum(axis=-1)

    def fn(g):
        live = support & (q.data > KL_CLAMP)
        return (np.where(live, -p / qc, 0.0) * np.expand_dims(g, -1),)

    return _make(np.asarray(out), (q,), "kl", fn)


# -- backward -------------------------------------------------------------
@dataclass
class Graph:
    """Topologically ordered nodes reachable from a loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t."""
    if loss._consumed:
        raise GraphError("backward already ran on this loss; rebuild the graph")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    graph = graph or Graph.trace(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    for node in graph.nodes:
        node._parents = ()
        node._backward = None
    loss._consumed = True


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(t.grad is None or np.isfinite(t.grad).all() for t in tensors)
