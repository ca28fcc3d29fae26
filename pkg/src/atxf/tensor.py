"""Dense f64 tensors with reverse-mode automatic differentiation.

Every op here builds a node only when at least one input requires a
gradient, so inference passes (teacher forwards, evaluation) allocate no
graph at all.  Backward rules are written against raw numpy arrays and
return one gradient per parent.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from .errors import ContractError, ShapeError

# Non-finite check after every op; off by default for speed.
DEBUG = os.environ.get("ATXF_DEBUG", "") not in ("", "0")

LAYERNORM_EPS = 1e-6

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: BackwardFn | None = _backward
        self.op = op

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)

    # operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A contiguous leaf tensor that requires gradients."""
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _node(ad / bd, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi computed through erfc."""
    xd = x.data
    cdf = 0.5 * erfc(-xd * _SQRT1_2)  # no cancellation for x << 0

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return _node(xd * cdf, (x,), bw, "gelu")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; gradients follow the selection."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), sa) if a.requires_grad else None,
            _unbroadcast(np.where(mask, 0.0, g), sb) if b.requires_grad else None,
        )

    return _node(out, (a, b), bw, "where")


# ----------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold batch dims into rows: one big GEMM instead of a batched one
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in keys)


def getitem(x: Tensor, key) -> Tensor:
    src_shape = x.shape
    basic = _is_basic_index(key)

    def bw(g):
        out = np.zeros(src_shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _node(x.data[key], (x,), bw, "getitem")


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    return _node(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims),),
        "sum",
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return _node(
        np.mean(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
        "mean",
    )


# ----------------------------------------------------------------------
# fused neural-network ops
# ----------------------------------------------------------------------
def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    y = softmax_array(x.data, axis)

    def bw(g):
        # Jacobian-vector form; never builds the N x N Jacobian
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ls = log_softmax_array(x.data, axis)

    def bw(g):
        return (g - np.exp(ls) * np.sum(g, axis=axis, keepdims=True),)

    return _node(ls, (x,), bw, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Standardize over the last axis, then apply a per-channel affine."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}, {beta.shape} do not match channels {C}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, C).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, C).sum(axis=0)
        return gx, gg, gb

    return _node(xhat * gd + beta.data, (x, gamma, beta), bw, "layernorm")


def cross_entropy_soft(logits: Tensor, target_probs, tol: float = 1e-6) -> Tensor:
    """Batch-mean cross entropy of ``softmax(logits)`` against soft targets.

    ``target_probs`` is a constant [B, K] array whose rows are distributions.
    """
    t = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs, dtype=np.float64)
    if t.shape != logits.shape or logits.ndim != 2:
        raise ShapeError(f"cross_entropy_soft expects matching [B, K] shapes, got {logits.shape} and {t.shape}")
    if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > tol:
        raise ContractError("target rows must be nonnegative and sum to 1")
    B = t.shape[0]
    ls = log_softmax_array(logits.data, axis=1)
    loss = -np.sum(t * ls) / B

    def bw(g):
        return ((np.exp(ls) - t) * (g / B),)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


# ----------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------
@dataclass
class ComputationGraph:
    """Topologically ordered nodes reachable from a loss tensor."""

    nodes: list[Tensor] = field(default_factory=list)
    roots: list[Tensor] = field(default_factory=list)


def build_graph(loss: Tensor) -> ComputationGraph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    roots = [n for n in order if n.is_leaf and n.requires_grad]
    return ComputationGraph(nodes=order, roots=roots)


def backward(loss: Tensor, accumulate: bool = False, graph: ComputationGraph | None = None) -> ComputationGraph:
    """Propagate d(loss)/d(node) to every leaf that requires a gradient.

    With ``accumulate=False`` each reached leaf's ``grad`` is overwritten;
    otherwise the new gradient is added to any existing one.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                if accumulate and node.grad is not None:
                    node.grad = node.grad + g
                else:
                    node.grad = np.array(g, dtype=np.float64, copy=True)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return graph


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``f`` w.r.t. the array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``, maximized."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
