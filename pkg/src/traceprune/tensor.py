"""A small reverse-mode autograd engine over numpy arrays.

Only the operations needed to train a decoder-only character Transformer are
provided. Every op returns a new :class:`Tensor`; when any input requires a
gradient the op also records a backward closure and its parents, so calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.

Gradients of leaf tensors accumulate across backward calls, so callers zero
them between optimizer steps. Intermediate results do not retain gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, GraphError

_state = {"dtype": np.float32, "grad_enabled": True}


def get_default_dtype() -> np.dtype:
    return np.dtype(_state["dtype"])


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the floating dtype new tensors are created with.

    float64 is used by the gradient checks; training always runs in float32.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation passes)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = ""

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _state["grad_enabled"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self._backward is None:
            raise GraphError("backward() called on a tensor that was not produced by a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                if prev is None:
                    grads[id(parent)] = pg
                else:
                    grads[id(parent)] = prev + pg


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


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar (e.g. attention score scaling)."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._from_op(x.data * c, (x,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    # [..., K] @ [K, N]: fold the leading axes into rows so each product is one GEMM.
    folded = bd.ndim == 2 and ad.ndim > 2
    if folded:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def backward(g):
        ga = gb = None
        if folded:
            g2 = g.reshape(-1, g.shape[-1])
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            return ga, gb
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(np.maximum(x.data, 0), (x,), backward, "relu")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None, training: bool = True) -> Tensor:
    """Inverted dropout. The identity when ``rate == 0`` or not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise ValueError("dropout with rate > 0 needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    keep = keep.astype(x.data.dtype, copy=False)

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), backward, "dropout")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; the gradient scatter-adds back into the rows."""
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise DimensionError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids must lie in [0, {weight.shape[0]})")
    n_rows, width = weight.shape

    def backward(g):
        gw = np.zeros((n_rows, width), dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, width))
        return (gw,)

    return Tensor._from_op(weight.data[ids], (weight,), backward, "embedding")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


_causal_cache: dict[tuple[int, int, type], np.ndarray] = {}


def causal_mask(scores: Tensor) -> Tensor:
    """Add -inf to every key position after the query position.

    ``scores`` has shape ``[..., T_query, T_key]``. The output intentionally
    contains -inf; the following softmax maps those entries to exactly 0.
    """
    if scores.ndim < 2:
        raise DimensionError(f"causal_mask: need at least 2 dims, got {scores.shape}")
    tq, tk = scores.shape[-2:]
    key = (tq, tk, scores.data.dtype.type)
    bias = _causal_cache.get(key)
    if bias is None:
        bias = np.triu(np.full((tq, tk), -np.inf, dtype=scores.data.dtype), k=1 + tk - tq)
        _causal_cache[key] = bias
    keep = bias == 0

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(scores.data + bias, (scores,), backward, "causal_mask")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(old),)

    return Tensor._from_op(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(x.data.transpose(axes), (x,), backward, "transpose")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def backward(g):
        return (np.broadcast_to(g / n, shape),)

    return Tensor._from_op(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), backward, "mean")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then apply gain and bias."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError(f"layer_norm: last dimension must be non-zero, got shape {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature size {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return Tensor._from_op(out, (x, gain, bias), backward, "layer_norm")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over all leading positions.

    ``logits`` is ``[..., V]`` and ``targets`` holds integer class ids with
    shape ``logits.shape[:-1]``.
    """
    targets = np.asarray(targets)
    if logits.ndim < 1:
        raise DimensionError("softmax_cross_entropy: logits need a class axis")
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"softmax_cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    flat_t = targets.reshape(-1)
    if flat_t.size and (flat_t.min() < 0 or flat_t.max() >= v):
        bad = flat_t[(flat_t < 0) | (flat_t >= v)][0]
        raise IndexError(f"softmax_cross_entropy: target {int(bad)} outside [0, {v})")
    z = logits.data.reshape(-1, v)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sums = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    nll = np.log(sums[:, 0]) - shifted[rows, flat_t]
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)
    shape = logits.shape

    def backward(g):
        p = e / sums
        p[rows, flat_t] -= 1.0
        p *= g / n
        return (p.reshape(shape),)

    return Tensor._from_op(loss, (logits,), backward, "cross_entropy")
