"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` orders the recorded graph
topologically, replays it in reverse and then drops the graph, so each
optimisation step builds a fresh tape.

Only the kernels needed by a small decoder-only transformer are provided.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float64 array that can take part in a computation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # --------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        Only leaves (tensors created directly, not by an op) keep a ``grad``
        buffer; intermediate gradients live in a local table and are dropped.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = self._topological_order()
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                node._parents = ()
                node._backward = None

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    k = np.sqrt(2.0 / np.pi)
    inner = k * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _make(out, (a,), backward)


# ------------------------------------------------------------------ reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -------------------------------------------------------------- shape kernels
def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def concat_rows(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Stack tensors along the sequence axis (second to last by default)."""
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from exc
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, parts, backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[b, index[b]]`` for a (B, m, d) tensor; returns (B, d)."""
    index = np.asarray(index, dtype=np.int64)
    batch = np.arange(a.shape[0])
    out = a.data[batch, index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[batch, index] = g
        return (full,)

    return _make(out, (a,), backward)


def select(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Pick entries of ``a`` along ``axis`` (duplicates allowed)."""
    index = np.asarray(index, dtype=np.int64)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return select(table, ids, axis=0)


# ------------------------------------------------------------------ linear ops
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# ------------------------------------------------------- normalisation & probs
def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [a]
    out = xhat
    if weight is not None:
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g * weight.data if weight is not None else g
        n = x.shape[-1]
        da = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                        - xhat * (gx * xhat).sum(-1, keepdims=True))
        grads = [da]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _make(out, parents, backward)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _check_axis(a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    s = _softmax_np(a.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis(a, axis)
    ls = _log_softmax_np(a.data, axis)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _make(ls, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    out = np.where(mask, value, a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0.0, g),))


# ----------------------------------------------------------------------- losses
def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    ``logits`` is (C,) with an integer target, or (B, C) with one target per row.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    n_classes = logits.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise IndexError(f"target {target.tolist()} outside [0, {n_classes})")
    squeeze = logits.ndim == 1
    x = logits.data[None, :] if squeeze else logits.data
    t = target.reshape(-1)
    if x.shape[0] != t.shape[0]:
        raise ShapeError(f"{x.shape[0]} logit rows vs {t.shape[0]} targets")
    ls = _log_softmax_np(x, -1)
    rows = np.arange(x.shape[0])
    nll = -ls[rows, t]
    if reduction == "mean":
        value, w = nll.mean(), 1.0 / x.shape[0]
    elif reduction == "sum":
        value, w = nll.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        d = np.exp(ls)
        d[rows, t] -= 1.0
        d *= w * g
        return (d[0] if squeeze else d,)

    return _make(np.asarray(value), (logits,), backward)


def kl_divergence(p_logits: Tensor, q_logits, reduction: str = "mean") -> Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)) along the last axis.

    The ``q`` side is a fixed reference: no gradient ever reaches it.
    Rows are averaged (``mean``) or summed.
    """
    p_logits = _as_tensor(p_logits)
    q = q_logits.data if isinstance(q_logits, Tensor) else np.asarray(q_logits, dtype=DTYPE)
    if p_logits.shape != q.shape:
        raise ShapeError(f"KL shape mismatch: {p_logits.shape} vs {q.shape}")
    lp = _log_softmax_np(p_logits.data, -1)
    lq = _log_softmax_np(q, -1)
    p = np.exp(lp)
    diff = lp - lq
    per_row = (p * diff).sum(axis=-1)
    if reduction == "mean":
        value, w = per_row.mean(), 1.0 / max(per_row.size, 1)
    elif reduction == "sum":
        value, w = per_row.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        # d/dz_k sum_i p_i (lp_i - lq_i) = p_k (diff_k - E_p[diff])
        inner = diff - per_row[..., None]
        return (g * w * p * inner,)

    return _make(np.asarray(value), (p_logits,), backward)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain array softmax, handy outside of any tape."""
    return _softmax_np(np.asarray(x, dtype=DTYPE), axis)
