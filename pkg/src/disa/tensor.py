"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every primitive that sees an input with
``requires_grad`` records its parents and a local gradient rule on the output
tensor.  ``backward`` walks the recorded nodes in reverse topological order
and then releases them, so a second call on the same root is rejected.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
KL_FLOOR = 1e-12
_TINY = np.finfo(np.float64).tiny
_GELU_K = math.sqrt(2.0 / math.pi)

PRIMITIVES = (
    "add", "sub", "mul", "scale", "matmul", "transpose", "concat", "slice",
    "mean", "sum", "exp", "log", "sqrt", "power", "gelu", "layer_norm",
    "embedding", "softmax", "reshape", "abs", "clamp_min",
)

_grad_enabled = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], rule: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._rule = rule if track else None
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
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                                   _unbroadcast(g, sb) if b.requires_grad else None), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._node(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._node(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                                   _unbroadcast(g * ad, bd.shape) if b.requires_grad else None), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._node(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-D and shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._node(ad @ bd, (a, b), rule, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 axes, got shape {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return Tensor._node(np.transpose(a.data, axes), (a,),
                        lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None
    return Tensor._node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return Tensor._node(np.concatenate([t.data for t in ts], axis=ax), ts,
                        lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {exc}") from None
    src = a.shape

    def rule(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.array(out, dtype=np.float64), (a,), rule, "slice")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64),
                        (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    n = a.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return Tensor._node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64),
                        (a,), rule, "mean")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return Tensor._node(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    x = a.data
    return Tensor._node(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"sqrt: non-positive input (min {a.data.min():.3g})")
    y = np.sqrt(a.data)
    return Tensor._node(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if not p.is_integer() and np.any(a.data <= 0):
        raise DomainError(f"power: non-positive base for exponent {p}")
    x = a.data
    return Tensor._node(x ** p, (a,), lambda g: (g * p * x ** (p - 1.0),), "power")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return Tensor._node(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes where the input is not below the floor."""
    a = as_tensor(a)
    keep = a.data >= floor
    return Tensor._node(np.maximum(a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_K * (x + 0.044715 * (x * x * x)))
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return Tensor._node(0.5 * x * (1.0 + t), (a,), lambda g: (g * dy,), "gelu")


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._node(xhat, (a,), rule, "layer_norm")


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table shape {table.shape}")
    src = table.shape

    def rule(g):
        full = np.zeros(src)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return Tensor._node(table.data[ids], (table,), rule, "embedding")


def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """exp(a/τ) normalised along ``axis`` with max-subtraction."""
    a = as_tensor(a)
    if temperature <= 0:
        raise DomainError(f"softmax: temperature must be positive, got {temperature}")
    if a.size == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax: empty input")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    inv_t = 1.0 / temperature

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) * inv_t,)

    return Tensor._node(y, (a,), rule, "softmax")


# composites


def normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    if np.any(sq == 0):
        raise DomainError("normalize: zero-norm vector (degenerate embedding)")
    return mul(a, power(sum_(mul(a, a), axis=axis, keepdims=True), -0.5))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two equal-length vectors (last axis)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"cosine_similarity: length mismatch {a.shape} and {b.shape}")
    return sum_(mul(normalize(a), normalize(b)), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosines between rows of ``a`` (..., n, d) and rows of ``b`` (m, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_matrix: width mismatch {a.shape} and {b.shape}")
    squeeze = a.ndim == 1
    if squeeze:
        a = reshape(a, (1, a.shape[0]))
    out = matmul(normalize(a), transpose(normalize(b)))
    return reshape(out, (b.shape[0],)) if squeeze else out


def kl_divergence(p, q, axis: int = -1, floor: float = KL_FLOOR) -> Tensor:
    """Σ p log(p/q) along ``axis`` with 0·log 0 = 0 and q floored at ``floor``."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: length mismatch {p.shape} and {q.shape}")
    terms = mul(p, sub(log(clamp_min(p, _TINY)), log(clamp_min(q, floor))))
    # removes sub-ulp negatives; the exact value is non-negative
    return clamp_min(sum_(terms, axis=axis), 0.0)


def log_softmax_nll(logits, target: int | np.ndarray, temperature: float) -> Tensor:
    """-log softmax(logits/τ)[target] along the last axis; per-row for batched input."""
    probs = softmax(logits, axis=-1, temperature=temperature)
    target = np.asarray(target, dtype=np.int64)
    if probs.ndim == 1:
        return scale(log(clamp_min(probs[int(target)], _TINY)), -1.0)
    picked = probs[np.arange(probs.shape[0]), target]
    return scale(log(clamp_min(picked, _TINY)), -1.0)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from a scalar root."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.op == "released":
        raise RuntimeError("backward: graph already consumed; rebuild it with a fresh forward pass")
    if not root.requires_grad:
        raise RuntimeError("backward: root does not depend on any tensor requiring grad")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._rule = None
            node.op = "released"


def parameters_checksum(params: Iterable[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for arr in params:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
