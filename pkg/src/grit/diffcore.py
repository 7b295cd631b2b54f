"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the primitives the recommender needs are provided. Every primitive
returns a new :class:`Tensor` that remembers its parents and a closure that
maps the output adjoint to input adjoints; :func:`backward` replays those
closures in reverse topological order.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "meta")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.meta: dict = {}

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str, **meta) -> "Tensor":
        """Register the result of a primitive.

        ``backward`` receives the output adjoint and returns one adjoint (or
        None) per parent, in order.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        out.meta = meta
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; only scalar divisors")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = as_tensor(a)
        return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,), "scale")
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad * bd, (a, b), back, "mul")


def clamp_min(x: Tensor, bound: float) -> Tensor:
    if not math.isfinite(bound):
        raise ValueError(f"clamp_min: bound must be finite, got {bound}")
    # zero subgradient on the boundary itself
    keep = x.data > bound
    out = np.where(keep, x.data, np.asarray(bound, dtype=x.dtype))
    return Tensor.from_op(out, (x,), lambda g: (g * keep,), "clamp_min")


# --------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # stacked rows times one matrix: a single flat GEMM each way
        k, n = bd.shape
        flat_a = ad.reshape(-1, k)

        def back_rows(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = flat_a.T @ g2 if b.requires_grad else None
            return ga, gb

        out = (flat_a @ bd).reshape(ad.shape[:-1] + (n,))
        return Tensor.from_op(out, (a, b), back_rows, "matmul")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), back, "matmul")


bmm = matmul


def transpose(x: Tensor, a1: int = -1, a2: int = -2) -> Tensor:
    """Swap two axes (the trailing pair by default)."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {x.shape}")
    return Tensor.from_op(
        np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "transpose"
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            p != q for i, (p, q) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor.from_op(
        np.concatenate([x.data for x in xs], axis=axis), xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat",
    )


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding: ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: ids out of range [0, {n})")
    flat = ids.reshape(-1)

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, flat, g.reshape(len(flat), -1))
        return (out,)

    return Tensor.from_op(table.data[ids], (table,), back, "embedding")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


# --------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean and broadcastable to ``x``; False entries act as an
    additive -inf and get exactly zero probability. Each row needs at least
    one True entry.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return Tensor.from_op(p, (x,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor.from_op(out, (x, gain, bias), back, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def back(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return Tensor.from_op(out.astype(xd.dtype, copy=False), (x,), back, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity (same object) outside training."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout: training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout", rate=rate)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, allowed: np.ndarray | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows of a 2-D logit matrix.

    ``allowed`` (boolean, same shape) restricts the normalising set; the
    target column is always kept.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    rows = np.arange(n)
    z = logits.data
    if allowed is not None:
        allowed = np.array(allowed, dtype=bool, copy=True)
        allowed[rows, targets] = True
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp_t = z[rows, targets] - np.log(s[:, 0])
    loss = -logp_t.mean()

    def back(g):
        p = e / s
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_xent")


# --------------------------------------------------------------------------
# graph traversal


def record(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of the non-leaf nodes feeding ``root``."""
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
    return [n for n in order if n._backward is not None]


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    if root._backward is None:
        raise RuntimeError("backward: tensor has no recorded provenance")
    if seed is None:
        if root.data.size != 1:
            raise ShapeError(f"backward: non-scalar root {root.shape} needs an explicit seed")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"backward: seed {seed.shape} does not match root {root.shape}")

    nodes = record(root)
    adj: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                adj[key] = adj[key] + pg if key in adj else pg


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is perturbed in place, so ``f`` may ignore its argument and close
    over ``x`` (handy when ``x`` is a model parameter). ``coords`` limits the
    check to the given flat indices.
    """
    if x.dtype == np.float64 and not 1e-6 <= h <= 1e-4:
        raise ValueError(f"finite_difference_check: step {h} outside [1e-6, 1e-4]")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if any(n.op == "dropout" for n in record(y)):
        raise ValueError("finite_difference_check: f is stochastic (dropout active)")
    if float(f(x).data) != float(y.data):
        raise ValueError("finite_difference_check: f is not deterministic")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for k in idx:
        orig = flat[k]
        flat[k] = orig + h
        up = float(f(x).data)
        flat[k] = orig - h
        down = float(f(x).data)
        flat[k] = orig
        num = (up - down) / (2.0 * h)
        err = abs(analytic.reshape(-1)[k] - num) / (abs(num) + 1e-8)
        worst = max(worst, err)
    x.grad = None
    return worst


class SeedStreams:
    """One master seed fanned out to independent generators by purpose."""

    PURPOSES = ("init", "dropout", "shuffle")

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(self.PURPOSES))
        self._gens = {p: np.random.Generator(np.random.PCG64(s)) for p, s in zip(self.PURPOSES, children)}

    def __getitem__(self, purpose: str) -> np.random.Generator:
        return self._gens[purpose]


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
