"""Dense float64 kernel: a small reverse-mode tape, MLP, attention, Adam, FD checks.

Every trainable computation in the package is written against :class:`Tensor`.
Arrays are float64 internally; storage precision (float32) is only applied when
parameters are serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Large negative logit used for masked attention keys. exp() of it after
# max-subtraction underflows to exactly 0.
MASK_LOGIT = -1e30


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), backward)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (out,)

    return _node(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), backward)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def row_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward)


def l2_norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the zero vector is 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data**2).sum(axis=axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(np.where(n > 0, g / safe, 0.0), axis) * a.data,)

    return _node(n, (a,), backward)


def mean_pool_rows(a, mask=None) -> Tensor:
    """Mean over the token axis (-2). ``mask`` (..., n) restricts which rows count."""
    a = as_tensor(a)
    if mask is None:
        return tmean(a, axis=-2)
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ShapeError("mean_pool_rows: empty mask row")
    return tsum(a * m[..., None], axis=-2) / count


def cosine_similarity(a, b) -> np.ndarray:
    """Cosine similarity of each row of ``a`` against each row of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine width mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_similarity of a zero-norm vector")
    return (a @ b.T) / np.outer(na, nb)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "row_softmax": row_softmax,
    "l2_norm": l2_norm,
    "mean_pool_rows": mean_pool_rows,
    "cosine_similarity": cosine_similarity,
    "relu": relu,
    "sigmoid": sigmoid,
}


def primitives(kind: str, *inputs):
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ParamStore:
    """Named parameters with Adam moment buffers.

    Names follow ``module.layer.weight`` so a snapshot maps one-to-one onto
    container blob names.
    """

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.params.items()
        }

    def numel(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for k, t in self.params.items():
            out.add(k, t.data.copy())
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in self.names()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for k in sorted(state):
            store.add(k, state[k])
        return store


def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(store: ParamStore, rng: np.random.Generator, prefix: str, n_in: int, n_out: int, bias: bool = True) -> None:
    store.add(f"{prefix}.weight", init_uniform(rng, n_in, (n_in, n_out)))
    if bias:
        store.add(f"{prefix}.bias", np.zeros(n_out))


def add_mlp(store: ParamStore, rng: np.random.Generator, prefix: str, sizes: Sequence[int]) -> None:
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        add_linear(store, rng, f"{prefix}.{i}", n_in, n_out)


def add_attention(store: ParamStore, rng: np.random.Generator, prefix: str, d: int, d_k: int | None = None) -> None:
    d_k = d if d_k is None else d_k
    for name, (n_in, n_out) in {"q": (d, d_k), "k": (d, d_k), "v": (d, d), "o": (d, d)}.items():
        store.add(f"{prefix}.{name}", init_uniform(rng, n_in, (n_in, n_out)))


def linear(store: ParamStore, prefix: str, x) -> Tensor:
    w = store[f"{prefix}.weight"]
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {w.shape[0]}")
    out = matmul(x, w)
    b = f"{prefix}.bias"
    return out + store[b] if b in store else out


def mlp_layers(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.weight" in store:
        n += 1
    return n


def mlp_forward(store: ParamStore, prefix: str, x) -> Tensor:
    """Affine layers ``prefix.0 .. prefix.{n-1}`` with ReLU between them; last layer linear."""
    n = mlp_layers(store, prefix)
    if n == 0:
        raise KeyError(f"no MLP layers under {prefix!r}")
    h = as_tensor(x)
    squeeze = h.ndim == 1
    if squeeze:
        h = reshape(h, (1, -1))
    for i in range(n):
        h = linear(store, f"{prefix}.{i}", h)
        if i < n - 1:
            h = relu(h)
    return reshape(h, (-1,)) if squeeze else h


def self_attention(store: ParamStore, prefix: str, x, key_mask=None) -> Tensor:
    """Single-head scaled dot-product self-attention over the token axis (-2).

    ``key_mask`` (..., n) of 0/1 hides keys from every query; at least one key
    per row must stay visible.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("self_attention expects (..., n, d)")
    wq, wk, wv, wo = (store[f"{prefix}.{n}"] for n in "qkvo")
    if x.shape[-1] != wq.shape[0]:
        raise ShapeError(f"{prefix}: token width {x.shape[-1]} != {wq.shape[0]}")
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(wq.shape[1]))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if not np.all(km.any(axis=-1)):
            raise ShapeError("self_attention: a row has no visible keys")
        logits = logits + np.where(km, 0.0, MASK_LOGIT)[..., None, :]
    weights = row_softmax(logits, axis=-1)
    return matmul(weights, v) @ wo


# --------------------------------------------------------------------------
# optimization and verification


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store[name].shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        store[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``max_coords`` samples that many coordinates per parameter instead of
    sweeping all of them.
    """
    params.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    loss.backward()
    analytic = params.grads()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names if names is not None else params.names():
        p = params[name].data
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params).item()
            flat[i] = orig - h
            fm = loss_fn(params).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    params.zero_grad()
    return worst
