"""Minimal reverse-mode autodiff kernel on float64 numpy arrays.

Covers exactly what the two policies need: dense linear maps, relu/gelu,
layer normalization, softmax, scaled-dot-product attention, concatenation,
embedding lookup, and mean-squared-error losses, plus an AdamW optimizer and
a schema-versioned checkpoint container.

All arithmetic is 64-bit. Shapes are explicit: the only implicit broadcast is
bias addition over the last axis and expanding a shared 2-D parameter across a
batch via expand_rows.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose_last",
    "add_bias",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "attention",
    "concat",
    "reshape",
    "stack_tokens",
    "embedding",
    "expand_rows",
    "linear",
    "mse_loss",
    "sum_all",
    "backward",
    "ParamSet",
    "adam_step",
    "save_params",
    "load_params",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None):
        v = np.asarray(values, dtype=np.float64)
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own copy; g may be shared
    else:
        t.grad += g


def _check_finite(t: Tensor, what: str) -> None:
    # a single reduction: the sum is non-finite iff some entry is nan/inf
    # (values in this kernel are far from the float64 overflow range)
    if not np.isfinite(t.values.sum()):
        raise FloatingPointError(f"non-finite input to {what}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values, parents=(a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values - b.values, parents=(a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values, parents=(a, b))

    def bwd(g):
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.values * s, parents=(a,))

    def bwd(g):
        _accum(a, g * s)

    out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D x 2-D, batched 3-D x 3-D, and batched 3-D x shared 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise ValueError(f"matmul batch mismatch: {av.shape} @ {bv.shape}")
    out = Tensor(np.matmul(av, bv), parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(bv, -1, -2)))
        if b.requires_grad:
            if av.ndim == 3 and bv.ndim == 2:
                k, m = bv.shape
                _accum(b, av.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                _accum(b, np.matmul(np.swapaxes(av, -1, -2), g))

    out._backward = bwd
    return out


def transpose_last(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.values, -1, -2), parents=(a,))

    def bwd(g):
        _accum(a, np.swapaxes(g, -1, -2))

    out._backward = bwd
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes (the one allowed broadcast)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias shape mismatch: {x.shape} + {b.shape}")
    out = Tensor(x.values + b.values, parents=(x, b))

    def bwd(g):
        _accum(x, g)
        if b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    out._backward = bwd
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    out = Tensor(np.where(mask, x.values, 0.0), parents=(x,))

    def bwd(g):
        _accum(x, g * mask)

    out._backward = bwd
    return out


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximate GELU; the backward differentiates the same expression."""
    x = _as_tensor(x)
    v = x.values
    v2 = v * v
    inner = _GELU_C * (v + _GELU_A * v2 * v)
    th = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + th), parents=(x,))

    def bwd(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
        _accum(x, g * (0.5 * (1.0 + th) + 0.5 * v * sech2 * d_inner))

    out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.values + bias.values, parents=(x, gain, bias))

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.values
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    out._backward = bwd
    return out


def softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, parents=(x,))

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    out._backward = bwd
    return out


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention dim mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention key/value mismatch: {k.shape} vs {v.shape}")
    d = q.shape[-1]
    logits = scale(matmul(q, transpose_last(k)), 1.0 / np.sqrt(d))
    return matmul(softmax(logits), v)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    out._backward = bwd
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.values.reshape(shape), parents=(x,))

    def bwd(g):
        _accum(x, g.reshape(x.values.shape))

    out._backward = bwd
    return out


def stack_tokens(tensors: list[Tensor]) -> Tensor:
    """Stack (B, d) tensors into a (B, n, d) token sequence."""
    b, d = tensors[0].shape
    return concat([reshape(t, (b, 1, d)) for t in tensors], axis=1)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a (n, d) table; gradient scatter-adds into rows."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.values[ids], parents=(table,))

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, ids, g)

    out._backward = bwd
    return out


def expand_rows(x: Tensor, batch: int) -> Tensor:
    """Tile a (n, d) tensor to (batch, n, d); gradient sums over the batch."""
    x = _as_tensor(x)
    out = Tensor(np.broadcast_to(x.values, (batch,) + x.values.shape).copy(), parents=(x,))

    def bwd(g):
        _accum(x, g.sum(axis=0))

    out._backward = bwd
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). The workhorse op; checks input finiteness."""
    x = _as_tensor(x)
    _check_finite(x, "linear")
    out = matmul(x, w)
    if b is not None:
        out = add_bias(out, b)
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred = _as_tensor(pred)
    tv = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tv.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {tv.shape}")
    diff = pred.values - tv
    out = Tensor(np.mean(diff * diff), parents=(pred,))
    if not np.isfinite(out.values):
        raise FloatingPointError("non-finite loss")

    def bwd(g):
        _accum(pred, g * (2.0 / diff.size) * diff)

    out._backward = bwd
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.values.sum(), parents=(x,))

    def bwd(g):
        _accum(x, np.full_like(x.values, g))

    out._backward = bwd
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad tensor."""
    if loss.values.ndim != 0:
        raise GraphError("backward requires a scalar loss")
    if loss._consumed:
        raise GraphError("backward called twice without re-running forward")
    loss._consumed = True
    # iterative topological order (graphs can be deep during long chunk decodes)
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class ParamSet:
    """Named parameter tensors plus AdamW optimizer state."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.m1: dict[str, np.ndarray] = {}
        self.m2: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, values) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self.tensors[name] = t
        self.m1[name] = np.zeros_like(t.values)
        self.m2[name] = np.zeros_like(t.values)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def copy(self) -> "ParamSet":
        other = ParamSet()
        for name, t in self.tensors.items():
            other.add(name, t.values.copy())
            other.m1[name] = self.m1[name].copy()
            other.m2[name] = self.m2[name].copy()
        other.step_count = self.step_count
        return other


def adam_step(
    params: ParamSet,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update (decoupled weight decay) using the stored gradients."""
    if lr <= 0.0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            raise GraphError(f"parameter {name!r} has no gradient")
        m1 = params.m1[name]
        m2 = params.m2[name]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * (g * g)
        update = (m1 / c1) / (np.sqrt(m2 / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.values
        p.values -= lr * update


_CKPT_SCHEMA = 1


def save_params(params: ParamSet, path) -> None:
    arrays = {"__schema__": np.array(_CKPT_SCHEMA), "__step__": np.array(params.step_count)}
    for name, t in params.tensors.items():
        arrays[f"p::{name}"] = t.values
        arrays[f"m1::{name}"] = params.m1[name]
        arrays[f"m2::{name}"] = params.m2[name]
    np.savez(path, **arrays)


def load_params(path) -> ParamSet:
    with np.load(path) as data:
        if int(data["__schema__"]) != _CKPT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema in {path}")
        params = ParamSet()
        for key in data.files:
            if key.startswith("p::"):
                name = key[3:]
                params.add(name, data[key])
                params.m1[name] = data[f"m1::{name}"].copy()
                params.m2[name] = data[f"m2::{name}"].copy()
        params.step_count = int(data["__step__"])
    return params
