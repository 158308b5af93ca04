"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient::

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), y)
    tape.backward(loss)

Outside a tape, operations just compute values.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from tabbench import kernels

TRAIN = "train"
EVAL = "eval"


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: object  # callable(upstream) -> tuple of input grads (None to skip)


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    _stack = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def backward(self, loss: Tensor):
        backward(self, loss)


def _active_tape():
    return Tape._stack[-1] if Tape._stack else None


def _record(inputs, out: Tensor, rule):
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(tuple(inputs), out, rule))
    return out


def backward(tape: Tape, loss: Tensor):
    """Reverse sweep over ``tape``; leaf gradients accumulate across calls."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever remains belongs to leaves (tensors not produced on this tape)
    produced = {id(n.output) for n in tape.nodes}
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            key = id(t)
            if key in grads and key not in produced and key not in seen:
                seen.add(key)
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]
    if id(loss) in grads and id(loss) not in produced:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


add_broadcast = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(
        (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _record((x,), out, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record((x,), out, lambda g: (g * mask,))


def dropout(x: Tensor, p: float, mode: str, rng=None) -> Tensor:
    """Inverted dropout; the identity (same object) in eval mode or at p=0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode != TRAIN or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * keep)
    return _record((x,), out, lambda g: (g * keep,))


# ----------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """Matrix product; a leading batch stack on ``a`` (and optionally ``b``) is allowed."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one 2-D product instead of numpy's per-matrix loop over the stack
        out = Tensor((a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[1]))
    else:
        out = Tensor(np.matmul(a.data, b.data))

    def rule(g):
        ga = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record((a, b), out, rule)


def concat_cols(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(tuple(tensors), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record((x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))
    return _record((x,), out, lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    return _record((x,), out, lambda g: (_unbroadcast(g, x.shape),))


def getitem(x: Tensor, key) -> Tensor:
    """NumPy indexing; rows picked more than once by an index array accumulate gradient."""
    out = Tensor(x.data[key])
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def rule(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _record((x,), out, rule)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.mean(axis=axis))
    n = x.data.size if axis is None else x.shape[axis]

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / n,)

    return _record((x,), out, rule)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record((x,), out, rule)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding index out of range for table with {v} rows")
    out = Tensor(table.data[idx])

    def rule(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record((table,), out, rule)


# -------------------------------------------------------------- normalization

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def zeros(cls, d: int) -> "BatchNormState":
        return cls(np.zeros(d), np.ones(d))


def batch_norm(x: Tensor, state: BatchNormState, gamma: Tensor, beta: Tensor, mode: str) -> Tensor:
    """Per-column batch normalization over the rows of ``x`` (m x d)."""
    if mode == TRAIN:
        m = x.shape[0]
        if m < 2:
            raise DegenerateBatchError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        # running variance tracks the unbiased estimate
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var * m / (m - 1)
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data)

    def rule(g):
        gbeta = g.sum(axis=0)
        ggamma = (g * xhat).sum(axis=0)
        gxhat = g * gamma.data
        if mode == TRAIN:
            m = x.shape[0]
            gx = inv_std / m * (m * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _record((x, gamma, beta), out, rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis of ``x``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data)
    d = x.shape[-1]

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv_std / d * (
            d * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _record((x, gamma, beta), out, rule)


# ------------------------------------------------------------ softmax & loss

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    s = _softmax(x.data)
    out = Tensor(s)
    return _record((x,), out, lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, p: float = 0.0, mode: str = EVAL,
              rng=None, record: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over (m, t, d) inputs as one tape node.

    Heads are ``n_heads`` contiguous slices of width ``d // n_heads``. Attention
    weights are dropped out with probability ``p`` in train mode; the
    pre-dropout weights are appended to ``record`` when given.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention needs equal (m, t, d) inputs, got {q.shape}, {k.shape}, {v.shape}")
    m, t, d = q.shape
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    keep = None
    if mode == TRAIN and p > 0.0:
        keep = (rng.random((m, n_heads, t, t)) >= p) / (1.0 - p)
    a, o = kernels.attention_forward(q.data, k.data, v.data, n_heads, keep)
    if record is not None:
        record.append(a)
    out = Tensor(o)

    def rule(g):
        return kernels.attention_backward(g, q.data, k.data, v.data, a, n_heads, keep)

    return _record((q, k, v), out, rule)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if labels.shape != (m,) or (m and (labels.min() < 0 or labels.max() >= c)):
        raise ShapeError("labels must be a length-m vector of class indices < c")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_z - z[np.arange(m), labels]))
    out = Tensor(np.array(loss))

    def rule(g):
        p = np.exp(z - log_z[:, None])
        p[np.arange(m), labels] -= 1.0
        return (p * (g / m),)

    return _record((logits,), out, rule)


# ------------------------------------------------------------- parameter set

class ParameterSet:
    """Named trainable tensors plus a per-tensor weight-decay exemption flag.

    ``kind`` is one of ``weight``, ``bias``, ``norm``, ``embedding``.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.kinds: dict[str, str] = {}
        self.decay_exempt: dict[str, bool] = {}

    def add(self, name: str, value, kind: str = "weight", decay_exempt: bool | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        self.kinds[name] = kind
        self.decay_exempt[name] = kind != "weight" if decay_exempt is None else decay_exempt
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            self._params[k].data = np.array(v, dtype=np.float64)

    def to_records(self) -> list[dict]:
        return [
            {"name": k, "shape": list(t.shape), "values": t.data.ravel().tolist()}
            for k, t in self._params.items()
        ]
