"""Tape-based reverse-mode differentiation over numpy arrays.

Only the handful of operations the query models need are provided.  Forward
operations executed inside an active :class:`Tape` are recorded; outside a
tape they run eagerly with no bookkeeping, which is what the decoders use at
inference time.

    with Tape() as tape:
        loss = model.loss(batch)
    grads = tape.backward(loss, model.parameters())
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_ACTIVE: list["Tape | None"] = []
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient stops being finite."""


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new constants and parameters."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Run operations eagerly without recording, even inside a tape."""
    _ACTIVE.append(None)
    try:
        yield
    finally:
        _ACTIVE.pop()


def _recording() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)


def Parameter(data, name: str | None = None, dtype=None) -> Tensor:
    """A leaf tensor that accumulates gradients, stored in ``dtype`` or the default precision."""
    arr = np.array(data, dtype=dtype or _DTYPE)
    return Tensor(arr, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


class _Node:
    __slots__ = ("outputs", "parents", "backward")

    def __init__(self, outputs, parents, backward):
        self.outputs = outputs
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape can be differentiated once.  Backward walks the recorded nodes in
    reverse order, visiting each exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._entered = False
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise TapeError("tape already differentiated; record a new forward pass")
        self._entered = True
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def record(self, outputs, parents, backward) -> None:
        self.nodes.append(_Node(outputs, parents, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
        """Accumulate d(loss)/d(param) into ``param.grad`` and return the grads.

        Parameters that do not influence the loss receive a zero gradient.
        """
        if not self._entered or loss is None:
            raise TapeError("backward called before any forward pass was recorded")
        if self._consumed:
            raise TapeError("backward already run on this tape")
        self._consumed = True
        params = list(params)
        loss = as_tensor(loss)
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            outs = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in outs):
                continue
            outs = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, outs)]
            in_grads = node.backward(*outs)
            for parent, g in zip(node.parents, in_grads):
                if g is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        self.nodes = []
        result = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            else:
                g = np.asarray(g, dtype=p.data.dtype).reshape(p.data.shape)
            if CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            p.grad = g if p.grad is None else p.grad + g
            result.append(g)
        return result


def _check(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    tape = _recording()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record((out,), tuple(parents), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(data, tensors, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(data, tensors, backward, "stack")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id outside embedding table")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


# ------------------------------------------------------------------- softmax

def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    p = np.exp(_log_softmax(a.data, axis))

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    lp = _log_softmax(a.data, axis)

    def backward(g):
        return (g - np.exp(lp) * g.sum(axis=axis, keepdims=True),)

    return _make(lp, (a,), backward, "log_softmax")


def softmax_cross_entropy(logits, targets, weights=None):
    """Weighted mean of ``-log softmax(logits)[target]`` over rows.

    Returns ``(loss, probabilities)``; the probabilities are plain arrays.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ValueError("one target per row required")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target index outside vocabulary")
    w = np.ones(n, dtype=logits.data.dtype) if weights is None else np.asarray(weights, logits.data.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must have positive sum")
    lp = _log_softmax(logits.data, -1)
    probs = np.exp(lp)
    nll = -lp[np.arange(n), targets]
    loss = np.asarray((w * nll).sum() / total, dtype=logits.data.dtype)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (w / total)[:, None] * g,)

    return _make(loss, (logits,), backward, "softmax_cross_entropy"), probs


def log_prob_of(logits, targets) -> Tensor:
    """Per-row ``log softmax(logits)[target]``, shape ``(N,)``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    lp = _log_softmax(logits.data, -1)
    rows = np.arange(n)

    def backward(g):
        d = -np.exp(lp) * g[:, None]
        d[rows, targets] += g
        return (d,)

    return _make(lp[rows, targets], (logits,), backward, "log_prob_of")


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=logits.data.dtype).reshape(logits.shape)
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return ((_sigmoid(x) - y) * g / n,)

    return _make(np.asarray(per.mean(), dtype=x.dtype), (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------- recurrent

def lstm_step(x, h_prev, c_prev, weight, bias):
    """One LSTM cell update.

    ``weight`` has shape ``(in + hidden, 4 * hidden)`` with gate blocks in the
    order input, forget, candidate, output.  Returns ``(h, c)``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    hid = h_prev.shape[-1]
    if weight.shape != (x.shape[-1] + hid, 4 * hid) or bias.shape != (4 * hid,):
        raise ValueError(
            f"lstm weight {weight.shape} / bias {bias.shape} do not fit input {x.shape[-1]}, hidden {hid}")
    if c_prev.shape != h_prev.shape:
        raise ValueError("cell and hidden state shapes differ")
    xh = np.concatenate([x.data, h_prev.data], axis=-1)
    z = xh @ weight.data + bias.data
    i = _sigmoid(z[..., :hid])
    f = _sigmoid(z[..., hid:2 * hid])
    gc = np.tanh(z[..., 2 * hid:3 * hid])
    o = _sigmoid(z[..., 3 * hid:])
    c = f * c_prev.data + i * gc
    tc = np.tanh(c)
    h = o * tc
    _check(h, "lstm_step")
    _check(c, "lstm_step")
    h_out, c_out = Tensor(h), Tensor(c)
    parents = (x, h_prev, c_prev, weight, bias)
    tape = _recording()
    if tape is not None and any(p.requires_grad for p in parents):
        h_out.requires_grad = c_out.requires_grad = True

        def backward(gh, gcell):
            dc = gcell + gh * o * (1 - tc * tc)
            dz = np.concatenate([
                dc * gc * i * (1 - i),
                dc * c_prev.data * f * (1 - f),
                dc * i * (1 - gc * gc),
                gh * tc * o * (1 - o),
            ], axis=-1)
            dxh = dz @ weight.data.T
            dw = xh.reshape(-1, xh.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            db = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            nx = x.shape[-1]
            return dxh[..., :nx], dxh[..., nx:], dc * f, dw, db

        tape.record((h_out, c_out), parents, backward)
    return h_out, c_out


def masked_update(new: Tensor, old: Tensor, mask: np.ndarray | None) -> Tensor:
    """``mask * new + (1 - mask) * old`` with a per-row 0/1 mask."""
    if mask is None:
        return new
    m = np.asarray(mask, dtype=new.data.dtype).reshape(-1, 1)
    if m.all():
        return new
    return add(mul(new, m), mul(old, 1.0 - m))


def bilstm_encode(inputs: Sequence, fwd: tuple, bwd: tuple, hidden: int, mask=None):
    """Run forward and backward LSTMs over a sequence.

    ``inputs`` is a list of ``(B, E)`` tensors, ``fwd``/``bwd`` are
    ``(weight, bias)`` pairs and ``mask`` an optional ``(B, S)`` 0/1 array
    marking real tokens (padding must be on the right).  Returns the list of
    per-position outputs ``concat(h_fwd_t, h_bwd_t)`` together with the final
    forward state (last real token) and the backward state at position 0.
    """
    if len(inputs) == 0:
        raise ValueError("cannot encode an empty sequence")
    batch = inputs[0].shape[0]
    dtype = inputs[0].data.dtype
    cols = [None] * len(inputs) if mask is None else [mask[:, t] for t in range(len(inputs))]

    h = c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    fwd_out = []
    for t, x in enumerate(inputs):
        hn, cn = lstm_step(x, h, c, *fwd)
        h, c = masked_update(hn, h, cols[t]), masked_update(cn, c, cols[t])
        fwd_out.append(h)
    h_last = h

    h = c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    bwd_out = [None] * len(inputs)
    for t in range(len(inputs) - 1, -1, -1):
        hn, cn = lstm_step(inputs[t], h, c, *bwd)
        h, c = masked_update(hn, h, cols[t]), masked_update(cn, c, cols[t])
        bwd_out[t] = h

    outputs = [concat([f, b], axis=-1) for f, b in zip(fwd_out, bwd_out)]
    return outputs, h_last, bwd_out[0]


def additive_attention(query, keys, values, w_query, v, mask_bias=None):
    """Alignment-model attention.

    ``keys`` are the pre-projected encoder states ``(B, S, A)`` (bias folded
    in), ``values`` the raw encoder states ``(B, S, D)``, ``query`` the decoder
    state ``(B, H)``.  Returns ``(context (B, D), weights (B, S))``.
    """
    keys, values = as_tensor(keys), as_tensor(values)
    if values.shape[1] == 0:
        raise ValueError("attention over an empty encoder sequence")
    b, s, _ = values.shape
    q = matmul(query, w_query)
    energy = tanh(add(keys, reshape(q, (b, 1, q.shape[-1]))))
    scores = reshape(matmul(energy, v), (b, s))
    if mask_bias is not None:
        scores = add(scores, mask_bias)
    weights = softmax(scores, axis=-1)
    context = tensor_sum(mul(reshape(weights, (b, s, 1)), values), axis=1)
    return context, weights


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, keep)


# -------------------------------------------------------------------- checks

def numerical_gradient(f: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``param``."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradient_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences."""
    with Tape() as tape:
        loss = build_loss()
    for p in params:
        p.grad = None
    analytic = tape.backward(loss, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        numeric = numerical_gradient(lambda: float(build_loss().data), p, eps)
        worst = max(worst, relative_error(g, numeric))
    return worst
