"""Small dense-array kernel with tape-based reverse-mode autodiff.

Only the operations the suffix model needs are provided. Every op takes and
returns :class:`Tensor` objects; when at least one input requires a gradient
the op records a backward closure on its output. ``Tensor.backward`` walks the
recorded graph in reverse topological order.

Precision defaults to float32. Gradient checks switch to float64 through the
:func:`precision` context manager.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_dtype: type = np.float32
_grad_enabled = True
_check_finite = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and parameters."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            if not isinstance(node, Parameter):
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate buffers are no longer needed; leaves keep theirs
                node.grad = None
        for node in order:
            node._backward = None
            node._parents = ()

    # arithmetic sugar used by the model code
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=_dtype, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., n] @ w[n, m]``; ``w`` must be 2-D."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            w._accumulate(x2.T @ g.reshape(-1, g.shape[-1]))

    return _result(x.data @ w.data, (x, w), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _result(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _result(y, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _result(out, tuple(tensors), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        x._accumulate(g * factor)

    return _result(x.data * x.data.dtype.type(factor), (x,), backward)


# ---------------------------------------------------------------------------
# neural network ops
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V x d). ``ids`` may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(grad)

    return _result(table.data[ids], (table,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``p == 0`` or outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), backward)


def _softmax_np(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, same shape) marks valid positions; invalid positions get
    probability exactly 0. Each row needs at least one valid entry.
    """
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    y = _softmax_np(x.data, mask)

    def backward(g):
        x._accumulate(y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Summed cross-entropy ``-log softmax(logits)[target]``.

    ``logits`` has shape (..., C) and ``targets`` the leading shape (...).
    A single logit vector with an integer target gives the per-example loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"target id out of range [0, {n_classes})")
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    loss = np.asarray(-picked.sum(), dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        logits._accumulate(grad * g)

    return _result(loss, (logits,), backward)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``out[b] = sum_i weights[b, i] * values[b, i, :]``."""
    out = np.einsum("bk,bkh->bh", weights.data, values.data)

    def backward(g):
        if weights.requires_grad:
            weights._accumulate(np.einsum("bh,bkh->bk", g, values.data))
        if values.requires_grad:
            values._accumulate(weights.data[:, :, None] * g[:, None, :])

    return _result(out, (weights, values), backward)


class GruLayer:
    """One GRU layer.

    Weights are stored gate-concatenated in the order update ``z``, reset ``r``,
    candidate: ``w_input`` is (input, 3H), ``w_hidden`` is (H, 3H), ``bias`` is (3H,).
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None, name: str = "gru"):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        if rng is None:
            w_in = np.zeros((input_size, 3 * hidden_size))
            w_h = np.zeros((hidden_size, 3 * hidden_size))
        else:
            w_in = rng.uniform(-bound, bound, size=(input_size, 3 * hidden_size))
            w_h = rng.uniform(-bound, bound, size=(hidden_size, 3 * hidden_size))
        self.w_input = Parameter(w_in, name=f"{name}.w_input")
        self.w_hidden = Parameter(w_h, name=f"{name}.w_hidden")
        self.bias = Parameter(np.zeros(3 * hidden_size), name=f"{name}.bias")

    def parameters(self) -> list[Parameter]:
        return [self.w_input, self.w_hidden, self.bias]


def gru_step(layer: GruLayer, x: Tensor, h_prev: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """One GRU update ``h = z*h_prev + (1-z)*tanh(W_h x + U_h (r*h_prev) + b_h)``.

    ``mask`` (batch,) with 0 entries keeps ``h_prev`` unchanged for that row;
    used for right-padded sequences.
    """
    hs = layer.hidden_size
    if x.shape[-1] != layer.input_size or h_prev.shape[-1] != hs or x.shape[0] != h_prev.shape[0]:
        raise ValueError(f"gru_step shape mismatch: x {x.shape}, h {h_prev.shape}, layer ({layer.input_size}, {hs})")
    W, U, b = layer.w_input, layer.w_hidden, layer.bias
    xd, h = x.data, h_prev.data
    u_zr = U.data[:, : 2 * hs]
    u_n = U.data[:, 2 * hs :]
    gx = xd @ W.data + b.data
    gh = h @ u_zr
    z = _sigmoid(gx[:, :hs] + gh[:, :hs])
    r = _sigmoid(gx[:, hs : 2 * hs] + gh[:, hs:])
    rh = r * h
    n = np.tanh(gx[:, 2 * hs :] + rh @ u_n)
    h_new = z * h + (1.0 - z) * n
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=h.dtype).reshape(-1, 1)
        out = m * h_new + (1.0 - m) * h
    else:
        out = h_new

    def backward(g):
        if m is not None:
            g_new = g * m
            g_h = g * (1.0 - m)
        else:
            g_new = g
            g_h = np.zeros_like(h)
        g_z = g_new * (h - n)
        g_h = g_h + g_new * z
        a_n = g_new * (1.0 - z) * (1.0 - n * n)
        g_rh = a_n @ u_n.T
        g_h = g_h + g_rh * r
        a_z = g_z * z * (1.0 - z)
        a_r = (g_rh * h) * r * (1.0 - r)
        a_x = np.concatenate([a_z, a_r, a_n], axis=1)
        a_zr = a_x[:, : 2 * hs]
        if W.requires_grad:
            W._accumulate(xd.T @ a_x)
        if b.requires_grad:
            b._accumulate(a_x.sum(axis=0))
        if U.requires_grad:
            U._accumulate(np.concatenate([h.T @ a_zr, rh.T @ a_n], axis=1))
        if x.requires_grad:
            x._accumulate(a_x @ W.data.T)
        if h_prev.requires_grad:
            h_prev._accumulate(g_h + a_zr @ u_zr.T)

    return _result(out, (x, h_prev, W, U, b), backward)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> None:
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    params = list(params)
    if clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
        if total > clip_norm:
            factor = clip_norm / (total + 1e-12)
            for p in params:
                p.grad *= p.grad.dtype.type(factor)
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
