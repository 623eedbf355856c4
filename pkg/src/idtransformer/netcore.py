"""A small reverse-mode autodiff layer over numpy arrays.

Every :class:`Tensor` produced by an operation records its parents and a
closure mapping the output gradient to input gradients; :func:`backward`
walks that tape in reverse topological order.  Only the operations the
encoder needs are provided.
"""

from __future__ import annotations

import contextlib
import json
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class TapeError(RuntimeError):
    pass


class Tensor:
    """A tape node: value, accumulated gradient and the recorded backward rule.

    ``op`` is ``"leaf"`` for inputs and parameters.  Non-leaf nodes only exist
    when at least one parent requires a gradient and recording is enabled.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, c: float) -> Tensor:
        return scale(self, c)

    __rmul__ = __mul__

    def relu(self) -> Tensor:
        return relu(self)

    def softmax(self) -> Tensor:
        return softmax(self)

    def transpose(self) -> Tensor:
        return transpose(self)


class Parameter(Tensor):
    """Trainable matrix with Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        if self.value.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got {self.value.shape}")
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# array kernels


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(m: np.ndarray, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalise each row (last axis) to zero mean and unit variance, then affine."""
    m = np.asarray(m, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64).reshape(-1)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if gain.size != m.shape[-1] or bias.size != m.shape[-1]:
        raise ValueError(f"gain/bias length must equal {m.shape[-1]}")
    mean = m.mean(axis=-1, keepdims=True)
    var = m.var(axis=-1, keepdims=True)
    return (m - mean) / np.sqrt(var + eps) * gain + bias


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(labels, logits.shape)
    logp = log_softmax_rows(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _check_labels(labels, shape) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {shape[0]} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= shape[1]):
        raise ValueError(f"label out of range [0, {shape[1]})")
    return labels


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.value + b.value, "add", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.value * c, "scale", (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    return _record(np.swapaxes(a.value, -1, -2), "transpose", (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = softmax_rows(a.value)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, "softmax", (a,), backward)


def layer_norm_op(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xv = x.value
    gv = gain.value.reshape(-1)
    mean = xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mean) * inv_std
    out = xhat * gv + bias.value.reshape(-1)

    def backward(g):
        gx_hat = g * gv
        gx = inv_std * (gx_hat
                        - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead).reshape(gain.shape)
        gbias = g.sum(axis=lead).reshape(bias.shape)
        return gx, ggain, gbias

    return _record(out, "layer_norm", (x, gain, bias), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` may have any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    wv = weight.value

    def backward(g):
        gw = np.zeros_like(wv)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wv.shape[1]))
        return (gw,)

    return _record(wv[ids], "embedding", (weight,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.value for t in tensors], axis=axis), "concat", tensors, backward)


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Take one position along ``axis`` (dropping that axis)."""
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        slicer = [slice(None)] * len(shape)
        slicer[axis] = index
        gx[tuple(slicer)] = g
        return (gx,)

    return _record(np.take(x.value, index, axis=axis), "select", (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar node."""
    x = _as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.value.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    logits = _as_tensor(logits)
    lv = logits.value
    labels = _check_labels(labels, lv.shape)
    n = lv.shape[0]
    logp = log_softmax_rows(lv)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss), "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass and optimiser


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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) back through the tape.

    Gradients accumulate additively into ``.grad`` of every reachable node
    that requires one.  Returns the gradients of reachable parameters by name.
    """
    if loss.op == "leaf" or loss._backward is None:
        raise TapeError("backward() called on a node with no recorded forward operation")
    if loss.value.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.value)
    params: dict[str, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is None:
            if isinstance(node, Parameter):
                params[node.name] = node.grad
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g
        node.grad = None
    return params


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> None:
    """One bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps_adam)
        p.grad = np.zeros_like(p.value)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.value)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"IDTCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, matrices: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named matrices to one file.

    Layout (little endian): magic, u32 version, u32 meta length, meta JSON,
    u32 count, then per matrix: u16 name length, UTF-8 name, u32 rows,
    u32 cols, rows*cols float64 entries in row-major order.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)),
              meta_bytes, struct.pack("<I", len(matrices))]
    for name in sorted(matrices):
        m = np.asarray(matrices[name], dtype="<f8")
        if m.ndim != 2:
            raise ValueError(f"{name}: checkpoint entries must be 2-D")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", *m.shape))
        chunks.append(np.ascontiguousarray(m).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    matrices = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        matrices[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return matrices, meta
