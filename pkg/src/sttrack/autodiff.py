"""Minimal dense-tensor engine with reverse-mode differentiation.

Float64 throughout, single-threaded, deterministic. Just enough surface to
express small MLP/attention networks and their losses; shapes stay desk
scale, so clarity and exact gradients win over throughput everywhere.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return take(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _shape_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _shape_check(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _shape_check(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _shape_check(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _shape_check(a, b, "div")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(a.data / b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a.grad += g * mask

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    x = a.data
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        if a.requires_grad:
            a.grad += g * out * (1.0 - out)

    return _make(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = _lift(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    ex = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        if a.requires_grad:
            a.grad += g * sig

    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * out

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward(g):
        if a.requires_grad:
            a.grad += g / a.data

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * 0.5 / out

    return _make(out, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    a = _lift(a)
    sign = np.sign(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * sign

    return _make(np.abs(a.data), (a,), backward)


# --- shape ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(
                np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape
            )
        if b.requires_grad:
            b.grad += _unbroadcast(
                np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape
            )

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)

    def backward(g):
        if a.requires_grad:
            a.grad += g.reshape(a.shape)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.grad += g.transpose(inverse)

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t.grad += g[tuple(index)]

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def take(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing / slicing."""
    a = _lift(a)

    def backward(g):
        if a.requires_grad:
            a.grad[key] += g

    return _make(a.data[key], (a,), backward)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad += g  # scalar broadcast
        elif keepdims:
            a.grad += g
        else:
            a.grad += np.expand_dims(g, axis)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad += g / count
        elif keepdims:
            a.grad += g / count
        else:
            a.grad += np.expand_dims(g, axis) / count

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            a.grad += out * (g - inner)

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(_lift(1.0), sqrt(add(var, _lift(eps))))
    return add(mul(mul(centered, inv), gain), bias)


def attention(
    q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None
) -> Tensor:
    """Scaled dot-product attention.

    key_mask marks valid keys (broadcastable to the score shape); masked keys
    get zero weight, and rows whose keys are all masked output zeros.
    """
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), _lift(1.0 / math.sqrt(d)))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        scores = add(scores, Tensor(np.where(key_mask, 0.0, -1e30)))
    weights = softmax(scores, axis=-1)
    if key_mask is not None:
        row_valid = np.broadcast_to(key_mask, scores.shape).any(axis=-1, keepdims=True)
        weights = mul(weights, Tensor(row_valid.astype(float)))
    return matmul(weights, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# --- optimizer -------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AdamWConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: int = 0
    total_steps: int = 0  # 0 disables the decay schedule
    final_lr_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("betas must be in (0, 1)")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must be in (0, 1]")

    def lr_at(self, step: int) -> float:
        """Warmup then linear decay toward final_lr_fraction * learning_rate."""
        lr = self.learning_rate
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return lr * step / self.warmup_steps
        if self.total_steps > self.warmup_steps:
            frac = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
            frac = min(max(frac, 0.0), 1.0)
            return lr * (1.0 - (1.0 - self.final_lr_fraction) * frac)
        return lr


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig):
        self.params = params
        self.cfg = cfg
        self._names = sorted(params)
        self._m = {n: np.zeros_like(params[n].data) for n in self._names}
        self._v = {n: np.zeros_like(params[n].data) for n in self._names}

    def step(self, step: int) -> float:
        """Apply one update; `step` starts at 1. Returns the lr used."""
        if step < 1:
            raise ValueError(f"step must be >= 1, got {step}")
        cfg = self.cfg
        lr = cfg.lr_at(step)
        for name in self._names:
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.weight_decay > 0:
                p.data *= 1.0 - lr * cfg.weight_decay
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1**step)
            v_hat = v / (1 - cfg.beta2**step)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        return lr


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# --- checkpoint format -----------------------------------------------------
#
# Flat binary layout, all integers little-endian:
#   8 bytes   magic  b"STTCKPT\x01"
#   u32       metadata length, then that many bytes of UTF-8 JSON
#   u32       tensor count
#   per tensor: u16 name length, name bytes, u8 ndim, ndim * u32 dims
#   payload:  concatenated float32 little-endian tensor data, declared order

CHECKPOINT_MAGIC = b"STTCKPT\x01"


def save_checkpoint(path, params: dict[str, Tensor], metadata: dict) -> None:
    names = sorted(params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            shape = params[name].shape
            f.write(struct.pack("<B", len(shape)))
            for dim in shape:
                f.write(struct.pack("<I", dim))
        for name in names:
            f.write(params[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    offset = 8
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    metadata = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        shapes.append((name, tuple(dims)))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, metadata
