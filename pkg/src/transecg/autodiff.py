"""Dense float64 tensors with a define-by-run reverse-mode autodiff tape.

Ops record onto a global tape in execution order (which is already a
topological order); backward() walks the tape in reverse and accumulates
gradients into leaves, then clears the tape.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "backward", "no_grad", "zero_grad",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat",
    "index", "tsum", "tmean", "tlog", "clip_min", "softmax", "layer_norm",
    "gelu", "linear", "AdamW",
    "save_tensors", "load_tensors",
]

_TAPE: list["Tensor"] = []
_GRAD_ENABLED = True


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._backward = backward_fn
        _TAPE.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss; clears the tape."""
    global _TAPE
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("loss is not finite")
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(_TAPE):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    for node in _TAPE:
        node._backward = None
    _TAPE = []


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.transpose(g, inv))

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _record(out, (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return _record(out, tensors, bwd)


def index(a: Tensor, key) -> Tensor:
    """Basic slicing/indexing; backward scatter-adds into the source shape."""
    a = _as_tensor(a)
    out = Tensor(a.data[key])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            a.accumulate(full)

    return _record(out, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.shape).copy())

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tlog(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _record(out, (a,), bwd)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """Lower clamp; gradient passes only where the input exceeds the floor."""
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, floor))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > floor))

    return _record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate(y * (g - dot))

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize over the last axis, then affine transform."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a last axis of size >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate(_unbroadcast(g, beta.shape))
        if gamma.requires_grad:
            gamma.accumulate(_unbroadcast(g * xhat, gamma.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = Tensor(x.data * phi)

    def bwd(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
            x.accumulate(g * (phi + x.data * pdf))

    return _record(out, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay (decay applied directly to weights)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params.values())


# ---------------------------------------------------------------------------
# parameter serialization

_MAGIC = b"TECG"
_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to the flat binary container format."""
    with contextlib.ExitStack() as stack:
        f = path if hasattr(path, "write") else stack.enter_context(open(path, "wb"))
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors; bit-exact round trip."""
    out: dict[str, np.ndarray] = {}
    with contextlib.ExitStack() as stack:
        f = path if hasattr(path, "read") else stack.enter_context(open(path, "rb"))
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: bad magic, not a parameter container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        while True:
            head = f.read(8)
            if not head:
                break
            (nlen,) = struct.unpack("<Q", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            out[name] = data.copy()
    return out
