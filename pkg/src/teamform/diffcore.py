"""Small reverse-mode autodiff on top of numpy.

Every differentiable quantity in the package is a :class:`Tensor`.  Operations
record a closure that maps the output gradient to input gradients;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.

Only the broadcasting the networks need is supported (numpy rules, reduced
back to the operand shape on the way down).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_dtype = np.float64
_grad_enabled = True
DEBUG = False


def set_default_dtype(dtype) -> None:
    """Switch the float type used for new tensors (float64 or float32)."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _dtype = dtype


def get_default_dtype():
    return _dtype


@contextmanager
def default_dtype(dtype):
    previous = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by tensor operation")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 1-D left operand is treated as a single row, as in ``np.matmul``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        out = matmul(reshape(a, (1,) + a.shape), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


# reductions and shape plumbing

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def tmax(x, axis: int, keepdims=False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


# nonlinearities

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def elu(x) -> Tensor:
    x = as_tensor(x)
    neg = np.exp(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg - 1.0)
    return _result(out, (x,), lambda g: (g * np.where(x.data > 0, 1.0, neg),))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    return div(x, sqrt(tsum(mul(x, x), axis=axis, keepdims=True) + eps))


def softmax_masked(logits, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to entries where ``mask`` is nonzero.

    Masked entries get weight exactly 0.  A slice with no unmasked entry is a
    caller bug and raises ``ContractError`` naming the (flattened) slice index.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    if mask.shape != logits.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    live = mask.any(axis=axis)
    if not np.all(live):
        bad = int(np.flatnonzero(~np.atleast_1d(live))[0])
        raise ContractError(f"fully masked slice {bad}")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (logits,), backward)


def one_hot_gather(x, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]`` along the last axis (differentiable in x)."""
    x = as_tensor(x)
    onehot = np.zeros(x.shape, dtype=x.data.dtype)
    np.put_along_axis(onehot, np.asarray(index)[..., None], 1.0, axis=-1)
    return tsum(mul(x, onehot), axis=-1)


# parameters and optimization

@dataclass
class ParameterStore:
    """Named parameters plus adaptive-moment optimizer state."""

    params: dict = field(default_factory=dict)
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def values(self):
        return self.params.values()

    def items(self):
        return self.params.items()

    def scope(self, prefix: str) -> dict:
        """Parameters under ``prefix.`` keyed by the remaining suffix."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.params.items() if k.startswith(head)}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore(step=self.step)
        for name, t in self.params.items():
            out.add(name, t.data)
        out.first_moment = {k: v.copy() for k, v in self.first_moment.items()}
        out.second_moment = {k: v.copy() for k, v in self.second_moment.items()}
        return out

    def astype(self, dtype) -> "ParameterStore":
        with default_dtype(dtype):
            out = ParameterStore(step=self.step)
            for name, t in self.params.items():
                out.add(name, t.data.astype(dtype))
        return out


def sync_target(source: ParameterStore, target: ParameterStore) -> None:
    """Copy every parameter value of ``source`` into ``target``."""
    if list(source.params) != list(target.params):
        raise ContractError("source and target stores hold different parameters")
    for name, t in source.params.items():
        target.params[name].data = t.data.copy()


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    grads = [t.grad for t in store.params.values() if t.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for t in store.params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


def optimizer_step(store: ParameterStore, learning_rate: float = 5e-4,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> ParameterStore:
    """One Adam update; clears gradients afterwards."""
    for name, t in store.params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, t in store.params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = store.first_moment.get(name)
        v = store.second_moment.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.first_moment[name] = m
        store.second_moment[name] = v
        t.data = (t.data - learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.data.dtype)
        t.grad = None
    return store


# gradient checking

@dataclass
class GradCheckReport:
    max_rel_errors: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_errors)

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors, default=0.0)


def grad_check(function: Callable, inputs: Sequence[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``function(*inputs)`` must return a scalar tensor.  The relative error of
    one coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is ~0 from amplifying rounding noise.
    With ``max_coords`` only that many coordinates per input are probed.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = function(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    errors = []
    with no_grad():
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(function(*inputs).data)
                flat[i] = orig - step
                f_minus = float(function(*inputs).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(grad.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
            errors.append(worst)
    for t in inputs:
        t.grad = None
    return GradCheckReport(errors, tolerance)


# checkpoints

_MAGIC = b"TFRM"
_VERSION = 1


def save_checkpoint(store: ParameterStore, path) -> None:
    """Write parameters in the flat little-endian TFRM layout."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(store.params))]
    for name, t in store.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> ParameterStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ContractError(f"{path}: not a TFRM checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    store = ParameterStore()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        store.add(name, values.astype(_dtype))
    return store
