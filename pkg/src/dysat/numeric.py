"""Dense tensors with a reverse-mode gradient tape.

Operations only record themselves while a :class:`Tape` is active, so
forward passes outside a tape run as plain numpy with no bookkeeping.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(matmul(w, Tensor([[1.0], [1.0]])))
    >>> tape.backward(loss)
    >>> w.grad
    array([[1., 1.]])
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "DegenerateRowError", "InstabilityError",
    "as_tensor", "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "index", "concat", "stack", "sum", "mean", "exp", "log", "maximum", "sigmoid",
    "log_sigmoid", "leaky_relu", "elu", "masked_softmax", "segment_sum",
    "segment_softmax", "dropout", "grad_check", "GradCheckReport",
    "save_tensor", "load_tensor", "write_tsv",
]



class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """Every entry of a softmax row was masked."""


class InstabilityError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Record:
    out: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of operations; ``backward`` replays them in reverse."""

    _local = threading.local()

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``.grad``.

        Intermediate gradients are reset first, so replaying the same tape
        twice adds the same leaf contribution twice (leaves are never reset).
        """
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar or explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        for rec in self.records:
            rec.out.grad = None
        loss.grad = np.asarray(grad, dtype=loss.data.dtype).copy()
        for rec in reversed(self.records):
            if rec.out.grad is not None:
                rec.backward(rec.out.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append(_Record(out, backward))
    return out


# elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: _accum(a, -g))


# linear algebra and shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inverse)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def index(a, key) -> Tensor:
    """``a[key]`` for basic or integer-array keys; repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _result(a.data[key], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, cuts, axis=axis)):
            _accum(t, piece)

    return _result(data, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))

    return _result(data, ts, backward)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# nonlinearities -------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant; no gradient where clamped."""
    a = as_tensor(a)
    keep = a.data > floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: _accum(a, g * keep))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: _accum(a, g * _stable_sigmoid(-x)))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    slopes = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * slopes, (a,), lambda g: _accum(a, g * slopes))


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    local = np.where(x > 0, 1.0, neg_part + 1.0)
    return _result(out, (a,), lambda g: _accum(a, g * local))


def masked_softmax(logits, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` after adding an additive {0, -inf} mask.

    Masked positions come out exactly zero. A row with every entry masked
    raises :class:`DegenerateRowError`.
    """
    logits = as_tensor(logits)
    z = logits.data if mask is None else logits.data + mask
    top = np.max(z, axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise DegenerateRowError("softmax row has no unmasked entry")
    e = np.exp(z - top)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        _accum(logits, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return _result(out, (logits,), backward)


def segment_sum(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row ids."""
    a = as_tensor(a)
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, segments, a.data)
    return _result(out, (a,), lambda g: _accum(a, g[segments]))


def segment_softmax(logits, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over the entries sharing a segment id (max-shifted per segment)."""
    logits = as_tensor(logits)
    x = logits.data
    top = np.full((num_segments,) + x.shape[1:], -np.inf, dtype=x.dtype)
    np.maximum.at(top, segments, x)
    e = np.exp(x - top[segments])
    denom = np.zeros_like(top)
    np.add.at(denom, segments, e)
    out = e / denom[segments]

    def backward(g):
        dot = np.zeros_like(top)
        np.add.at(dot, segments, g * out)
        _accum(logits, out * (g - dot[segments]))

    return _result(out, (logits,), backward)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, keep)


# gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from dividing noise by noise.
    """
    named = params if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if not np.all(np.isfinite(out.data)):
        raise InstabilityError("objective is not finite at the probe point")
    tape.backward(out)

    report = GradCheckReport(0.0, tol)
    for name, p in named.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise InstabilityError(f"non-finite objective while probing {name}[{i}]")
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        if not np.all(np.isfinite(analytic)):
            raise InstabilityError(f"non-finite analytic gradient for {name}")
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if p.size else 0.0
        report.per_tensor[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report


# serialization --------------------------------------------------------------

_MAGIC = b"TNSR"


def save_tensor(fh, array) -> None:
    """Little-endian: magic, uint32 ndim, uint64 dims, float64 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor header {magic!r}")
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def write_tsv(path, array, row_labels: Iterable | None = None) -> None:
    arr = np.atleast_2d(np.asarray(array.data if isinstance(array, Tensor) else array))
    labels = list(row_labels) if row_labels is not None else None
    with open(path, "w") as fh:
        for i, row in enumerate(arr):
            cells = [repr(float(x)) for x in row]
            if labels is not None:
                cells.insert(0, str(labels[i]))
            fh.write("\t".join(cells) + "\n")
