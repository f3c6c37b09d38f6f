"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive that touches a tensor requiring gradients appends an entry to
the calling thread's tape. ``backward`` walks that tape in reverse, so the
recording order doubles as a topological order and no graph search is needed.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


@dataclass
class TapeEntry:
    name: str
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple]
    # which inputs receive gradient, fixed at record time
    needs_grad: tuple[bool, ...] = ()


class Tape:
    """Ordered record of the primitives applied since the last reset."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> None:
    get_tape().reset()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
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

    def is_finite(self) -> bool:
        ok = bool(np.all(np.isfinite(self.data)))
        if self.grad is not None:
            ok = ok and bool(np.all(np.isfinite(self.grad)))
        return ok

    def check_valid(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise FloatingPointError(f"{what}: {bad} non-finite value(s) in data of shape {self.shape}")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise FloatingPointError(f"{what}: non-finite gradient of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment estimates."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name or ''} shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _frozen_ids() -> set[int]:
    ids = getattr(_local, "frozen_ids", None)
    if ids is None:
        ids = _local.frozen_ids = set()
    return ids


@contextlib.contextmanager
def frozen(params: Sequence[Tensor]):
    """Stop gradients from reaching ``params`` within the current thread.

    The tensors themselves are untouched, so other threads may use the same
    parameters concurrently.
    """
    ids = _frozen_ids()
    added = [id(p) for p in params if id(p) not in ids]
    ids.update(added)
    try:
        yield
    finally:
        ids.difference_update(added)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if not is_grad_enabled():
        return out
    skip = _frozen_ids()
    needs = tuple(t.requires_grad and id(t) not in skip for t in inputs)
    if any(needs):
        out.requires_grad = True
        get_tape().record(TapeEntry(name, out, inputs, backward, needs))
    return out


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = get_tape()
    if len(tape) == 0:
        raise RuntimeError("backward: tape is empty")
    loss.grad = np.ones_like(loss.data)
    try:
        for entry in reversed(tape.entries):
            if entry.out.grad is None:
                continue
            grads = entry.backward(entry.out.grad)
            for inp, needs, g in zip(entry.inputs, entry.needs_grad, grads):
                if g is None or not needs:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), inp.shape)
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
    finally:
        tape.reset()


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    return _make("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN visible to the validity checks downstream
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2.0 * g * x,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data >= floor
    return _make("clamp_min", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    s = _softmax_np(a.data)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (a,), _bw)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def _bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), _bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", out, (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _make("mean", out, (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    lead = [t.shape[:-1] for t in tensors]
    if any(s != lead[0] for s in lead) or axis not in (-1, tensors[0].ndim - 1):
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} along last axis")
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=-1)))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    src = a.shape
    out = a.data[key]

    def _bw(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return _make("getitem", np.array(out), (a,), _bw)


Tensor.__getitem__ = getitem
