"""Dense float64 tensors and a reverse-mode differentiation tape.

Tensors are immutable wrappers around read-only numpy arrays. Operations
executed while a :class:`Tape` is active, and whose inputs are tracked by
that tape, are recorded together with a vector-Jacobian product closure.
:func:`backward` walks the record in reverse to accumulate gradients.

Broadcasting is deliberately absent: binary operations require identical
shapes, except that either operand may be a Python scalar or a 0-d tensor.
"""

from __future__ import annotations

import struct
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from typing import Union

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


class Tensor:
    """An immutable n-dimensional array of 64-bit floats."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr

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
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; everything routes through the recorded primitives
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
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)


def _wrap(arr: np.ndarray) -> Tensor:
    # ascontiguousarray would promote 0-d results to shape (1,)
    arr = np.asarray(arr, dtype=DTYPE)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    t = Tensor.__new__(Tensor)
    if arr.flags.writeable and arr.base is not None:
        arr = arr.copy()
    arr.flags.writeable = False
    t.data = arr
    return t


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return _wrap(np.zeros(shape, dtype=DTYPE))


def ones(shape) -> Tensor:
    return _wrap(np.ones(shape, dtype=DTYPE))


def full(shape, value: float) -> Tensor:
    return _wrap(np.full(shape, value, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class _ActiveTapes(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_ACTIVE = _ActiveTapes()


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; tensors passed to :meth:`watch` and every
    tensor computed from them inside the block are tracked::

        with Tape() as tape:
            tape.watch(x)
            y = reduce_sum(x * x)
        grads = backward(tape, y)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def _record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append(_Node(output, inputs, vjp))
        self._tracked[id(output)] = output

    def __enter__(self) -> "Tape":
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.stack.remove(self)


def _record(output: Tensor, inputs: Sequence, vjp: Callable) -> Tensor:
    """Record ``output`` on every active tape tracking one of ``inputs``.

    ``vjp(g)`` maps the output cotangent to a tuple of input cotangents
    aligned with the Tensor entries of ``inputs`` (``None`` for no flow).
    """
    tensors = tuple(x for x in inputs if isinstance(x, Tensor))
    for tape in _ACTIVE.stack:
        if any(id(x) in tape._tracked for x in tensors):
            tape._record(output, tensors, vjp)
    return output


class Gradients(Mapping):
    """Gradient lookup keyed by tensor identity.

    Tensors that were never reached from the seed map to zeros of their
    own shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> Tensor:
        if id(t) not in self._tensors:
            raise KeyError("tensor is not recorded on this tape")
        g = self._grads.get(id(t))
        if g is None:
            return zeros(t.shape)
        return _wrap(g)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tensors


def backward(tape: Tape, seed: Tensor) -> Gradients:
    """Reverse-accumulate d(seed)/d(v) for every value tracked by ``tape``."""
    if seed.size != 1:
        raise ShapeError(f"backward seed must be a scalar, got shape {seed.shape}")
    if not tape.is_tracked(seed):
        raise ValueError("backward seed is not recorded on the tape")
    grads: dict[int, np.ndarray] = {id(seed): np.ones(seed.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or id(x) not in tape._tracked:
                continue
            prev = grads.get(id(x))
            if prev is None:
                grads[id(x)] = np.array(gx, dtype=DTYPE).reshape(x.shape)
            else:
                prev += gx
    return Gradients(grads, dict(tape._tracked))


def grad(f: Callable[..., Tensor], *inputs: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Evaluate ``f(*inputs)`` and return ``(value, [d value / d input])``."""
    with Tape() as tape:
        tape.watch(*inputs)
        out = f(*inputs)
    g = backward(tape, out)
    return out, [g[x] for x in inputs]


# ---------------------------------------------------------------------------
# elementwise primitives

Operand = Union[Tensor, float, int]


def _value(x) -> np.ndarray | float:
    return x.data if isinstance(x, Tensor) else float(x)


def _check_binary(a, b, op: str) -> None:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, x) -> np.ndarray | None:
    if not isinstance(x, Tensor):
        return None
    if x.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a: Operand, b: Operand) -> Tensor:
    _check_binary(a, b, "add")
    out = _wrap(np.asarray(_value(a) + _value(b)))
    return _record(out, (a, b), lambda g: _drop((_unbroadcast(g, a), _unbroadcast(g, b)), a, b))


def sub(a: Operand, b: Operand) -> Tensor:
    _check_binary(a, b, "sub")
    out = _wrap(np.asarray(_value(a) - _value(b)))
    return _record(out, (a, b), lambda g: _drop((_unbroadcast(g, a), _unbroadcast(-g, b)), a, b))


def mul(a: Operand, b: Operand) -> Tensor:
    _check_binary(a, b, "mul")
    va, vb = _value(a), _value(b)
    out = _wrap(np.asarray(va * vb))
    return _record(
        out, (a, b), lambda g: _drop((_unbroadcast(g * vb, a), _unbroadcast(g * va, b)), a, b)
    )


def _drop(grads, *operands):
    # keep only the cotangents that belong to Tensor operands, in order
    return tuple(g for g, x in zip(grads, operands) if isinstance(x, Tensor))


def relu(a: Tensor) -> Tensor:
    """max(a, 0) elementwise."""
    mask = a.data > 0
    out = _wrap(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(np.asarray(a.data, dtype=DTYPE))
    out = _wrap(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor) -> Tensor:
    """a * sigmoid(a), fused."""
    x = np.asarray(a.data, dtype=DTYPE)
    s = _sigmoid(x)
    out = _wrap(x * s)
    return _record(out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    out = _wrap(np.log(a.data))
    x = a.data
    return _record(out, (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = _wrap(e)
    return _record(out, (a,), lambda g: (g * e,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "max0": relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
}


def elementwise(op: str, a: Operand, b: Operand | None = None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}")
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# structural primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    va, vb = a.data, b.data
    out = _wrap(va @ vb)
    return _record(out, (a, b), lambda g: _drop((g @ vb.T, va.T @ g), a, b))


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(ax % ndim if -ndim <= ax < ndim else _bad_axis(ax, ndim) for ax in axes))
    if len(set(axes)) != len(axes):
        raise ValueError(f"repeated axis in {axes}")
    return axes


def _bad_axis(ax, ndim):
    raise ValueError(f"axis {ax} out of range for rank {ndim}")


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    if a.size == 0:
        raise ValueError("reduce over an empty tensor")
    out = _wrap(np.asarray(a.data.sum(axis=ax)))
    shape = a.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return _record(out, (a,), vjp)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    if a.size == 0:
        raise ValueError("reduce over an empty tensor")
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    if np.all(a.data == a.data.reshape(-1)[0]):
        # exact for constant tensors; np.mean may round c*n/n
        out = _wrap(np.full([n for i, n in enumerate(a.shape) if i not in ax], a.data.reshape(-1)[0]))
    else:
        out = _wrap(np.asarray(a.data.mean(axis=ax)))
    shape = a.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept) / count, shape),)

    return _record(out, (a,), vjp)


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    if op == "sum":
        return reduce_sum(a, axes)
    if op == "mean":
        return reduce_mean(a, axes)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    out = _wrap(a.data.reshape(shape))
    old = a.shape
    return _record(out, (a,), lambda g: (np.reshape(g, old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _wrap(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing with a scatter-add gradient."""
    out = _wrap(np.asarray(a.data[index]))
    shape = a.shape

    def vjp(g):
        full_g = np.zeros(shape, dtype=DTYPE)
        np.add.at(full_g, index, g)
        return (full_g,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# finite-difference validation


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Error per component is ``|auto - fd| / (|fd| + 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, (auto,) = grad(f, x)
    auto = auto.data.reshape(-1)
    base = x.numpy().reshape(-1)
    fd = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += step
        minus = base.copy()
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x.shape))).item()
        fm = f(Tensor(minus.reshape(x.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at component {i}")
        fd[i] = (fp - fm) / (2.0 * step)
    if not np.all(np.isfinite(auto)):
        raise FloatingPointError("non-finite autodiff gradient")
    return float(np.max(np.abs(auto - fd) / (np.abs(fd) + 1e-12))) if base.size else 0.0


# ---------------------------------------------------------------------------
# random numbers

def rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Counter-based Philox generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def derived_seed(*keys: int) -> int:
    """Hash integer keys into a 64-bit seed (order-sensitive)."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


# ---------------------------------------------------------------------------
# serialization: rank (u64), extents (u64 each), values (f64), little-endian


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    head = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns it with the next offset."""
    if offset + 8 > len(buf):
        raise ValueError(f"truncated tensor header at byte {offset}")
    (rank,) = struct.unpack_from("<Q", buf, offset)
    if rank > 32:
        raise ValueError(f"implausible tensor rank {rank} at byte {offset}")
    pos = offset + 8
    if pos + 8 * rank > len(buf):
        raise ValueError(f"truncated tensor extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise ValueError(f"truncated tensor data at byte {pos}: need {8 * count} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(shape)
    return _wrap(arr), end
