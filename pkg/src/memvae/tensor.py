"""Float64 tensors with a reverse-mode gradient tape.

Every differentiable op appends its output node to the active :class:`Tape`.
``backward`` replays the tape in reverse record order, which is a valid
reverse topological order because a node is always recorded after its
inputs.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    def __init__(self, message: str, index: tuple):
        super().__init__(message)
        self.index = index


class Tape:
    """Ordered record of the differentiable ops of one step.

    Use as a context manager; the tape is cleared on exit so intermediate
    values can be freed.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        node._tape_pos = len(self.nodes)
        node._tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._tape = None
            node._adj = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        self.clear()
        return False


_DEFAULT_TAPE = Tape()
_TAPES: list[Tape] = []
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPES[-1] if _TAPES else _DEFAULT_TAPE


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name",
                 "_parents", "_backward", "_tape", "_tape_pos", "_adj", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None
        self._tape_pos = -1
        self._adj = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __pow__ = lambda self, p: power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._adj = None
    out._op = op
    out._tape = None
    out._tape_pos = -1
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        active_tape().record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting added or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape),
                            unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def maximum(a, floor: float) -> Tensor:
    """Clamp from below; the adjoint is zero where the floor is active."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "maximum")


def _log_forward(x: np.ndarray) -> np.ndarray:
    bad = np.argwhere(~(x > 0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"log of non-positive value {x[idx]!r} at index {idx}", idx)
    return np.log(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# name -> (forward(x), adjoint(g, x, out))
UNARY: dict[str, tuple[Callable, Callable]] = {
    "exp": (np.exp, lambda g, x, y: g * y),
    "log": (_log_forward, lambda g, x, y: g / x),
    "tanh": (np.tanh, lambda g, x, y: g * (1.0 - y * y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0)),
    "sigmoid": (_sigmoid, lambda g, x, y: g * y * (1.0 - y)),
    "softplus": (_softplus, lambda g, x, y: g * _sigmoid(x)),
    "sqrt": (np.sqrt, lambda g, x, y: g * 0.5 / y),
}


def unary(op: str, a) -> Tensor:
    a = as_tensor(a)
    fwd, bwd = UNARY[op]
    x = a.data
    out = fwd(x)
    return _make(out, (a,), lambda g: (UNARY[op][1](g, x, out),), op)


def exp(a): return unary("exp", a)
def log(a): return unary("log", a)
def tanh(a): return unary("tanh", a)
def relu(a): return unary("relu", a)
def sigmoid(a): return unary("sigmoid", a)
def softplus(a): return unary("softplus", a)
def sqrt(a): return unary("sqrt", a)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *args) -> Tensor:
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes 2 arguments, got {len(args)}")
        return _BINARY[op](*args)
    if op in UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes 1 argument, got {len(args)}")
        return unary(op, args[0])
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and layout

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a, key) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in the adjoint."""
    a = as_tensor(a)
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)

    def bwd(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key]), (a,), bwd, "index")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, ts, bwd, "concat")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, shape: tuple, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op: str, x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    span = x.data.size if axes is None else int(np.prod([x.shape[i] for i in axes]))
    if span == 0:
        raise DimensionError(f"{op} over an empty axis of shape {x.shape}")
    d = x.data
    if op == "sum":
        out = d.sum(axis=axes, keepdims=keepdims)
        bwd = lambda g: (np.array(_expand(g, x.shape, axes, keepdims)),)
    elif op == "mean":
        out = d.mean(axis=axes, keepdims=keepdims)
        bwd = lambda g: (_expand(g, x.shape, axes, keepdims) / span,)
    elif op == "logsumexp":
        m = d.max(axis=axes, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        full = np.log(np.exp(d - m).sum(axis=axes, keepdims=True)) + m
        out = full if keepdims else np.squeeze(full, axis=axes) if axes is not None else full.reshape(())
        bwd = lambda g: (_expand(g, x.shape, axes, keepdims) * np.exp(d - full),)
    elif op == "max":
        full = d.max(axis=axes, keepdims=True)
        out = full if keepdims else np.squeeze(full, axis=axes) if axes is not None else full.reshape(())

        def bwd(g):
            # route to the first maximal entry only
            flat_axes = axes if axes is not None else tuple(range(d.ndim))
            moved = np.moveaxis(d, flat_axes, tuple(range(-len(flat_axes), 0)))
            lead = moved.shape[:moved.ndim - len(flat_axes)]
            arg = moved.reshape(lead + (-1,)).argmax(axis=-1)
            mask = np.zeros(lead + (moved.reshape(lead + (-1,)).shape[-1],))
            np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
            mask = np.moveaxis(mask.reshape(moved.shape), tuple(range(-len(flat_axes), 0)), flat_axes)
            return (mask * _expand(g, x.shape, axes, keepdims),)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=DTYPE), (x,), bwd, op)


def logsumexp(x, axis=None, keepdims=False) -> Tensor:
    return reduce("logsumexp", x, axis, keepdims)


def log_softmax(x, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._tape is None:
        if root._backward is None:  # a leaf
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones(root.shape)
            return
        raise RuntimeError("root is not on a live tape")
    tape = root._tape
    root._adj = np.ones(root.shape)
    nodes = tape.nodes
    for pos in range(root._tape_pos, -1, -1):
        node = nodes[pos]
        g = node._adj
        if g is None:
            continue
        node._adj = None
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent._tape is not None:
                parent._adj = pg if parent._adj is None else parent._adj + pg
            else:
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != parent.shape:
                    pg = unbroadcast(pg, parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MEMVAE01"


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Write named tensors: magic, then per tensor u32 name length, name,
    u32 rank, u32 dims, little-endian f64 payload."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, t in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:8]!r}")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(DTYPE)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
