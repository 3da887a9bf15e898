"""
Reverse-mode differentiation on numpy arrays.

Tensors carry their provenance while gradients are enabled; calling
backward() on a scalar loss walks the graph once, accumulates gradients into
leaf tensors, and releases the graph. Parameters live in a ParamStore, which
also holds the Adam moments and reads/writes the ENERF1 checkpoint format.
"""

import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .config import config
from .exceptions import CheckpointError, GraphError, OptimizerError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]

CHECKPOINT_MAGIC = b"ENERF1"

_grad_enabled = True


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


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array with an optional gradient slot and graph provenance."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_leaf", "_released")
    # ndarray (op) Tensor defers to the Tensor's reflected operator.
    __array_ufunc__ = None

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        dtype=None,
        validate: Optional[bool] = None,
    ):
        data = np.asarray(values, dtype=dtype)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.ndim > 0 and 0 in data.shape:
            raise ShapeError("tensor", data.shape)
        if (config.validate_tensors if validate is None else validate) and not np.all(np.isfinite(data)):
            raise ValueError("Tensor values contain NaN or Inf")

        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._leaf = True
        self._released = False

    # Introspection

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, validate=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    # Operators

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor."""
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is not None:
        return Tensor(np.asarray(value, dtype=dtype), validate=False)
    return Tensor(value, validate=False)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._leaf = False
    out._released = False
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(op: str, a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    dtype = a.dtype if isinstance(a, Tensor) else (b.dtype if isinstance(b, Tensor) else None)
    ta, tb = as_tensor(a, dtype), as_tensor(b, dtype)
    try:
        np.broadcast_shapes(ta.shape, tb.shape)
    except ValueError:
        raise ShapeError(op, ta.shape, tb.shape) from None
    return ta, tb


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair("add", a, b)

    def backward(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _result(ta.data + tb.data, (ta, tb), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair("sub", a, b)

    def backward(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _result(ta.data - tb.data, (ta, tb), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair("mul", a, b)

    def backward(g):
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _result(ta.data * tb.data, (ta, tb), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _pair("div", a, b)

    def backward(g):
        return (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        )

    return _result(ta.data / tb.data, (ta, tb), backward, "div")


def power(x: ArrayLike, exponent: float) -> Tensor:
    tx = as_tensor(x)

    def backward(g):
        return (g * exponent * np.power(tx.data, exponent - 1),)

    return _result(np.power(tx.data, exponent), (tx,), backward, "pow")


# Activations


def relu(x: ArrayLike) -> Tensor:
    tx = as_tensor(x)
    mask = tx.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, tx.data, 0).astype(tx.dtype), (tx,), backward, "relu")


def sigmoid(x: ArrayLike) -> Tensor:
    tx = as_tensor(x)
    out = np.empty_like(tx.data)
    positive = tx.data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-tx.data[positive]))
    expx = np.exp(tx.data[~positive])
    out[~positive] = expx / (1.0 + expx)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (tx,), backward, "sigmoid")


def exp(x: ArrayLike) -> Tensor:
    tx = as_tensor(x)
    out = np.exp(tx.data)

    def backward(g):
        return (g * out,)

    return _result(out, (tx,), backward, "exp")


def log(x: ArrayLike) -> Tensor:
    tx = as_tensor(x)

    def backward(g):
        return (g / tx.data,)

    return _result(np.log(tx.data), (tx,), backward, "log")


def clip(x: ArrayLike, low: float, high: float) -> Tensor:
    tx = as_tensor(x)
    mask = (tx.data >= low) & (tx.data <= high)

    def backward(g):
        return (g * mask,)

    return _result(np.clip(tx.data, low, high), (tx,), backward, "clip")


# Reductions and structure


def _normalize_axes(axis, ndim: int) -> Optional[tuple]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    tx = as_tensor(x)
    axes = _normalize_axes(axis, tx.ndim)
    out = np.sum(tx.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(tx.dtype)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, tx.shape).astype(tx.dtype),)

    return _result(np.asarray(out), (tx,), backward, "sum")


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    tx = as_tensor(x)
    axes = _normalize_axes(axis, tx.ndim)
    count = tx.size if axes is None else int(np.prod([tx.shape[a] for a in axes]))
    return mul(sum(tx, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(x: ArrayLike, axis: int = -1) -> Tensor:
    tx = as_tensor(x)
    out = np.cumsum(tx.data, axis=axis, dtype=np.float64).astype(tx.dtype)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(out, (tx,), backward, "cumsum")


def reshape(x: ArrayLike, shape: tuple) -> Tensor:
    tx = as_tensor(x)
    try:
        out = tx.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", tx.shape, shape) from None

    def backward(g):
        return (g.reshape(tx.shape),)

    return _result(out, (tx,), backward, "reshape")


def broadcast_to(x: ArrayLike, shape: tuple) -> Tensor:
    tx = as_tensor(x)
    try:
        out = np.array(np.broadcast_to(tx.data, shape))
    except ValueError:
        raise ShapeError("broadcast_to", tx.shape, tuple(shape)) from None

    def backward(g):
        return (_unbroadcast(g, tx.shape),)

    return _result(out, (tx,), backward, "broadcast_to")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in parts)


def index(x: ArrayLike, key) -> Tensor:
    tx = as_tensor(x)
    out = tx.data[key]
    basic = _is_basic_index(key)

    def backward(g):
        full = np.zeros_like(tx.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.asarray(out), (tx,), backward, "index")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    ndim = parts[0].ndim
    axis = axis % ndim
    for part in parts[1:]:
        others_a = parts[0].shape[:axis] + parts[0].shape[axis + 1 :]
        others_b = part.shape[:axis] + part.shape[axis + 1 :]
        if part.ndim != ndim or others_a != others_b:
            raise ShapeError("concat", parts[0].shape, part.shape)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    for part in parts[1:]:
        if part.shape != parts[0].shape:
            raise ShapeError("stack", parts[0].shape, part.shape)
    out = np.stack([p.data for p in parts], axis=axis)
    axis = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _result(out, parts, backward, "stack")


def gather(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of a 2-D table; the gradient touches only the indexed rows."""
    if table.ndim != 2:
        raise ShapeError("gather", table.shape, np.shape(indices))
    indices = np.asarray(indices, dtype=np.int64)
    rows, width = table.shape

    def backward(g):
        flat_index = indices.reshape(-1)
        flat_grad = g.reshape(-1, width)
        grad = np.empty((rows, width), dtype=table.dtype)
        for f in range(width):
            grad[:, f] = np.bincount(flat_index, weights=flat_grad[:, f], minlength=rows)
        return (grad,)

    return _result(table.data[indices], (table,), backward, "gather")


# Layers and losses


def linear(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias, with weight laid out as (in_features, out_features)."""
    tx = as_tensor(x)
    if tx.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", tx.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear", weight.shape, bias.shape)

    out = tx.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        x2 = tx.data.reshape(-1, weight.shape[0])
        grads = [g @ weight.data.T, x2.T @ g2]
        if bias is not None:
            grads.append(np.sum(g2, axis=0, dtype=np.float64).astype(bias.dtype))
        return tuple(grads)

    parents = (tx, weight) if bias is None else (tx, weight, bias)
    return _result(out, parents, backward, "linear")


def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Mean squared error over all elements."""
    ta, tb = _pair("mse", a, b)
    if ta.shape != tb.shape:
        raise ShapeError("mse", ta.shape, tb.shape)
    diff = ta.data - tb.data
    scale = 2.0 / diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=ta.dtype)

    def backward(g):
        return g * scale * diff, -g * scale * diff

    return _result(out, (ta, tb), backward, "mse")


# Backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every leaf that the scalar loss depends on."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("Graph already released by a previous backward; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("Loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._leaf:
            g = g.astype(node.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise GraphError(f"Graph through '{node.op}' was already released; rebuild the forward pass")

        parent_grads = node._backward(g)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

        node._backward = None
        node._parents = ()
        node._released = True


def numerical_gradient(
    fn: Callable[[], Tensor],
    target: Tensor,
    positions: Optional[Sequence[tuple]] = None,
    step: float = 1e-4,
) -> np.ndarray:
    """Central finite differences of a scalar fn with respect to target entries."""
    if positions is None:
        positions = list(np.ndindex(*target.shape))
    estimates = np.zeros(len(positions), dtype=np.float64)
    with no_grad():
        for i, pos in enumerate(positions):
            original = target.data[pos].copy()
            target.data[pos] = original + step
            upper = float(fn().data)
            target.data[pos] = original - step
            lower = float(fn().data)
            target.data[pos] = original
            estimates[i] = (upper - lower) / (2 * step)
    return estimates


def gradients_match(
    analytic: np.ndarray,
    numeric: np.ndarray,
    rel_tol: float = 1e-3,
    abs_floor: float = 1e-6,
) -> bool:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    tolerance = np.maximum(rel_tol * np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return bool(np.all(np.abs(analytic - numeric) <= tolerance))


# Parameters


@dataclass
class Parameter:
    """A named trainable array with its Adam moments."""

    name: str
    tensor: Tensor
    frozen: bool = False
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


class ParamStore:
    """Named parameters, iterated in sorted name order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.step = 0
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, values, frozen: bool = False) -> Tensor:
        """Register a parameter and return its tensor."""
        if name in self._entries:
            raise ValueError(f"Parameter '{name}' already registered")
        values = np.array(values, dtype=self.dtype)
        param = Tensor(values, requires_grad=True, validate=False)
        self._entries[name] = Parameter(name=name, tensor=param, frozen=frozen)
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def parameter(self, name: str) -> Parameter:
        return self._entries[name]

    def parameters(self) -> list[Parameter]:
        return [self._entries[name] for name in sorted(self._entries)]

    def names(self, prefix: str = "") -> list[str]:
        return [name for name in sorted(self._entries) if name.startswith(prefix)]

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def freeze(self, prefix: str):
        for name in self.names(prefix):
            self._entries[name].frozen = True

    def zero_grad(self):
        for param in self._entries.values():
            param.tensor.grad = None

    def snapshot(self, prefix: str = "") -> dict[str, bytes]:
        """Raw bytes per entry, for bit-exact comparisons."""
        return {name: self._entries[name].tensor.data.tobytes() for name in self.names(prefix)}

    def copy_from(self, other: "ParamStore", prefix: str = ""):
        """Copy values of same-named, same-shaped entries."""
        for name in other.names(prefix):
            if name in self._entries:
                target = self._entries[name].tensor
                source = other[name]
                if target.shape != source.shape:
                    raise CheckpointError(f"Shape mismatch for {name}: {target.shape} vs {source.shape}")
                target.data[...] = source.data

    def num_values(self, trainable_only: bool = False) -> int:
        return int(
            np.sum([p.tensor.size for p in self._entries.values() if not (trainable_only and p.frozen)])
        )


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    lr_overrides: Optional[Mapping[str, float]] = None,
) -> None:
    """One Adam update of every non-frozen parameter.

    lr_overrides maps name prefixes to learning rates; the longest matching
    prefix wins.
    """
    trainable = [p for p in store.parameters() if not p.frozen]
    missing = [p.name for p in trainable if p.tensor.grad is None]
    if missing:
        raise OptimizerError(f"No gradient for trainable parameters: {', '.join(missing[:5])}")

    prefixes = sorted((lr_overrides or {}).items(), key=lambda item: len(item[0]), reverse=True)

    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t

    for param in trainable:
        grad = param.tensor.grad.astype(np.float64)
        if param.m is None:
            param.m = np.zeros_like(param.tensor.data)
            param.v = np.zeros_like(param.tensor.data)

        m = beta1 * param.m + (1.0 - beta1) * grad
        v = beta2 * param.v + (1.0 - beta2) * grad * grad
        param.m = m.astype(store.dtype)
        param.v = v.astype(store.dtype)

        rate = next((value for prefix, value in prefixes if param.name.startswith(prefix)), lr)
        if rate == 0.0:
            continue
        update = rate * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.tensor.data -= update.astype(store.dtype)


# Checkpoints


def _write_entry(handle, name: str, frozen: bool, values: np.ndarray):
    encoded = name.encode("utf-8")
    handle.write(struct.pack("<I", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<B", 1 if frozen else 0))
    handle.write(struct.pack("<I", values.ndim))
    handle.write(struct.pack(f"<{values.ndim}I", *values.shape))
    handle.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def _read_exact(handle, size: int, path: Path) -> bytes:
    chunk = handle.read(size)
    if len(chunk) != size:
        raise CheckpointError(f"Truncated checkpoint: {path}")
    return chunk


def read_checkpoint(path: Path) -> dict[str, tuple[bool, np.ndarray]]:
    """Read all entries of an ENERF1 file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    entries: dict[str, tuple[bool, np.ndarray]] = {}
    with open(path, "rb") as handle:
        magic = handle.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"Not an ENERF1 checkpoint: {path}")
        while True:
            header = handle.read(4)
            if not header:
                break
            if len(header) != 4:
                raise CheckpointError(f"Truncated checkpoint: {path}")
            (name_length,) = struct.unpack("<I", header)
            name = _read_exact(handle, name_length, path).decode("utf-8")
            (frozen,) = struct.unpack("<B", _read_exact(handle, 1, path))
            (rank,) = struct.unpack("<I", _read_exact(handle, 4, path))
            shape = struct.unpack(f"<{rank}I", _read_exact(handle, 4 * rank, path))
            count = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(_read_exact(handle, 4 * count, path), dtype="<f4").reshape(shape)
            entries[name] = (bool(frozen), values)
    return entries


def save_checkpoint(path: Path, store: ParamStore, prefix: str = "", include_moments: bool = True) -> Path:
    """Write parameters (and Adam moments) sorted by name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    records: dict[str, tuple[bool, np.ndarray]] = {}
    for param in store.parameters():
        if not param.name.startswith(prefix):
            continue
        records[param.name] = (param.frozen, param.tensor.data)
        if include_moments and param.m is not None:
            records[f"optim.m.{param.name}"] = (True, param.m)
            records[f"optim.v.{param.name}"] = (True, param.v)

    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        for name in sorted(records):
            frozen, values = records[name]
            _write_entry(handle, name, frozen, values)

    logger.debug(f"Wrote {len(records)} entries to {path}")
    return path


def load_checkpoint(path: Path, store: ParamStore, prefix: str = "") -> int:
    """Load entries under prefix into an already-constructed store.

    Every stored entry must exist in the store with the same shape, and every
    store entry under prefix must be present in the file. Returns the number
    of parameters loaded.
    """
    path = Path(path)
    entries = read_checkpoint(path)

    params = {name: values for name, (_, values) in entries.items() if not name.startswith("optim.")}
    params = {name: values for name, values in params.items() if name.startswith(prefix)}

    unknown = sorted(set(params) - set(store.names(prefix)))
    if unknown:
        raise CheckpointError(f"{path}: entries not in model: {', '.join(unknown[:5])}")
    absent = sorted(set(store.names(prefix)) - set(params))
    if absent:
        raise CheckpointError(f"{path}: model entries missing from checkpoint: {', '.join(absent[:5])}")

    for name, values in params.items():
        target = store.parameter(name)
        if target.tensor.shape != values.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {values.shape}, model {target.tensor.shape}"
            )

    for name, values in params.items():
        target = store.parameter(name)
        target.tensor.data[...] = values.astype(store.dtype)
        m = entries.get(f"optim.m.{name}")
        v = entries.get(f"optim.v.{name}")
        if m is not None and v is not None:
            target.m = m[1].astype(store.dtype)
            target.v = v[1].astype(store.dtype)
        else:
            target.m = None
            target.v = None

    logger.debug(f"Loaded {len(params)} parameters from {path}")
    return len(params)
