"""Dense tensors and the operation tape used for reverse-mode differentiation"""
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import NumericalError, ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Row-major numeric array with an optional gradient buffer"""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in SUPPORTED_DTYPES else np.float32
        if np.dtype(dtype) not in SUPPORTED_DTYPES:
            raise TypeError(f"Unsupported tensor dtype {dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(array, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
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
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype, name=self.name)

    def copy(self) -> "Tensor":
        clone = Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.dtype, name=self.name)
        return clone

    def __add__(self, other: "Tensor") -> "Tensor":
        from src.autodiff import functional as F
        return F.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from src.autodiff import functional as F
        return F.sub(self, other)

    def __mul__(self, c: float) -> "Tensor":
        from src.autodiff import functional as F
        return F.scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from src.autodiff import functional as F
        return F.scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    """One executed operation together with what its backward rule needs"""
    op: str
    inputs: Tuple[Optional[Tensor], ...]
    output: Tensor
    backward: BackwardFn


_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of operations executed while the tape is active.

    A tape belongs to the thread that entered it; other threads see their own
    (possibly empty) tape stack.
    """
    entries: List[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        """Drop all entries and with them every saved activation"""
        self.entries.clear()


def make_output(op: str, data: np.ndarray, inputs: Sequence[Optional[Tensor]],
                backward: BackwardFn) -> Tensor:
    """Wrap an op result and record it when a tape is listening"""
    tape = active_tape()
    tracked = tape is not None and any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, dtype=data.dtype)
    if tracked:
        out.is_leaf = False
        tape.record(TapeEntry(op=op, inputs=tuple(inputs), output=out, backward=backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate dLoss into the .grad buffer of every reachable leaf.

    Gradients add onto existing .grad buffers so repeated uses and repeated
    calls accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(tape) == 0:
        raise ValueError("backward called on an empty tape")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError(f"non-finite loss value {loss.data.reshape(-1)[0]}")

    pending = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        grad_out = pending.pop(id(entry.output), None)
        if grad_out is None:
            continue
        needs = tuple(t is not None and t.requires_grad for t in entry.inputs)
        grads = entry.backward(grad_out, needs)
        for tensor, grad in zip(entry.inputs, grads):
            if tensor is None or grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                _accumulate_leaf(tensor, grad, entry.op)
            elif id(tensor) in pending:
                pending[id(tensor)] = pending[id(tensor)] + grad
            else:
                pending[id(tensor)] = grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray, op: str) -> None:
    if grad.shape != tensor.shape:
        raise ShapeError(f"{op} produced gradient of shape {grad.shape} for tensor {tensor.shape}")
    if not np.all(np.isfinite(grad)):
        label = tensor.name or "tensor"
        raise NumericalError(f"non-finite gradient for {label} (via {op})")
    grad = grad.astype(tensor.dtype, copy=False)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
