"""Tensor values and the gradient tape.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient.  Outside a tape every op is a plain
numpy computation, which keeps inference paths cheap.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_TAPE_STACK: list["Tape"] = []
_ids = itertools.count()


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Shapes of operands are inconsistent."""


class ParameterError(ContractError):
    """A layer parameter is outside its valid range."""


def set_default_dtype(dtype) -> None:
    """Select the float width used when tensors are created from raw data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """An n-dimensional array that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in execution order, so the
    record is topologically sorted by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._freed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def _traverse(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self._freed:
            raise ContractError("tape was freed by a previous backward pass; pass retain_graph=True")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out.id, None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        return grads

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        produced = {node.out.id for node in self.nodes}
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.id not in produced:
                    leaves[t.id] = t
        grads = self._traverse(loss)
        for tid, t in leaves.items():
            g = grads.get(tid)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
        if not retain_graph:
            self.nodes = []
            self._freed = True

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor], retain_graph: bool = False) -> list[np.ndarray]:
        """Return d(loss)/d(t) for each ``t`` in ``wrt`` without touching ``.grad``."""
        wrt = list(wrt)
        grads = self._traverse(loss)
        out = [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]
        if loss in wrt:
            out[wrt.index(loss)] = np.ones_like(loss.data)
        if not retain_graph:
            self.nodes = []
            self._freed = True
        return out


def backward(tape: Tape, loss: Tensor, retain_graph: bool = False) -> None:
    tape.backward(loss, retain_graph=retain_graph)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def make_result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` and record the op on the active tape when it needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out
