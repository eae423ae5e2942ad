"""Tensor value type, the recording tape and the MAC counter."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class TapeError(RuntimeError):
    pass


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """Dense real array plus the bookkeeping needed for reverse mode.

    ``requires_grad`` marks tensors whose gradient is wanted (parameters and
    anything computed from them). ``param_only`` is true for parameters and
    for tensors derived from parameters alone; the memory ledger uses it to
    tell activations from weights.
    """

    __slots__ = ("data", "requires_grad", "param_only", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 param_only: bool = False):
        arr = np.asarray(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.param_only = param_only
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(other, -1.0))

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Append-only record of primitive ops, replayed backwards by ``backward``."""

    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(eq=False)
class MacCounter:
    macs: int = 0
    enabled: bool = False

    def add(self, n: int) -> None:
        if self.enabled:
            self.macs += int(n)

    def reset(self) -> None:
        self.macs = 0


class _State:
    tape: Tape | None = None
    counter: MacCounter | None = None
    check_finite: bool = True


STATE = _State()


def active_tape() -> Tape | None:
    tape = STATE.tape
    if tape is not None and tape.enabled:
        return tape
    return None


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record every differentiable op executed inside the block onto ``tape``."""
    tape = Tape() if tape is None else tape
    prev, STATE.tape = STATE.tape, tape
    try:
        yield tape
    finally:
        STATE.tape = prev


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    prev, STATE.tape = STATE.tape, None
    try:
        yield
    finally:
        STATE.tape = prev


@contextlib.contextmanager
def counting_macs(counter: MacCounter | None = None) -> Iterator[MacCounter]:
    counter = MacCounter() if counter is None else counter
    counter.enabled = True
    prev, STATE.counter = STATE.counter, counter
    try:
        yield counter
    finally:
        counter.enabled = False
        STATE.counter = prev


def count_macs(n: int) -> None:
    if STATE.counter is not None:
        STATE.counter.add(n)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev, STATE.check_finite = STATE.check_finite, enabled
    try:
        yield
    finally:
        STATE.check_finite = prev


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
