"""Named parameter storage, weight init, binary serialization and backward."""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tape, TapeError, Tensor, resolve_dtype

MAGIC = b"GFL1"


class ParamStore:
    """Ordered map from hierarchical names to trainable tensors.

    Each tensor carries its own gradient slot (``tensor.grad``). Slots
    accumulate across ``backward`` calls; call :meth:`zero_grad` between
    steps.
    """

    def __init__(self, seed: int = 0, dtype="float64"):
        self.rng_seed = int(seed)
        self.dtype = resolve_dtype(dtype)
        self.rng = np.random.default_rng(self.rng_seed)
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name,
                   param_only=True)
        t.zero_grad()
        self._entries[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), shape (fan_in, fan_out)."""
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-a, a, size=(fan_in, fan_out)))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def grad(self, name: str) -> np.ndarray:
        return self[name].grad

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def total_count(self) -> int:
        return sum(t.size for t in self._entries.values())

    def nbytes(self) -> int:
        return sum(t.data.nbytes for t in self._entries.values())

    def set(self, name: str, data) -> None:
        t = self[name]
        data = np.asarray(data, dtype=self.dtype)
        if data.shape != t.shape:
            raise ValueError(f"{name}: shape {data.shape} does not match {t.shape}")
        t.data = data.copy()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.rng_seed, dtype)
        for name, t in self._entries.items():
            out.add(name, t.data)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._entries.items()}

    # -- binary format -------------------------------------------------

    def save(self, path) -> None:
        """Write ``GFL1`` then per entry: name, rank, dims, little-endian payload."""
        fmt = "<f4" if self.dtype == np.float32 else "<f8"
        with open(path, "wb") as f:
            f.write(MAGIC)
            for name, t in self._entries.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(np.ascontiguousarray(t.data, dtype=fmt).tobytes())

    @classmethod
    def load(cls, path, dtype="float64", seed: int = 0) -> "ParamStore":
        """Inverse of :meth:`save`; ``dtype`` is the element width of the payload."""
        dt = resolve_dtype(dtype)
        fmt = "<f4" if dt == np.float32 else "<f8"
        width = np.dtype(fmt).itemsize
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC:
            raise ValueError(f"{path}: bad magic {buf[:4]!r}")
        store = cls(seed, dt)
        pos = 4

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise ValueError(f"{path}: truncated parameter file")
            chunk = buf[pos:pos + n]
            pos += n
            return chunk

        while pos < len(buf):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            count = math.prod(dims)
            data = np.frombuffer(take(count * width), dtype=fmt).reshape(dims)
            store.add(name, data)
        return store


def backward(tape: Tape, loss: Tensor, params: ParamStore | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into the gradient slot of every leaf on ``tape``."""
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    producers = {id(node.out) for node in tape.nodes}
    if id(loss) not in producers:
        raise TapeError("loss was not produced under this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in producers:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g.astype(leaf.dtype, copy=False)
    if params is not None:
        for _, t in params.items():
            if t.grad is None:
                t.zero_grad()
