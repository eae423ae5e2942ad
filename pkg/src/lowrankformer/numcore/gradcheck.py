"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import backward
from .tensor import Tensor, no_tape, recording


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], leaves: dict[str, Tensor], h: float = 1e-5,
              max_coords: int | None = 24, seed: int = 0) -> dict[str, float]:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    ``leaves`` maps names to tensors that ``fn`` reads (parameters or inputs
    created with ``requires_grad=True``). At most ``max_coords`` randomly
    chosen coordinates per leaf are perturbed. Returns the relative error per
    leaf.
    """
    rng = np.random.default_rng(seed)
    for t in leaves.values():
        t.zero_grad()
    with recording() as tape:
        loss = fn()
    backward(tape, loss)
    errors = {}
    with no_tape():
        for name, t in leaves.items():
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            numeric = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = fn().item()
                flat[c] = orig - h
                fm = fn().item()
                flat[c] = orig
                numeric[j] = (fp - fm) / (2 * h)
            analytic = t.grad.reshape(-1)[coords]
            errors[name] = relative_error(analytic, numeric)
    return errors
