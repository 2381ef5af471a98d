"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Var


def analytic_grads(fn: Callable[..., Var], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = fn(*leaves)
    tape.backward(loss)
    return [leaf.grad for leaf in leaves]


def numeric_grads(fn: Callable[..., Var], arrays: Sequence[np.ndarray],
                  eps: float = 1e-6) -> list[np.ndarray]:
    base = [np.array(a, dtype=float, copy=True) for a in arrays]
    out = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            fp = float(fn(*[Var(b) for b in base]).value)
            flat[j] = old - eps
            fm = float(fn(*[Var(b) for b in base]).value)
            flat[j] = old
            gflat[j] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def gradcheck(fn: Callable[..., Var], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> list[float]:
    """Per-input max relative discrepancy between the tape and finite differences."""
    ana = analytic_grads(fn, arrays)
    num = numeric_grads(fn, arrays, eps)
    return [relative_error(a, n) for a, n in zip(ana, num)]
