"""Radix-2 iterative FFT with bit-reversal permutation.

Only power-of-two extents are supported. The forward transform is the
unnormalized DFT ``X[k] = sum_n x[n] exp(-2 pi i k n / N)``; the inverse
carries the ``1/N`` factor.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np


class UnsupportedSizeError(ValueError):
    """Raised when a transformed extent is not a power of two."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def check_power_of_two(n: int, what: str = "extent") -> None:
    if not is_power_of_two(int(n)):
        raise UnsupportedSizeError(f"{what} {n} is not a power of two")


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(n: int) -> tuple[np.ndarray, ...]:
    # one table per butterfly stage, half-length m/2 for block size m
    out = []
    m = 2
    while m <= n:
        out.append(np.exp(-2j * np.pi * np.arange(m // 2) / m))
        m *= 2
    return tuple(out)


def _fft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    check_power_of_two(n)
    if n == 1:
        return x.astype(np.complex128, copy=True)
    lead = x.shape[:-1]
    y = np.asarray(x, dtype=np.complex128)
    if inverse:
        y = np.conj(y)
    y = y[..., _bit_reverse(n)]
    m = 2
    for w in _twiddles(n):
        half = m // 2
        y = y.reshape(lead + (n // m, m))
        a = y[..., :half]
        b = y[..., half:] * w
        y = np.concatenate((a + b, a - b), axis=-1)
        m *= 2
    y = y.reshape(lead + (n,))
    if inverse:
        y = np.conj(y) / n
    return y


def _normalize_axes(ndim: int, axes: Iterable[int] | None) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    out = []
    for a in axes:
        a = int(a)
        if a < -ndim or a >= ndim:
            raise np.exceptions.AxisError(a, ndim)
        out.append(a % ndim)
    return tuple(out)


def fft_nd(x, axes: Sequence[int] | None = None) -> np.ndarray:
    """Forward unnormalized DFT along ``axes`` (all axes if None)."""
    y = np.asarray(x, dtype=np.complex128)
    for ax in _normalize_axes(y.ndim, axes):
        y = np.moveaxis(_fft_last(np.moveaxis(y, ax, -1), False), -1, ax)
    return y


def ifft_nd(x, axes: Sequence[int] | None = None) -> np.ndarray:
    """Inverse DFT along ``axes`` with ``1/N`` scaling per axis."""
    y = np.asarray(x, dtype=np.complex128)
    for ax in _normalize_axes(y.ndim, axes):
        y = np.moveaxis(_fft_last(np.moveaxis(y, ax, -1), True), -1, ax)
    return y


def fftfreq_int(n: int) -> np.ndarray:
    """Signed integer wavenumbers in FFT order: 0, 1, ..., n/2-1, -n/2, ..., -1."""
    k = np.arange(n)
    k[k >= n // 2] -= n
    return k


@lru_cache(maxsize=64)
def dft_matrix(n: int, modes: tuple[int, ...], inverse: bool = False) -> np.ndarray:
    """Partial DFT matrix of shape ``(n, len(modes))`` (forward) or its inverse counterpart.

    Forward: ``X[m] = sum_n x[n] M[n, m]`` with ``M = exp(-2 pi i m n / N)``.
    Inverse: ``x[n] = sum_m X[m] M[m, n]`` with ``M = exp(+2 pi i m n / N) / N``.
    """
    check_power_of_two(n)
    grid = np.arange(n)[:, None] * np.asarray(modes)[None, :]
    phase = 2j * np.pi * (grid % n) / n
    if inverse:
        return np.ascontiguousarray((np.exp(phase) / n).T)
    return np.exp(-phase)
