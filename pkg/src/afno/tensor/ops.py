"""Differentiable primitives.

Every function takes :class:`Var` (or array-like) operands and returns a
:class:`Var`. Binary elementwise primitives accept identical shapes or
leading-batch broadcasting only: one operand's shape must be a suffix of the
other's.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import ShapeError, Var, as_var, emit
from .fft import dft_matrix, fft_nd, ifft_nd

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform (only leading-batch broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _fit(g: np.ndarray, like: Var) -> np.ndarray:
    g = _unbroadcast(g, like.shape)
    if not like.is_complex and np.iscomplexobj(g):
        g = g.real
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return emit(a.value + b.value, (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return emit(a.value - b.value, (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return emit(av * bv, (a, b),
                lambda g: (_fit(g * np.conj(bv), a), _fit(g * np.conj(av), b)))


def scale(x, c) -> Var:
    """Multiply by a constant scalar ``c`` (no gradient to ``c``)."""
    x = as_var(x)
    return emit(x.value * c, (x,), lambda g: (_fit(g * np.conj(c), x),))


def square(x) -> Var:
    x = as_var(x)
    xv = x.value
    return emit(xv * xv, (x,), lambda g: (_fit(2.0 * g * np.conj(xv), x),))


def abs2(x) -> Var:
    """``|x|^2`` elementwise; real output for complex input."""
    x = as_var(x)
    xv = x.value
    return emit((xv * np.conj(xv)).real, (x,), lambda g: (_fit(2.0 * g * xv, x),))


def gelu(x) -> Var:
    """Tanh-approximation GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = as_var(x)
    xv = x.value
    # in-place chains: these arrays are the largest in the network
    t = np.array(xv * xv, dtype=float, ndmin=0)
    t *= GELU_A
    t += 1.0
    t *= xv
    t *= GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xv
    out *= 0.5

    def vjp(g):
        d = np.array(xv * xv, dtype=float)
        d *= 3.0 * GELU_A
        d += 1.0
        d *= GELU_C
        d *= xv
        sech2 = np.array(t * t)
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return emit(out, (x,), vjp)


def gelu_value(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


# -- reductions ----------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    x = as_var(x)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return emit(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    count = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear maps ---------------------------------------------------------

def matmul(a, b) -> Var:
    """``np.matmul`` with leading-batch broadcasting."""
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    av, bv = a.value, b.value

    def vjp(g):
        ga = np.matmul(g, np.conj(np.swapaxes(bv, -1, -2)))
        gb = np.matmul(np.conj(np.swapaxes(av, -1, -2)), g)
        return _fit(ga, a), _fit(gb, b)

    return emit(np.matmul(av, bv), (a, b), vjp)


def channel_map(w, x, bias=None, spatial_ndim: int = 1) -> Var:
    """Pointwise (1x1) channel mixing: ``y[..., o, s] = sum_i w[o, i] x[..., i, s] + bias[o]``.

    ``x`` has layout ``[..., C_in, *spatial]`` with ``spatial_ndim`` trailing axes.
    """
    w, x = as_var(w), as_var(x)
    c_in = x.shape[-spatial_ndim - 1] if x.ndim > spatial_ndim else None
    if w.ndim != 2 or c_in != w.shape[1]:
        raise ShapeError(f"channel_map: weight {w.shape} does not match input {x.shape}")
    lead = x.shape[:-spatial_ndim - 1]
    spatial = x.shape[x.ndim - spatial_ndim:]
    p = int(np.prod(spatial))
    xr = x.value.reshape(lead + (c_in, p))
    wv = w.value
    y = np.matmul(wv, xr)
    inputs = [w, x]
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"channel_map: bias {bias.shape} does not match weight {w.shape}")
        y = y + bias.value[:, None]
        inputs.append(bias)
    out_shape = lead + (w.shape[0],) + spatial

    def vjp(g):
        gr = g.reshape(lead + (w.shape[0], p))
        g2 = gr.reshape(-1, w.shape[0], p)
        x2 = xr.reshape(-1, c_in, p)
        gw = np.matmul(g2, np.conj(np.swapaxes(x2, -1, -2))).sum(axis=0)
        gx = np.matmul(np.conj(wv.T), gr).reshape(x.shape)
        grads = [_fit(gw, w), _fit(gx, x)]
        if bias is not None:
            grads.append(_fit(g2.sum(axis=(0, 2)), bias))
        return tuple(grads)

    return emit(y.reshape(out_shape), inputs, vjp)


def modal_product(r, x, spatial_ndim: int = 1) -> Var:
    """Per-mode complex channel mixing ``y[..., o, m] = sum_i r[o, i, m] x[..., i, m]``."""
    r, x = as_var(r), as_var(x)
    modes = r.shape[2:]
    if len(modes) != spatial_ndim or x.shape[x.ndim - spatial_ndim:] != modes \
            or x.shape[-spatial_ndim - 1] != r.shape[1]:
        raise ShapeError(f"modal_product: kernel {r.shape} does not match input {x.shape}")
    c_out, c_in = r.shape[:2]
    lead = x.shape[:-spatial_ndim - 1]
    mp = int(np.prod(modes))
    rm = np.moveaxis(r.value.reshape(c_out, c_in, mp), -1, 0)            # (M, O, I)
    xm = np.moveaxis(x.value.reshape((-1, c_in, mp)), (0, 1, 2), (2, 1, 0))  # (M, I, B)
    ym = np.matmul(rm, xm)                                               # (M, O, B)
    out = np.moveaxis(ym, (0, 1, 2), (2, 1, 0)).reshape(lead + (c_out,) + modes)

    def vjp(g):
        gm = np.moveaxis(g.reshape((-1, c_out, mp)), (0, 1, 2), (2, 1, 0))   # (M, O, B)
        gx = np.matmul(np.conj(np.swapaxes(rm, -1, -2)), gm)                  # (M, I, B)
        gr = np.matmul(gm, np.conj(np.swapaxes(xm, -1, -2)))                  # (M, O, I)
        gx = np.moveaxis(gx, (0, 1, 2), (2, 1, 0)).reshape(x.shape)
        gr = np.moveaxis(gr, 0, -1).reshape(r.shape)
        return _fit(gr, r), _fit(gx, x)

    return emit(out, (r, x), vjp)


# -- spectral ------------------------------------------------------------

def _axes_size(shape, axes) -> int:
    return int(np.prod([shape[a] for a in axes]))


def fft(x, axes: Sequence[int]) -> Var:
    """Unnormalized forward DFT along ``axes`` (radix-2)."""
    x = as_var(x)
    axes = tuple(axes)
    n = _axes_size(x.shape, axes)
    return emit(fft_nd(x.value, axes), (x,), lambda g: (_fit(n * ifft_nd(g, axes), x),))


def ifft(x, axes: Sequence[int]) -> Var:
    """Inverse DFT along ``axes`` with ``1/N`` scaling."""
    x = as_var(x)
    axes = tuple(axes)
    n = _axes_size(x.shape, axes)
    return emit(ifft_nd(x.value, axes), (x,), lambda g: (_fit(fft_nd(g, axes) / n, x),))


def _apply_along(v: np.ndarray, mat: np.ndarray, axis: int, real_out: bool = False) -> np.ndarray:
    """``v @ mat`` along ``axis``; real operands use one stacked real matmul."""
    moved = np.moveaxis(v, axis, -1)
    n_out = mat.shape[1]
    if real_out:
        # Re(v @ mat) = [Re v, Im v] @ [Re mat; -Im mat]
        if np.iscomplexobj(moved):
            stacked = np.concatenate([moved.real, moved.imag], axis=-1)
            res = np.matmul(stacked, np.concatenate([mat.real, -mat.imag], axis=0))
        else:
            res = np.matmul(moved, mat.real)
    elif np.iscomplexobj(moved):
        res = np.matmul(moved, mat)
    else:
        both = np.matmul(moved, np.concatenate([mat.real, mat.imag], axis=1))
        res = both[..., :n_out] + 1j * both[..., n_out:]
    return np.moveaxis(res, -1, axis)


def dft_modes(x, axes: Sequence[int], modes: Sequence[Sequence[int]]) -> Var:
    """Forward DFT restricted to selected wavenumbers per axis.

    Equal to ``take(fft(x, axes), ...)`` but evaluated as a partial DFT
    matrix product, which is far cheaper when few modes are kept.
    """
    x = as_var(x)
    axes = tuple(a % x.ndim for a in axes)
    mats = [dft_matrix(x.shape[a], tuple(int(m) for m in ms)) for a, ms in zip(axes, modes)]
    out = x.value
    for a, m in zip(axes, mats):
        out = _apply_along(out, m, a)

    def vjp(g):
        steps = list(zip(reversed(axes), reversed(mats)))
        for i, (a, m) in enumerate(steps):
            g = _apply_along(g, np.conj(m.T), a, real_out=not x.is_complex and i == len(steps) - 1)
        return (_fit(g, x),)

    return emit(out, (x,), vjp)


def idft_modes(y, axes: Sequence[int], modes: Sequence[Sequence[int]], sizes: Sequence[int],
               real_output: bool = False) -> Var:
    """Inverse DFT of a spectrum that is zero outside the selected modes.

    Equal to ``ifft(pad(y, ...))`` onto a grid of extents ``sizes``; with
    ``real_output`` only the real part is formed.
    """
    y = as_var(y)
    axes = tuple(a % y.ndim for a in axes)
    mats = [dft_matrix(int(n), tuple(int(m) for m in ms), inverse=True)
            for n, ms in zip(sizes, modes)]
    out = y.value
    for i, (a, m) in enumerate(zip(axes, mats)):
        out = _apply_along(out, m, a, real_out=real_output and i == len(axes) - 1)
    if not real_output and not np.iscomplexobj(out):
        out = out.astype(np.complex128)

    def vjp(g):
        steps = list(zip(reversed(axes), reversed(mats)))
        for i, (a, m) in enumerate(steps):
            g = _apply_along(g, np.conj(m.T), a, real_out=not y.is_complex and i == len(steps) - 1)
        return (_fit(g, y),)

    return emit(out, (y,), vjp)


def real(x) -> Var:
    x = as_var(x)
    if not x.is_complex:
        return x
    return emit(x.value.real.copy(), (x,), lambda g: (g.astype(np.complex128),))


def to_complex(x) -> Var:
    x = as_var(x)
    return emit(x.value.astype(np.complex128), (x,), lambda g: (_fit(g, x),))


def complex_from_pair(x) -> Var:
    """Interpret a real array ``[..., 2]`` as (re, im) pairs."""
    x = as_var(x)
    if x.shape[-1] != 2 or x.is_complex:
        raise ShapeError(f"complex_from_pair expects a real [..., 2] array, got {x.shape}")
    out = x.value[..., 0] + 1j * x.value[..., 1]
    return emit(out, (x,), lambda g: (np.stack((g.real, g.imag), axis=-1),))


def conj(x) -> Var:
    x = as_var(x)
    return emit(np.conj(x.value), (x,), lambda g: (np.conj(g),))


# -- structural ----------------------------------------------------------

def take(x, indices, axis: int) -> Var:
    """Gather ``indices`` along ``axis`` (slice); adjoint scatter-adds."""
    x = as_var(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def vjp(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return emit(np.take(x.value, idx, axis=axis), (x,), vjp)


def pad(x, indices, axis: int, size: int) -> Var:
    """Scatter ``x`` into a zero array of extent ``size`` along ``axis`` at ``indices``."""
    x = as_var(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.value.dtype)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(x.value, axis, 0))
    return emit(out, (x,), lambda g: (_fit(np.take(g, idx, axis=axis), x),))


def roll(x, shift: int, axis: int) -> Var:
    x = as_var(x)
    return emit(np.roll(x.value, shift, axis=axis), (x,),
                lambda g: (np.roll(g, -shift, axis=axis),))


def concat(xs: Sequence, axis: int) -> Var:
    xs = [as_var(x) for x in xs]
    vals = [x.value for x in xs]
    ref = vals[0].ndim
    axis = axis % ref
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(_fit(p, x) for p, x in zip(np.split(g, bounds, axis=axis), xs))

    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[v.shape for v in vals]}: {exc}") from None
    return emit(out, xs, vjp)


def stack(xs: Sequence, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    try:
        out = np.stack([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[x.shape for x in xs]}: {exc}") from None

    def vjp(g):
        return tuple(_fit(np.take(g, i, axis=axis), x) for i, x in enumerate(xs))

    return emit(out, xs, vjp)


def reshape(x, shape) -> Var:
    x = as_var(x)
    return emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def broadcast_spatial(x, spatial: Sequence[int]) -> Var:
    """Tile ``x[..., m]`` to ``[..., m, *spatial]``."""
    x = as_var(x)
    spatial = tuple(int(s) for s in spatial)
    k = len(spatial)
    out = np.broadcast_to(x.value.reshape(x.shape + (1,) * k), x.shape + spatial).copy()
    return emit(out, (x,), lambda g: (g.sum(axis=tuple(range(-k, 0))),))
