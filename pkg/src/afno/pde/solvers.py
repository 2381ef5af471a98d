"""Pseudospectral solvers for the six benchmark equations on periodic grids.

Every solver advances a batch of states at once: arrays carry a leading
batch axis followed by the spatial axes. Nonlinear products are de-aliased
with the 2/3 rule.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..tensor.fft import fft_nd, ifft_nd
from .grid import PDE_CHANNELS, FieldTrajectory, GridSpec, InstabilityError, SolveConfig


def _axes(grid: GridSpec) -> list[int]:
    return list(range(-grid.dims, 0))


class _Spectral:
    """FFT helpers bound to one grid."""

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.axes = _axes(grid)
        self.k = grid.wavenumbers()
        self.kd = grid.derivative_wavenumbers()
        self.k2 = sum(k * k for k in self.k)
        self.mask = grid.dealias_mask()

    def fwd(self, u):
        return fft_nd(u, self.axes)

    def inv(self, uh):
        return ifft_nd(uh, self.axes)

    def real(self, uh):
        return ifft_nd(uh, self.axes).real


class _Recorder:
    def __init__(self, cfg: SolveConfig, n_sub: int):
        self.cfg = cfg
        self.n_sub = n_sub
        self.step = 0

    def check(self, *arrays):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise InstabilityError(self.cfg.pde, self.step)
            if np.max(np.abs(a)) > self.cfg.blowup:
                raise InstabilityError(self.cfg.pde, self.step, "blow-up threshold exceeded")


def _run(cfg: SolveConfig, n_sub: int, state, advance: Callable, to_frame: Callable) -> np.ndarray:
    """Save ``n_frames`` frames, calling ``advance`` ``n_sub`` times per interval."""
    rec = _Recorder(cfg, n_sub)
    frames = [to_frame(state)]
    for _ in range(cfg.n_frames - 1):
        for _ in range(n_sub):
            state = advance(state)
            rec.step += 1
        frame = to_frame(state)
        rec.check(frame)
        frames.append(frame)
    return np.stack(frames, axis=1)  # [B, T, C, *spatial]


def _ifrk4(linear: np.ndarray, nonlinear: Callable, dt: float):
    """Integrating-factor RK4 step for ``uh_t = linear * uh + nonlinear(uh)``."""
    e_half = np.exp(0.5 * dt * linear)
    e_full = e_half * e_half

    def step(uh):
        k1 = nonlinear(uh)
        k2 = nonlinear(e_half * (uh + 0.5 * dt * k1))
        k3 = nonlinear(e_half * uh + 0.5 * dt * k2)
        k4 = nonlinear(e_full * uh + dt * e_half * k3)
        return e_full * uh + dt / 6.0 * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)

    return step


def _cfl_dt(cfg: SolveConfig, grid: GridSpec, speed: float, diffusivity: float = 0.0) -> float:
    dx = min(grid.spacing)
    dt = cfg.cfl * dx / max(speed, 1e-12)
    if diffusivity > 0:
        dt = min(dt, cfg.cfl * dx * dx / diffusivity)
    return dt


def internal_step(cfg: SolveConfig, grid: GridSpec, ic) -> float:
    """Target internal step: the configured one, else a CFL-style heuristic.

    The returned value is an upper bound; :meth:`SolveConfig.substeps` shrinks
    it so that it divides the save interval.
    """
    if cfg.dt:
        return float(cfg.dt)
    s0 = _batch(ic, grid, cfg.pde)
    p = cfg.params
    if cfg.pde == "burgers":
        return _cfl_dt(cfg, grid, max(float(np.max(np.abs(s0))), 1e-3), p["nu"])
    if cfg.pde == "allen_cahn":
        return _cfl_dt(cfg, grid, 1.0, p["eps"])
    if cfg.pde == "ks":
        # at least four internal steps per save interval
        speed = max(float(np.max(np.abs(s0))), 3.0)
        return min(_cfl_dt(cfg, grid, speed), cfg.dt_save / 4)
    if cfg.pde == "ns":
        # velocity scale of the induced flow ~ |w| L / 2pi
        speed = max(float(np.max(np.abs(s0))) * max(grid.lengths) / (2 * np.pi), 1e-3)
        return _cfl_dt(cfg, grid, speed, p["nu"])
    if cfg.pde == "swe":
        h_max = max(float(np.max(s0[:, 0])), p["H0"])
        return _cfl_dt(cfg, grid, np.sqrt(p["g"] * h_max) + float(np.max(np.abs(s0[:, 1:]))))
    return _cfl_dt(cfg, grid, 1.0)


def _batch(ic: np.ndarray, grid: GridSpec, pde: str) -> np.ndarray:
    ic = np.asarray(ic, dtype=float)
    if ic.ndim == grid.dims + 1:
        ic = ic[None]
    if ic.shape[1] != PDE_CHANNELS[pde] or ic.shape[2:] != grid.extents:
        raise ValueError(f"{pde}: initial condition shape {ic.shape} does not match grid {grid.extents}")
    if not np.all(np.isfinite(ic)):
        raise InstabilityError(pde, 0, "non-finite initial condition")
    return ic


def _check_pde(cfg: SolveConfig, pde: str):
    if cfg.pde != pde:
        raise ValueError(f"config is for {cfg.pde!r}, solver expects {pde!r}")


# -- 1D -----------------------------------------------------------------------

def solve_burgers(cfg: SolveConfig, grid: GridSpec, ic) -> np.ndarray:
    """``u_t + u u_x = nu u_xx``: CN diffusion, AB2 convection (Euler first step)."""
    _check_pde(cfg, "burgers")
    u0 = _batch(ic, grid, "burgers")[:, 0]
    nu = float(cfg.params["nu"])
    sp = _Spectral(grid)
    (kd,) = sp.kd
    n_sub, dt = cfg.substeps(internal_step(cfg, grid, ic))
    lin = -nu * sp.k2
    lhs = 1.0 - 0.5 * dt * lin
    rhs = 1.0 + 0.5 * dt * lin

    def nonlin(uh):
        u = sp.real(uh)
        return -0.5j * kd * sp.fwd(u * u) * sp.mask

    def advance(state):
        uh, n_prev = state
        n_now = nonlin(uh)
        explicit = n_now if n_prev is None else 1.5 * n_now - 0.5 * n_prev
        return ((rhs * uh + dt * explicit) / lhs, n_now)

    out = _run(cfg, n_sub, (sp.fwd(u0), None), advance, lambda s: sp.real(s[0])[:, None])
    return out


def solve_allen_cahn(cfg: SolveConfig, grid: GridSpec, ic) -> np.ndarray:
    """``u_t = eps u_xx - gamma (u^3 - u)`` with IFRK4."""
    _check_pde(cfg, "allen_cahn")
    u0 = _batch(ic, grid, "allen_cahn")[:, 0]
    eps, gamma = float(cfg.params["eps"]), float(cfg.params["gamma"])
    sp = _Spectral(grid)
    n_sub, dt = cfg.substeps(internal_step(cfg, grid, ic))

    def nonlin(uh):
        u = sp.real(uh)
        return -gamma * sp.fwd(u ** 3 - u) * sp.mask

    step = _ifrk4(-eps * sp.k2, nonlin, dt)
    return _run(cfg, n_sub, sp.fwd(u0), step, lambda uh: sp.real(uh)[:, None])


def solve_ks(cfg: SolveConfig, grid: GridSpec, ic) -> np.ndarray:
    """``u_t + u u_x + u_xx + u_xxxx = 0`` with IFRK4 (four stages per step)."""
    _check_pde(cfg, "ks")
    u0 = _batch(ic, grid, "ks")[:, 0]
    sp = _Spectral(grid)
    (kd,) = sp.kd
    n_sub, dt = cfg.substeps(internal_step(cfg, grid, ic))

    def nonlin(uh):
        u = sp.real(uh)
        return -0.5j * kd * sp.fwd(u * u) * sp.mask

    step = _ifrk4(sp.k2 - sp.k2 ** 2, nonlin, dt)
    return _run(cfg, n_sub, sp.fwd(u0), step, lambda uh: sp.real(uh)[:, None])


# -- 2D -----------------------------------------------------------------------

def ns_forcing(cfg: SolveConfig, grid: GridSpec) -> np.ndarray:
    """Vorticity forcing: zero, or ``A sin(k y)`` (Kolmogorov) when requested."""
    kind = cfg.params.get("forcing", "none")
    if kind in (None, "none"):
        return np.zeros(grid.extents)
    if kind == "kolmogorov":
        _, y = grid.coords()
        k = int(cfg.params["forcing_k"])
        f = float(cfg.params["forcing_amp"]) * np.sin(2 * np.pi * k * y / grid.lengths[1])
        return np.broadcast_to(f, grid.extents).copy()
    raise ValueError(f"unknown forcing {kind!r}")


def solve_ns(cfg: SolveConfig, grid: GridSpec, ic) -> np.ndarray:
    """Vorticity form: ``w_t + u.grad(w) = nu lap(w) + f``, CN viscous, AB2 advection."""
    _check_pde(cfg, "ns")
    w0 = _batch(ic, grid, "ns")[:, 0]
    nu = float(cfg.params["nu"])
    sp = _Spectral(grid)
    kx, ky = sp.kd
    k2 = sp.k2
    inv_k2 = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    fh = sp.fwd(ns_forcing(cfg, grid))
    n_sub, dt = cfg.substeps(internal_step(cfg, grid, ic))
    lhs = 1.0 + 0.5 * dt * nu * k2
    rhs = 1.0 - 0.5 * dt * nu * k2

    def nonlin(wh):
        psih = wh * inv_k2
        u = sp.real(1j * ky * psih)
        v = sp.real(-1j * kx * psih)
        wx = sp.real(1j * kx * wh)
        wy = sp.real(1j * ky * wh)
        return -sp.fwd(u * wx + v * wy) * sp.mask + fh

    def advance(state):
        wh, n_prev = state
        n_now = nonlin(wh)
        explicit = n_now if n_prev is None else 1.5 * n_now - 0.5 * n_prev
        return ((rhs * wh + dt * explicit) / lhs, n_now)

    return _run(cfg, n_sub, (sp.fwd(w0), None), advance, lambda s: sp.real(s[0])[:, None])


def solve_swe(cfg: SolveConfig, grid: GridSpec, ic) -> np.ndarray:
    """Shallow water in rotational (vector-invariant) form with RK4."""
    _check_pde(cfg, "swe")
    s0 = _batch(ic, grid, "swe")
    g, h_mean = float(cfg.params["g"]), float(cfg.params["H0"])
    sp = _Spectral(grid)
    kx, ky = sp.kd
    mask = sp.mask
    n_sub, dt = cfg.substeps(internal_step(cfg, grid, ic))

    def rhs(state):
        hh, uh, vh = state
        h, u, v = sp.real(hh), sp.real(uh), sp.real(vh)
        zeta = sp.real(1j * kx * vh - 1j * ky * uh)
        bern = g * hh + sp.fwd(0.5 * (u * u + v * v)) * mask
        dh = -(1j * kx * sp.fwd(h * u) + 1j * ky * sp.fwd(h * v)) * mask
        du = sp.fwd(zeta * v) * mask - 1j * kx * bern
        dv = -sp.fwd(zeta * u) * mask - 1j * ky * bern
        return np.stack([dh, du, dv])

    def advance(state):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * dt * k1)
        k3 = rhs(state + 0.5 * dt * k2)
        k4 = rhs(state + dt * k3)
        return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    state0 = np.stack([sp.fwd(s0[:, c]) for c in range(3)])  # [3, B, ...]
    return _run(cfg, n_sub, state0, advance, lambda s: np.moveaxis(sp.real(s), 0, 1))


def solve_cgl(cfg: SolveConfig, grid: GridSpec, ic) -> np.ndarray:
    """``A_t = A + (1 + ib) lap(A) - (1 + ic)|A|^2 A`` with IFRK4; channels (Re A, Im A)."""
    _check_pde(cfg, "cgl")
    s0 = _batch(ic, grid, "cgl")
    b, c = float(cfg.params["b"]), float(cfg.params["c"])
    sp = _Spectral(grid)
    n_sub, dt = cfg.substeps(internal_step(cfg, grid, ic))
    linear = 1.0 - (1.0 + 1j * b) * sp.k2

    def nonlin(ah):
        a = sp.inv(ah)
        return -(1.0 + 1j * c) * sp.fwd(np.abs(a) ** 2 * a) * sp.mask

    step = _ifrk4(linear, nonlin, dt)

    def frame(ah):
        a = sp.inv(ah)
        return np.stack([a.real, a.imag], axis=1)

    return _run(cfg, n_sub, sp.fwd(s0[:, 0] + 1j * s0[:, 1]), step, frame)


SOLVERS = {
    "burgers": solve_burgers,
    "allen_cahn": solve_allen_cahn,
    "ks": solve_ks,
    "ns": solve_ns,
    "swe": solve_swe,
    "cgl": solve_cgl,
}


def solve_batch(cfg: SolveConfig, grid: GridSpec, ics) -> list[FieldTrajectory]:
    """Solve several initial conditions sharing one config; one trajectory each."""
    data = SOLVERS[cfg.pde](cfg, grid, ics)
    return [FieldTrajectory(d, cfg.dt_save, grid, cfg) for d in data]


def _single(pde: str):
    def gen(cfg: SolveConfig, ic, grid: GridSpec | None = None) -> FieldTrajectory:
        ic = np.asarray(ic, dtype=float)
        if grid is None:
            spatial = ic.shape[1:]
            grid = GridSpec.for_pde(pde, spatial[0])
            if grid.extents != spatial:
                raise ValueError(f"{pde}: cannot infer grid from shape {ic.shape}")
        _check_pde(cfg, pde)
        return solve_batch(cfg, grid, ic[None])[0]

    gen.__name__ = f"gen_{pde}"
    gen.__doc__ = f"Single {pde} trajectory from an initial state ``[C, *spatial]``."
    return gen


gen_burgers_1d = _single("burgers")
gen_allen_cahn_1d = _single("allen_cahn")
gen_ks_1d = _single("ks")
gen_ns_2d = _single("ns")
gen_swe_2d = _single("swe")
gen_cgl_2d = _single("cgl")
