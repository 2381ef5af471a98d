"""Grids, solve configurations, trajectories and random initial conditions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..tensor.fft import check_power_of_two, fftfreq_int

PDE_CHANNELS = {"burgers": 1, "allen_cahn": 1, "ks": 1, "ns": 1, "swe": 3, "cgl": 2}
PDE_DIMS = {"burgers": 1, "allen_cahn": 1, "ks": 1, "ns": 2, "swe": 2, "cgl": 2}

# physical constants, domain length, horizon and frame count per equation
PDE_DEFAULTS: dict[str, dict[str, Any]] = {
    "burgers": dict(params={"nu": 0.01}, length=2 * math.pi, t_end=1.0, n_frames=101, cfl=0.1),
    "allen_cahn": dict(params={"eps": 1e-4, "gamma": 5.0}, length=1.0, t_end=1.0,
                       n_frames=101, dt=1e-4),
    "ks": dict(params={}, length=64.0, t_end=10.0, n_frames=101),
    "ns": dict(params={"nu": 1e-3, "forcing": "none", "forcing_amp": 0.1, "forcing_k": 4},
               length=2 * math.pi, t_end=20.0, n_frames=21, cfl=0.1),
    "swe": dict(params={"g": 1.0, "H0": 1.0}, length=2 * math.pi, t_end=2.0, n_frames=21,
                cfl=0.15),
    "cgl": dict(params={"b": 2.0, "c": -2.0}, length=32.0, t_end=2.0, n_frames=21, dt=1e-3),
}

DESK_RESOLUTION = {1: 256, 2: 64}
FULL_RESOLUTION = {"burgers": 1024, "allen_cahn": 1024, "ks": 1024, "ns": 64, "swe": 64,
                    "cgl": 128}


class UnknownPdeError(ValueError):
    pass


class InstabilityError(RuntimeError):
    """A solver produced a non-finite or blown-up state."""

    def __init__(self, pde: str, step: int, reason: str = "non-finite value"):
        super().__init__(f"{pde}: {reason} at internal step {step}")
        self.pde = pde
        self.step = step


@dataclass(frozen=True)
class GridSpec:
    extents: tuple[int, ...]
    lengths: tuple[float, ...]

    def __post_init__(self):
        if len(self.extents) not in (1, 2) or len(self.lengths) != len(self.extents):
            raise ValueError(f"grid must be 1D or 2D with matching lengths: {self}")
        for n in self.extents:
            check_power_of_two(n, "grid extent")
            if n < 8:
                raise ValueError(f"grid extent {n} < 8")
        if any(l <= 0 for l in self.lengths):
            raise ValueError(f"domain lengths must be positive: {self.lengths}")

    @property
    def dims(self) -> int:
        return len(self.extents)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(l / n for l, n in zip(self.lengths, self.extents))

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis."""
        out = []
        for i, (n, l) in enumerate(zip(self.extents, self.lengths)):
            shape = [1] * self.dims
            shape[i] = n
            out.append((np.arange(n) * (l / n)).reshape(shape))
        return out

    def wavenumbers(self) -> list[np.ndarray]:
        """Broadcastable angular wavenumbers ``2 pi m / L`` in FFT order."""
        out = []
        for i, (n, l) in enumerate(zip(self.extents, self.lengths)):
            shape = [1] * self.dims
            shape[i] = n
            out.append((2 * np.pi / l * fftfreq_int(n)).reshape(shape).astype(float))
        return out

    def derivative_wavenumbers(self) -> list[np.ndarray]:
        """Like :meth:`wavenumbers` with the Nyquist mode zeroed (odd derivatives)."""
        ks = self.wavenumbers()
        for i, n in enumerate(self.extents):
            idx = [slice(None)] * self.dims
            idx[i] = n // 2
            ks[i] = ks[i].copy()
            ks[i][tuple(idx)] = 0.0
        return ks

    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: keep integer modes with ``|m| <= N/3`` on every axis."""
        mask = np.ones(self.extents, dtype=bool)
        for i, n in enumerate(self.extents):
            shape = [1] * self.dims
            shape[i] = n
            keep = (np.abs(fftfreq_int(n)) <= n // 3).reshape(shape)
            mask = mask & keep
        return mask

    @classmethod
    def for_pde(cls, pde: str, resolution: int | None = None) -> "GridSpec":
        if pde not in PDE_DEFAULTS:
            raise UnknownPdeError(f"unknown pde {pde!r}; expected one of {sorted(PDE_DEFAULTS)}")
        d = PDE_DIMS[pde]
        n = resolution or DESK_RESOLUTION[d]
        length = PDE_DEFAULTS[pde]["length"]
        return cls((n,) * d, (float(length),) * d)


@dataclass
class SolveConfig:
    pde: str
    params: dict[str, Any] = field(default_factory=dict)
    t_end: float | None = None
    n_frames: int | None = None
    dt: float | None = None       # internal step target; None selects the heuristic
    cfl: float | None = None      # None selects the per-equation default (0.25 unless listed)
    seed: int = 0
    blowup: float = 1e6

    def __post_init__(self):
        if self.pde not in PDE_DEFAULTS:
            raise UnknownPdeError(f"unknown pde {self.pde!r}; expected one of {sorted(PDE_DEFAULTS)}")
        d = PDE_DEFAULTS[self.pde]
        self.params = {**d["params"], **self.params}
        if self.t_end is None:
            self.t_end = d["t_end"]
        if self.n_frames is None:
            self.n_frames = d["n_frames"]
        if self.dt is None:
            self.dt = d.get("dt")
        if self.cfl is None:
            self.cfl = d.get("cfl", 0.25)
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")

    @property
    def dt_save(self) -> float:
        return self.t_end / (self.n_frames - 1)

    def substeps(self, dt_target: float) -> tuple[int, float]:
        """Number of internal steps per save interval and the resulting step size."""
        n_sub = max(1, math.ceil(self.dt_save / dt_target - 1e-9))
        return n_sub, self.dt_save / n_sub

    def to_dict(self) -> dict[str, Any]:
        return dict(pde=self.pde, params=dict(self.params), t_end=self.t_end,
                    n_frames=self.n_frames, dt=self.dt, cfl=self.cfl, seed=self.seed,
                    blowup=self.blowup)


@dataclass
class FieldTrajectory:
    data: np.ndarray          # [T, C, *spatial]
    dt_save: float
    grid: GridSpec
    config: SolveConfig

    def __post_init__(self):
        if self.data.shape[0] != self.config.n_frames:
            raise ValueError(f"{self.data.shape[0]} frames, config declares {self.config.n_frames}")
        if self.data.shape[1] != PDE_CHANNELS[self.config.pde]:
            raise ValueError(f"channel count {self.data.shape[1]} wrong for {self.config.pde}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("trajectory contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def _band_limited(grid: GridSpec, rng: np.random.Generator, n_modes: int = 8) -> np.ndarray:
    """Random real field from the lowest ``n_modes`` modes per axis, zero mean, unit max."""
    xs = grid.coords()
    field_ = np.zeros(grid.extents)
    if grid.dims == 1:
        (x,) = xs
        for m in range(1, n_modes + 1):
            a, b = rng.standard_normal(2)
            ph = 2 * np.pi * m * x / grid.lengths[0]
            field_ += a * np.cos(ph) + b * np.sin(ph)
    else:
        x, y = xs
        for mx in range(0, n_modes + 1):
            for my in range(-n_modes, n_modes + 1):
                if mx == 0 and my <= 0:
                    continue  # half plane; skips the mean and duplicate partners
                a, b = rng.standard_normal(2)
                ph = 2 * np.pi * (mx * x / grid.lengths[0] + my * y / grid.lengths[1])
                field_ += a * np.cos(ph) + b * np.sin(ph)
    return field_ / np.max(np.abs(field_))


def sample_initial_condition(pde: str, grid: GridSpec, seed: int, params: dict | None = None) -> np.ndarray:
    """Seeded band-limited random initial state of shape ``[C, *spatial]``."""
    if pde not in PDE_DEFAULTS:
        raise UnknownPdeError(f"unknown pde {pde!r}")
    rng = np.random.default_rng(seed)
    if pde == "swe":
        h0 = {**PDE_DEFAULTS["swe"]["params"], **(params or {})}["H0"]
        h = h0 + 0.1 * _band_limited(grid, rng)
        zero = np.zeros(grid.extents)
        return np.stack([h, zero, zero.copy()])
    if pde == "cgl":
        return 0.1 * np.stack([_band_limited(grid, rng), _band_limited(grid, rng)])
    return _band_limited(grid, rng)[None]
