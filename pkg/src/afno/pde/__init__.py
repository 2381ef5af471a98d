"""Ground-truth trajectory generators for the benchmark equations."""

import numpy as np

from .grid import (DESK_RESOLUTION, FULL_RESOLUTION, PDE_CHANNELS, PDE_DEFAULTS, PDE_DIMS,
                   FieldTrajectory, GridSpec, InstabilityError, SolveConfig, UnknownPdeError,
                   sample_initial_condition)
from .solvers import (SOLVERS, gen_allen_cahn_1d, gen_burgers_1d, gen_cgl_2d, gen_ks_1d, internal_step,
                      gen_ns_2d, gen_swe_2d, ns_forcing, solve_batch)


def generate(cfg: SolveConfig, grid: GridSpec, n_trajectories: int, seed0: int = 0,
             batch_size: int = 16) -> list[FieldTrajectory]:
    """Solve ``n_trajectories`` seeded random initial conditions (seeds ``seed0 + i``)."""
    out: list[FieldTrajectory] = []
    for start in range(0, n_trajectories, batch_size):
        seeds = range(seed0 + start, seed0 + min(start + batch_size, n_trajectories))
        ics = np.stack([sample_initial_condition(cfg.pde, grid, s, cfg.params) for s in seeds])
        out.extend(solve_batch(cfg, grid, ics))
    return out


__all__ = [
    "DESK_RESOLUTION", "FULL_RESOLUTION", "PDE_CHANNELS", "PDE_DEFAULTS", "PDE_DIMS",
    "FieldTrajectory", "GridSpec", "InstabilityError", "SOLVERS", "SolveConfig",
    "UnknownPdeError", "gen_allen_cahn_1d", "gen_burgers_1d", "gen_cgl_2d", "gen_ks_1d",
    "gen_ns_2d", "gen_swe_2d", "generate", "internal_step", "ns_forcing", "sample_initial_condition",
    "solve_batch",
]
