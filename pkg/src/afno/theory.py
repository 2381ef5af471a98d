"""Empirical checks of the error-propagation bounds for autoregressive and latent rollouts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baseline import FnoParams, fno_step
from .model import AfnoParams, decode, embed_params, encode, vector_field
from .tensor.autograd import ContractError
from .training import latent_map

ArrayMap = Callable[[np.ndarray], np.ndarray]


def _norm(x) -> float:
    return float(np.sqrt(np.sum(np.square(x))))


# -- Lipschitz estimates ------------------------------------------------------------------

def estimate_lipschitz(f: ArrayMap, probes: Sequence[np.ndarray], scale: float = 1e-3,
                       n_pairs: int = 100, seed: int = 0) -> float:
    """Largest sampled ratio ``||f(u) - f(u')|| / ||u - u'||`` with ``u' = u + scale * d``.

    ``d`` is a random unit direction; ``u`` cycles through ``probes``. The result is
    a lower bound on the true constant. Pairs that round to ``u' == u`` are skipped.
    """
    if scale <= 0:
        raise ContractError(f"perturbation scale must be positive, got {scale}")
    if not len(probes):
        raise ContractError("no probe states")
    rng = np.random.default_rng(seed)
    best = 0.0
    base_cache = {}
    for i in range(n_pairs):
        j = i % len(probes)
        u = np.asarray(probes[j], dtype=float)
        d = rng.normal(size=u.shape)
        u2 = u + scale * d / _norm(d)
        gap = _norm(u2 - u)
        if gap == 0:
            continue
        if j not in base_cache:
            base_cache[j] = np.asarray(f(u))
        best = max(best, _norm(np.asarray(f(u2)) - base_cache[j]) / gap)
    return best


def directional_lipschitz(f: ArrayMap, u: np.ndarray, perturbation: np.ndarray,
                          f_u: np.ndarray | None = None) -> float:
    """``||f(u + p) - f(u)|| / ||p||``: the local constant along ``p`` at its own magnitude."""
    size = _norm(perturbation)
    if size == 0:
        return 0.0
    f_u = np.asarray(f(u)) if f_u is None else f_u
    return _norm(np.asarray(f(u + perturbation)) - f_u) / size


# -- growth fits ------------------------------------------------------------------------------

@dataclass
class GrowthFit:
    linear_slope: float
    linear_intercept: float
    linear_r2: float
    exp_rate: float
    exp_log_intercept: float
    exp_r2: float
    label: str          # "linear" or "exponential"
    n_points: int


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    a = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-30 else 0.0)
    return float(slope), float(intercept), r2


def fit_growth(errors, skip: int = 5, min_points: int = 10) -> GrowthFit:
    """Least-squares fits of ``e_n`` and ``log e_n`` against the step ``n = 1, 2, ...``.

    The first ``skip`` steps are treated as transient. The label is the model with
    the higher R^2 (ties go to linear). Nonpositive entries are left out of the log fit.
    """
    e = np.asarray(errors, dtype=float).ravel()
    n = np.arange(1, len(e) + 1, dtype=float)
    e, n = e[skip:], n[skip:]
    finite = np.isfinite(e)
    e, n = e[finite], n[finite]
    pos = e > 0
    if np.count_nonzero(pos) < min_points:
        raise ContractError(f"fit_growth needs at least {min_points} positive entries after the transient")
    slope, intercept, r2_lin = _line_fit(n, e)
    rate, log_intercept, r2_exp = _line_fit(n[pos], np.log(e[pos]))
    label = "exponential" if r2_exp > r2_lin else "linear"
    return GrowthFit(slope, intercept, r2_lin, rate, log_intercept, r2_exp, label, int(len(e)))


# -- bound checks --------------------------------------------------------------------------

@dataclass
class BoundCheckReport:
    slack: np.ndarray                  # bound right side minus observed left side, per step
    violation_fraction: float
    lhs: np.ndarray
    rhs: np.ndarray
    constants: dict[str, np.ndarray] = field(default_factory=dict)
    growth: GrowthFit | None = None
    physical_slack: np.ndarray | None = None
    physical_violation_fraction: float | None = None


def _violations(slack: np.ndarray, tol: float) -> float:
    return float(np.mean(slack < -tol)) if len(slack) else 0.0


def _maybe_growth(errors: np.ndarray) -> GrowthFit | None:
    try:
        return fit_growth(errors)
    except ContractError:
        return None


def _as_map(step) -> ArrayMap:
    if isinstance(step, FnoParams):
        return lambda u: fno_step(u, step).value
    if callable(step):
        return step
    raise ContractError(f"expected an FNO checkpoint or a callable, got {type(step).__name__}")


def check_prop1(step, trajectory, lipschitz: float | None = None, tol: float = 1e-10) -> BoundCheckReport:
    """Per-step check of ``||e(t+dt)|| <= L ||e(t)|| + eps_t`` for an autoregressive map.

    ``trajectory`` holds ground-truth frames ``[T+1, ...]``; the rollout starts from
    frame 0. ``eps_t = ||F(u_t) - u_{t+dt}||`` is the teacher-forced one-step error.
    Without ``lipschitz`` the local constant at ``u_t`` along ``e(t)`` at its own
    magnitude is used; otherwise the given (global) constant.
    """
    f = _as_map(step)
    u = np.asarray(trajectory, dtype=float)
    if len(u) < 2:
        raise ContractError("need at least two frames")
    u_hat = u[0]
    lhs, rhs, eps, consts, errs = [], [], [], [], []
    for t in range(len(u) - 1):
        f_true = np.asarray(f(u[t]))
        f_hat = np.asarray(f(u_hat))
        e_t = _norm(u_hat - u[t])
        eps_t = _norm(f_true - u[t + 1])
        lip = lipschitz if lipschitz is not None else (_norm(f_hat - f_true) / e_t if e_t > 0 else 0.0)
        lhs.append(_norm(f_hat - u[t + 1]))
        rhs.append(lip * e_t + eps_t)
        eps.append(eps_t)
        consts.append(lip)
        u_hat = f_hat
        errs.append(lhs[-1])
    lhs_a, rhs_a = np.array(lhs), np.array(rhs)
    slack = rhs_a - lhs_a
    return BoundCheckReport(slack, _violations(slack, tol), lhs_a, rhs_a,
                            {"lipschitz": np.array(consts), "eps": np.array(eps)},
                            _maybe_growth(np.array(errs)))


def check_prop2(params: AfnoParams, trajectory, nu, dt, tol: float = 1e-10) -> BoundCheckReport:
    """Latent bound ``||e_z(t+dt)|| <= (1 + dt L_v) ||e_z(t)|| + eps_z`` and the decoded
    bound ``||u_hat - u|| <= L_dec ||e_z|| + eps_rec`` along one trajectory.

    ``e_z`` compares the latent rollout from ``Enc(u_0)`` with the encoded truth;
    ``L_v`` and ``L_dec`` are local directional constants.
    """
    if params.hyper.autoregressive:
        raise ContractError("check_prop2 needs a vector-field model")
    u = np.asarray(trajectory, dtype=float)
    if len(u) < 2:
        raise ContractError("need at least two frames")
    z = encode(u, params).value
    spatial = z.shape[-params.hyper.dims:]
    b = embed_params(nu, dt, params, spatial)

    def v(x):
        return vector_field(x, b, params).value

    def g(x):
        return latent_map(x, nu, dt, params).value

    z_hat = z[0]
    path = [z_hat]
    lhs, rhs, eps, lips = [], [], [], []
    for t in range(len(u) - 1):
        e_t = _norm(z_hat - z[t])
        v_true = v(z[t])
        lip = _norm(v(z_hat) - v_true) / e_t if e_t > 0 else 0.0
        eps_t = _norm(g(z[t]) - z[t + 1])
        nxt = g(z_hat)
        lhs.append(_norm(nxt - z[t + 1]))
        rhs.append((1 + dt * lip) * e_t + eps_t)
        eps.append(eps_t)
        lips.append(lip)
        z_hat = nxt
        path.append(z_hat)
    z_path = np.stack(path)
    dec_hat = decode(z_path, params).value
    dec_true = decode(z, params).value
    phys_lhs, phys_rhs, dec_lips, recs = [], [], [], []
    for t in range(len(u)):
        e_z = _norm(z_path[t] - z[t])
        dec_lip = _norm(dec_hat[t] - dec_true[t]) / e_z if e_z > 0 else 0.0
        rec = _norm(dec_true[t] - u[t])
        phys_lhs.append(_norm(dec_hat[t] - u[t]))
        phys_rhs.append(dec_lip * e_z + rec)
        dec_lips.append(dec_lip)
        recs.append(rec)
    lhs_a, rhs_a = np.array(lhs), np.array(rhs)
    slack = rhs_a - lhs_a
    phys_slack = np.array(phys_rhs) - np.array(phys_lhs)
    return BoundCheckReport(slack, _violations(slack, tol), lhs_a, rhs_a,
                            {"lipschitz_v": np.array(lips), "eps_z": np.array(eps),
                             "lipschitz_dec": np.array(dec_lips), "eps_rec": np.array(recs),
                             "physical_error": np.array(phys_lhs)},
                            _maybe_growth(np.array(phys_lhs[1:])), phys_slack,
                            _violations(phys_slack, tol))


# -- accumulated error comparison ------------------------------------------------------------

@dataclass
class AccumulatedRatio:
    ratio: np.ndarray     # E_K^F / E_K^A for K = 1..n (NaN where the latent sum is zero)
    slope: float
    intercept: float


def accumulated_error_ratio(ar_errors, afno_errors) -> AccumulatedRatio:
    """Ratio of cumulative per-step errors and its least-squares slope in ``K``."""
    ar = np.asarray(ar_errors, dtype=float).ravel()
    af = np.asarray(afno_errors, dtype=float).ravel()
    n = min(len(ar), len(af))
    if n < 2:
        raise ContractError("need at least two steps")
    cum_ar, cum_af = np.cumsum(ar[:n]), np.cumsum(af[:n])
    ratio = np.full(n, np.nan)
    ok = cum_af > 0
    ratio[ok] = cum_ar[ok] / cum_af[ok]
    k = np.arange(1, n + 1, dtype=float)
    good = np.isfinite(ratio)
    if np.count_nonzero(good) < 2:
        return AccumulatedRatio(ratio, math.nan, math.nan)
    slope, intercept, _ = _line_fit(k[good], ratio[good])
    return AccumulatedRatio(ratio, slope, intercept)


# -- latent propagation gain ----------------------------------------------------------------

@dataclass
class PropagationGain:
    eta: float                               # one-step error bound (percentile)
    contributions: np.ndarray                # mean D_i over trajectories, i = 1..K_max
    kappa: dict[float, dict[int, float]]     # per weight split w, per horizon K
    pooled: dict[float, float]               # least-squares kappa over all K, per w
    flatness: float                          # max/min of kappa over K (independent of w)


def _teacher_forced_afno(params: AfnoParams, frames: np.ndarray, nu, dt) -> np.ndarray:
    z = encode(frames[:-1], params).value
    pred = decode(latent_map(z, nu, dt, params).value, params).value
    return np.sqrt(np.sum((pred - frames[1:]).reshape(len(pred), -1) ** 2, axis=1))


def estimate_propagation_gain(params: AfnoParams, trajectories: Sequence[np.ndarray], nu, dt,
                              horizons: Sequence[int] = tuple(range(10, 101, 10)),
                              splits: Sequence[float] = (0.25, 0.5, 0.75), eta: float | None = None,
                              percentile: float = 95.0) -> PropagationGain:
    """``kappa = sum_{i<=K} D_i / (K w eta)`` with ``D_i = max(e_i - eps_rec_i, 0)``.

    ``e_i`` is the decoded rollout error at step ``i`` and ``eps_rec_i`` the
    reconstruction error of the true state. ``eta`` defaults to the given percentile
    of the teacher-forced one-step errors.
    """
    k_max = max(horizons)
    if min(len(t) for t in trajectories) < k_max + 1:
        raise ContractError(f"trajectories are shorter than the largest horizon {k_max}")
    d_rows, one_step = [], []
    for traj in trajectories:
        u = np.asarray(traj, dtype=float)[:k_max + 1]
        z = encode(u, params).value
        z_hat = [z[0]]
        for _ in range(k_max):
            z_hat.append(latent_map(z_hat[-1], nu, dt, params).value)
        dec_hat = decode(np.stack(z_hat), params).value
        dec_true = decode(z, params).value
        err = np.sqrt(np.sum((dec_hat - u).reshape(k_max + 1, -1) ** 2, axis=1))
        rec = np.sqrt(np.sum((dec_true - u).reshape(k_max + 1, -1) ** 2, axis=1))
        d_rows.append(np.maximum(err - rec, 0.0)[1:])
        one_step.append(_teacher_forced_afno(params, u, nu, dt))
    d = np.mean(d_rows, axis=0)
    eta_val = float(np.percentile(np.concatenate(one_step), percentile)) if eta is None else float(eta)
    cum = np.cumsum(d)
    kappa: dict[float, dict[int, float]] = {}
    pooled: dict[float, float] = {}
    ks = np.array(sorted(horizons), dtype=float)
    sums = np.array([cum[int(k) - 1] for k in ks])
    for w in splits:
        scale = ks * w * eta_val
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.where(sums == 0, 0.0, sums / scale)
        kappa[w] = {int(k): float(v) for k, v in zip(ks, vals)}
        pooled[w] = float(np.sum(sums * scale) / np.sum(scale * scale)) if np.any(scale) else (
            0.0 if not np.any(sums) else math.inf)
    any_w = kappa[splits[0]]
    vals = np.array(list(any_w.values()))
    flat = float(vals.max() / vals.min()) if np.all(vals > 0) else (1.0 if np.all(vals == 0) else math.inf)
    return PropagationGain(eta_val, d, kappa, pooled, flat)


def write_bound_csv(path, report: BoundCheckReport) -> None:
    """Per-step slack series with the bound sides and estimated constants."""
    import csv

    n = len(report.slack)
    cols = {"step": np.arange(1, n + 1), "lhs": report.lhs, "rhs": report.rhs, "slack": report.slack}
    cols.update({k: v[:n] for k, v in report.constants.items()})
    if report.physical_slack is not None:
        cols["physical_slack"] = report.physical_slack[1:n + 1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        for i in range(n):
            w.writerow([cols[k][i] for k in cols])
