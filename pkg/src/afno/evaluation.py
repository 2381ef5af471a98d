"""Metric suite, rollout curves, energy spectra, latent PCA and FLOP/latency counts."""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .baseline import FnoParams, ar_rollout
from .model import AfnoParams, decode, encode, mode_shape
from .pde.grid import FieldTrajectory
from .tensor.autograd import ContractError
from .tensor.fft import fft_nd, fftfreq_int
from .training import DivergenceError, conditioning_value, latent_rollout, training_frames

# truth norms below this make relative metrics undefined
NORM_FLOOR = 1e-14


# -- pointwise and relative metrics --------------------------------------------------

@dataclass
class MetricReport:
    rel_l2: float
    rel_h1: float
    mse: float
    rmse: float
    mae: float
    max_error: float
    nrmse: float
    frmse: float
    crmse: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


METRIC_NAMES = tuple(MetricReport.__dataclass_fields__)


def central_gradients(u: np.ndarray, dims: int, lengths: Sequence[float] | None = None) -> list[np.ndarray]:
    """Periodic central differences along the last ``dims`` axes."""
    out = []
    for i in range(dims):
        ax = u.ndim - dims + i
        n = u.shape[ax]
        h = (lengths[i] / n) if lengths is not None else 1.0
        out.append((np.roll(u, -1, ax) - np.roll(u, 1, ax)) / (2 * h))
    return out


def _h1_sq(u: np.ndarray, dims: int, lengths) -> float:
    return float(np.sum(u * u) + sum(np.sum(g * g) for g in central_gradients(u, dims, lengths)))


def metric_suite(pred, truth, dims: int = 1, lengths: Sequence[float] | None = None,
                 crmse_mode: str = "sum") -> MetricReport:
    """All nine metrics for one trajectory ``[T, ..., *spatial]`` (frames on axis 0).

    Relative metrics are NaN when the truth norm is below ``NORM_FLOOR``.
    ``lengths`` sets the grid spacing of the gradient terms (unit spacing if omitted).
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ContractError(f"metric_suite: shapes {pred.shape} and {truth.shape} differ")
    if pred.ndim < dims + 1:
        raise ContractError("metric_suite: need a frame axis plus spatial axes")
    if crmse_mode not in ("sum", "mean"):
        raise ContractError(f"crmse_mode must be 'sum' or 'mean', got {crmse_mode!r}")
    err = pred - truth
    mse = float(np.mean(err ** 2))
    frame_rmse = np.sqrt(np.mean(err.reshape(len(err), -1) ** 2, axis=1))
    truth_norm = math.sqrt(float(np.sum(truth ** 2)))
    if truth_norm < NORM_FLOOR:
        rel_l2 = rel_h1 = nrmse = math.nan
    else:
        rel_l2 = math.sqrt(float(np.sum(err ** 2))) / truth_norm
        rel_h1 = math.sqrt(_h1_sq(err, dims, lengths) / _h1_sq(truth, dims, lengths))
        nrmse = math.sqrt(mse) / math.sqrt(float(np.mean(truth ** 2)))
    return MetricReport(
        rel_l2=rel_l2, rel_h1=rel_h1, mse=mse, rmse=math.sqrt(mse), mae=float(np.mean(np.abs(err))),
        max_error=float(np.max(np.abs(err))), nrmse=nrmse, frmse=float(frame_rmse[-1]),
        crmse=float(np.sum(frame_rmse) if crmse_mode == "sum" else np.mean(frame_rmse)))


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of each metric over reports; NaN sentinels are excluded per metric."""
    if not reports:
        raise ContractError("no reports to average")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        ok = np.isfinite(vals)
        out[name] = float(np.mean(vals[ok])) if np.any(ok) else math.nan
    return MetricReport(**out)


# -- rollouts --------------------------------------------------------------------------

@dataclass
class RolloutCurve:
    mse: np.ndarray
    rel_l2: np.ndarray
    rel_h1: np.ndarray
    diverged_at: int | None = None    # first step that produced non-finite values, if any
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def steps(self) -> int:
        return len(self.mse)

    def rows(self) -> list[dict[str, float]]:
        return [{"step": i + 1, "mse": float(self.mse[i]), "rel_l2": float(self.rel_l2[i]),
                 "rel_h1": float(self.rel_h1[i])} for i in range(self.steps)]


def rollout_curve(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], dims: int = 1,
                  lengths: Sequence[float] | None = None,
                  diverged_at: int | None = None) -> RolloutCurve:
    """Per-step metrics averaged over the set; ``preds[i]`` and ``truths[i]`` are
    ``[T, C, *spatial]`` for steps 1..T (NaN relative entries are skipped)."""
    if len(preds) != len(truths) or not preds:
        raise ContractError("need matching, non-empty prediction and truth sets")
    n_steps = min(p.shape[0] for p in preds)
    mse = np.zeros((len(preds), n_steps))
    rel = np.full((len(preds), n_steps), np.nan)
    rel_h1 = np.full((len(preds), n_steps), np.nan)
    for i, (p, t) in enumerate(zip(preds, truths)):
        for s in range(n_steps):
            m = metric_suite(p[s:s + 1], t[s:s + 1], dims, lengths)
            mse[i, s], rel[i, s], rel_h1[i, s] = m.mse, m.rel_l2, m.rel_h1
    counts = np.sum(np.isfinite(rel), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return RolloutCurve(mse.mean(axis=0), np.nanmean(rel, axis=0), np.nanmean(rel_h1, axis=0),
                            diverged_at, counts)


def predict_rollout(model, u0: np.ndarray, n_steps: int, nu=None, dt=None) -> np.ndarray:
    """``[n_steps + 1, ...]`` physical-space prediction from ``u0`` (batched or not).

    Latent models encode once, integrate in latent space and decode every state;
    FNO baselines feed each decoded prediction back.
    """
    if isinstance(model, FnoParams):
        return ar_rollout(u0, model, n_steps)
    if not isinstance(model, AfnoParams):
        raise ContractError(f"unsupported model type {type(model).__name__}")
    z = latent_rollout(encode(u0, model).value, nu, dt, n_steps, model)
    return np.stack([decode(zs, model).value for zs in z])


def _eval_frames(model, trajectories: Sequence[FieldTrajectory]) -> list[np.ndarray]:
    return training_frames(trajectories, model.hyper.resolution)


def rollout_eval(model, trajectories: Sequence[FieldTrajectory], n_steps: int,
                 start_frame: int = 0) -> tuple[RolloutCurve, MetricReport]:
    """Roll every test trajectory ``n_steps`` from ``start_frame`` and score it.

    Divergence truncates the curve at the last finite step and sets ``diverged_at``.
    Steps past the end of the data are not scored.
    """
    if not trajectories:
        raise ContractError("no test trajectories")
    frames = _eval_frames(model, trajectories)
    available = min(f.shape[0] for f in frames) - 1 - start_frame
    if available < 1:
        raise ContractError("start frame leaves nothing to compare")
    steps = min(n_steps, available)
    u0 = np.stack([f[start_frame] for f in frames])
    nu = np.array([conditioning_value(t) for t in trajectories])
    dt = np.array([t.dt_save for t in trajectories])
    diverged = None
    try:
        pred = predict_rollout(model, u0, steps, nu, dt)
    except DivergenceError as exc:
        diverged = exc.step
        if diverged is None or diverged <= 1:
            raise
        steps = diverged - 1
        pred = predict_rollout(model, u0, steps, nu, dt)
    preds = [pred[1:, i] for i in range(len(frames))]
    truths = [f[start_frame + 1:start_frame + 1 + steps] for f in frames]
    dims = model.hyper.dims
    lengths = trajectories[0].grid.lengths
    curve = rollout_curve(preds, truths, dims, lengths, diverged)
    report = average_reports([metric_suite(p, t, dims, lengths) for p, t in zip(preds, truths)])
    return curve, report


def one_step_errors(model, trajectories: Sequence[FieldTrajectory]) -> np.ndarray:
    """Teacher-forced one-step L2 errors ``||step(u_t) - u_{t+1}||`` over all frames."""
    frames = _eval_frames(model, trajectories)
    out = []
    for traj, f in zip(trajectories, frames):
        pred = predict_step(model, f[:-1], conditioning_value(traj), traj.dt_save)
        out.append(np.sqrt(np.sum((pred - f[1:]).reshape(len(pred), -1) ** 2, axis=1)))
    return np.concatenate(out)


def predict_step(model, u: np.ndarray, nu, dt) -> np.ndarray:
    """One decoded step from physical states ``u`` (any leading batch)."""
    return predict_rollout(model, u, 1, nu, dt)[1]


# -- energy spectrum -------------------------------------------------------------------

def energy_spectrum(u, dims: int = 1) -> np.ndarray:
    """Modal energy ``|FFT u|^2 / N^2`` binned into integer wavenumber shells.

    Leading axes (channels) are summed. In 2D the shell is the rounded radius.
    The entries sum to the grid mean of ``u^2``.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim < dims:
        raise ContractError("energy_spectrum: fewer axes than spatial dimensions")
    spatial = u.shape[-dims:]
    axes = tuple(range(u.ndim - dims, u.ndim))
    uh = fft_nd(u, axes)
    n_total = int(np.prod(spatial))
    power = np.abs(uh) ** 2 / n_total ** 2
    power = power.reshape((-1,) + spatial).sum(axis=0)
    grids = np.meshgrid(*[fftfreq_int(n) for n in spatial], indexing="ij")
    radius = np.sqrt(sum(g.astype(float) ** 2 for g in grids))
    shell = np.rint(radius).astype(int)
    return np.bincount(shell.ravel(), weights=power.ravel())


# -- latent PCA ------------------------------------------------------------------------

@dataclass
class PcaResult:
    trajectory: np.ndarray            # [T, r]
    components: np.ndarray            # [r, D]
    explained_variance: np.ndarray    # [r] eigenvalues of the covariance
    explained_ratio: np.ndarray       # [r] fraction of total variance


def pca_project(frames, dims: int = 2, tol: float = 1e-13, max_iter: int = 20000,
                seed: int = 0) -> PcaResult:
    """Top principal directions by power iteration with deflation on the covariance.

    The covariance is applied as ``X^T (X v) / (T - 1)`` without being formed.
    """
    x = np.asarray(frames, dtype=float)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    if len(x) < 3:
        raise ContractError("pca_project needs at least 3 frames")
    x = x - x.mean(axis=0)
    n = len(x)
    total = float(np.sum(x * x)) / (n - 1)
    rng = np.random.default_rng(seed)
    comps: list[np.ndarray] = []
    eigs: list[float] = []

    def cov(v):
        out = x.T @ (x @ v) / (n - 1)
        for c, lam in zip(comps, eigs):
            out -= lam * c * (c @ v)
        return out

    for _ in range(dims):
        v = rng.normal(size=x.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = cov(v)
            norm = np.linalg.norm(w)
            if norm <= tol * max(total, 1e-300):
                break
            w /= norm
            for c in comps:              # keep orthogonal to directions already found
                w -= (c @ w) * c
            w /= np.linalg.norm(w)
            done = np.linalg.norm(w - v) < 1e-12 or np.linalg.norm(w + v) < 1e-12
            v = w
            lam = float(v @ cov(v))
            if done:
                break
        if lam <= tol * max(total, 1e-300):
            warnings.warn(f"data rank is below {dims}; returning {len(comps)} component(s)")
            break
        comps.append(v)
        eigs.append(lam)
    components = np.array(comps).reshape(len(comps), x.shape[1])
    variances = np.array(eigs)
    ratio = variances / total if total > 0 else np.zeros_like(variances)
    return PcaResult(x @ components.T, components, variances, ratio)


# -- FLOPs and latency -----------------------------------------------------------------

def fft_flops(n_points: int) -> float:
    """``5 N log2 N`` for one complex transform of ``N`` points."""
    return 5.0 * n_points * math.log2(n_points) if n_points > 1 else 0.0


def layer_flops(kind: str, c_in: int, c_out: int, spatial: Sequence[int], modes: int = 0,
                taps: int = 1) -> dict[str, float]:
    """FLOPs of one layer, split into ``fft``, ``spectral`` and ``pointwise`` terms.

    spectral layer: forward transforms of ``c_in`` channels, inverse of ``c_out``,
    a complex multiply-add (8 FLOPs) per kept mode and channel pair, plus the
    pointwise path ``2 c_out c_in N``. ``conv`` counts ``2 c_out c_in taps N``.
    """
    n = int(np.prod(spatial))
    dims = len(spatial)
    out = {"fft": 0.0, "spectral": 0.0, "pointwise": 0.0}
    if kind == "spectral":
        n_modes = int(np.prod(mode_shape(modes, dims)))
        out["fft"] = (c_in + c_out) * fft_flops(n)
        out["spectral"] = 8.0 * c_out * c_in * n_modes
        out["pointwise"] = 2.0 * c_out * c_in * n
    elif kind == "pointwise":
        out["pointwise"] = 2.0 * c_out * c_in * n
    elif kind == "conv":
        out["pointwise"] = 2.0 * c_out * c_in * taps * n
    else:
        raise ContractError(f"unknown layer kind {kind!r}")
    return out


def model_layers(model, part: str = "step") -> list[tuple]:
    """Layer descriptors ``(kind, c_in, c_out, taps)`` for the per-step computation.

    ``part`` selects ``encode``, ``decode``, ``field`` or ``step`` (field for latent
    models, the full one-step map for FNO baselines).
    """
    cfg = model.hyper
    if isinstance(model, FnoParams):
        layers = [("pointwise", cfg.in_channels, cfg.width, 1)]
        layers += [("spectral", cfg.width, cfg.width, 1)] * cfg.n_layers
        layers += [("pointwise", cfg.width, cfg.proj_hidden, 1), ("pointwise", cfg.proj_hidden, cfg.in_channels, 1)]
        return layers

    def chain(prefix):
        return [("spectral", model[f"{prefix}.{i}.w"].shape[1], model[f"{prefix}.{i}.w"].shape[0], 1)
                for i in range(cfg.n_layers)]
    if part == "encode":
        return chain("enc")
    if part == "decode":
        return chain("dec")
    c_in, fw = cfg.c_z + cfg.embed_dim, cfg.field_width
    if cfg.variant == "spectral":
        return ([("pointwise", c_in, fw, 1)] + [("spectral", fw, fw, 1)] * cfg.n_res
                + [("pointwise", fw, cfg.c_z, 1)])
    taps = 3 ** cfg.dims if cfg.variant == "conv" else 1
    kind = "conv" if cfg.variant == "conv" else "pointwise"
    return [(kind, c_in, fw, taps), (kind, fw, cfg.c_z, taps)]


def count_flops(layers: Sequence[tuple], spatial: Sequence[int], modes: int) -> dict[str, float]:
    totals = {"fft": 0.0, "spectral": 0.0, "pointwise": 0.0}
    for kind, c_in, c_out, taps in layers:
        for k, v in layer_flops(kind, c_in, c_out, spatial, modes, taps).items():
            totals[k] += v
    totals["total"] = totals["fft"] + totals["spectral"] + totals["pointwise"]
    return totals


def count_flops_and_time(model, input_shape: Sequence[int], n_steps: int = 10) -> dict[str, Any]:
    """Analytic per-step FLOPs and measured wall-clock latency of an ``n_steps`` rollout.

    ``input_shape`` is ``[B, C, *spatial]``; FLOPs are per sample.
    """
    spatial = tuple(input_shape[-model.hyper.dims:])
    flops = count_flops(model_layers(model, "step"), spatial, model.hyper.modes)
    u0 = np.random.default_rng(0).normal(size=tuple(input_shape))
    b = input_shape[0]
    t0 = time.perf_counter()
    predict_rollout(model, u0, n_steps, np.full(b, 0.01), np.full(b, 0.01))
    elapsed = time.perf_counter() - t0
    out = {"flops_per_step": flops, "rollout_seconds": elapsed, "seconds_per_step": elapsed / n_steps}
    if isinstance(model, AfnoParams):
        out["encode_flops"] = count_flops(model_layers(model, "encode"), spatial, model.hyper.modes)
        out["decode_flops"] = count_flops(model_layers(model, "decode"), spatial, model.hyper.modes)
    return out


# -- emission --------------------------------------------------------------------------

def write_curve_csv(path, curve: RolloutCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "mse", "rel_l2", "rel_h1"])
        w.writeheader()
        w.writerows(curve.rows())


def write_metrics_csv(path, reports: Mapping[str, MetricReport]) -> None:
    """One row per named report (e.g. model name) with every metric."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name",) + METRIC_NAMES)
        for name, r in reports.items():
            w.writerow((name,) + tuple(getattr(r, k) for k in METRIC_NAMES))
