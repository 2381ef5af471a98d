"""``afno`` command: generate data, train, evaluate, verify bounds and emit plot data as CSV.

Exit codes: 0 ok, 2 configuration error, 3 numeric divergence, 4 missing artifact, 5 format error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Sequence

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_MISSING, EXIT_FORMAT = 0, 2, 3, 4, 5
COMMANDS = ("generate", "train", "eval", "verify", "spectrum", "pca", "crossparam")


class MissingArtifact(FileNotFoundError):
    pass


def _out(msg: str) -> None:
    print(msg, flush=True)


# -- shared plumbing ------------------------------------------------------------------------

def _grid_and_solver(cfg, params_override: dict | None = None):
    from .pde import GridSpec, SolveConfig

    grid = GridSpec.for_pde(cfg.pde.name, cfg.grid.resolution)
    s = cfg.solver
    solve = SolveConfig(cfg.pde.name, params={**cfg.pde.params, **(params_override or {})}, t_end=s.t_end,
                        n_frames=s.n_frames, dt=s.dt, cfl=s.cfl, seed=cfg.seed, blowup=s.blowup)
    return grid, solve


def _require(path: str | os.PathLike | None, what: str) -> Path:
    if path is None:
        raise MissingArtifact(f"no {what} path configured (set paths.{what})")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _dataset(cfg):
    from .io import read_dataset
    return read_dataset(_require(cfg.paths.dataset, "dataset"))


def _split(cfg, trajectories):
    from .io import split_dataset
    return split_dataset(trajectories, cfg.train.train_fraction, cfg.seed)


def _checkpoint_path(cfg) -> Path:
    return Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else cfg.run_dir() / "model.ckpt"


def _load_model(cfg, path=None):
    from .training import load_model
    return load_model(_require(path or _checkpoint_path(cfg), "checkpoint"))


def _prepare_run_dir(cfg) -> Path:
    from .config import dump_config

    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run / "config.yaml")
    return run


# -- commands -------------------------------------------------------------------------------

def conservation_summary(trajectories) -> dict[str, float]:
    """Drift of the conserved quantity between first and last frame (when the equation has one)."""
    import numpy as np

    pde = trajectories[0].config.pde
    data = np.stack([t.data for t in trajectories])
    if pde in ("burgers", "ks", "ns"):
        means = data.reshape(data.shape[0], data.shape[1], -1).mean(axis=-1)
        return {"max_mean_drift": float(np.max(np.abs(means[:, -1] - means[:, 0])))}
    if pde == "swe":
        mass = data[:, :, 0].reshape(data.shape[0], data.shape[1], -1).sum(axis=-1)
        return {"max_relative_mass_drift": float(np.max(np.abs(mass[:, -1] / mass[:, 0] - 1)))}
    return {}


def cmd_generate(cfg) -> Path:
    from .io import write_dataset
    from .pde import generate

    grid, solve = _grid_and_solver(cfg)
    trajs = generate(solve, grid, cfg.solver.n_trajectories, seed0=cfg.seed)
    out = Path(cfg.paths.dataset) if cfg.paths.dataset else _prepare_run_dir(cfg) / "dataset.afds"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, trajs)
    data = trajs[0].data
    lo = min(float(t.data.min()) for t in trajs)
    hi = max(float(t.data.max()) for t in trajs)
    _out(f"wrote {out}: {len(trajs)} trajectories of shape {tuple(data.shape)}, range [{lo:.6g}, {hi:.6g}]")
    for k, v in conservation_summary(trajs).items():
        _out(f"  {k}: {v:.3e}")
    return out


def _build_model(cfg, train_set):
    from .baseline import FnoParams
    from .model import AfnoParams

    shape = train_set[0].data.shape
    resolution = cfg.grid.resolution
    extents = (resolution,) * cfg.dims() if resolution else tuple(shape[2:])
    if cfg.model.ablation == "fno":
        return FnoParams.create(cfg.fno_config(shape[1], extents), cfg.seed)
    return AfnoParams.create(cfg.afno_config(shape[1], extents), cfg.seed)


def cmd_train(cfg, resume: str | None = None, stop_after: int | None = None) -> Path:
    """Train the configured model; ``resume`` continues from a checkpoint's optimizer state and epoch."""
    from .baseline import FnoParams, train_ar_baseline
    from .training import load_model, save_model, train, write_history_csv

    train_set, _ = _split(cfg, _dataset(cfg))
    tc = cfg.train_config()
    run = _prepare_run_dir(cfg)
    if resume:
        params, optimizer, meta = load_model(_require(resume, "checkpoint"))
        start, history = int(meta.get("epoch") or 0), list(meta.get("history") or [])
    else:
        params, optimizer, start, history = _build_model(cfg, train_set), None, 0, None

    def log(row):
        if row["epoch"] % 10 == 0 or row["epoch"] == tc.epochs - 1:
            _out(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    kwargs = dict(params=params, optimizer=optimizer, start_epoch=start, log=log, history=history,
                  end_epoch=stop_after)
    if isinstance(params, FnoParams):
        res = train_ar_baseline(train_set, params.hyper, tc, **kwargs)
    else:
        res = train(train_set, params.hyper, tc, **kwargs)
    ckpt = _checkpoint_path(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(ckpt, res.params, res.optimizer, tc, res.epochs_done, {"history": res.history})
    write_history_csv(run / "loss.csv", res.history)
    _out(f"checkpoint {ckpt} (epoch {res.epochs_done}); losses {run / 'loss.csv'}")
    return ckpt


def cmd_eval(cfg, truth_as_prediction: bool = False) -> Path:
    from .evaluation import (average_reports, count_flops_and_time, metric_suite, rollout_eval,
                             write_curve_csv, write_metrics_csv)
    from .io import write_report

    _, test = _split(cfg, _dataset(cfg))
    run = _prepare_run_dir(cfg)
    if truth_as_prediction:
        dims = cfg.dims()
        start = cfg.eval.start_frame
        reports = [metric_suite(t.data[start + 1:start + 1 + cfg.eval.n_steps],
                                t.data[start + 1:start + 1 + cfg.eval.n_steps], dims, t.grid.lengths)
                   for t in test]
        write_metrics_csv(run / "metrics.csv", {"truth": average_reports(reports)})
        _out(f"metrics {run / 'metrics.csv'}")
        return run / "metrics.csv"
    model, _, meta = _load_model(cfg)
    curve, report = rollout_eval(model, test, cfg.eval.n_steps, cfg.eval.start_frame)
    name = meta.get("model_kind", "afno")
    write_metrics_csv(run / "metrics.csv", {name: report})
    write_curve_csv(run / "rollout.csv", curve)
    cost = count_flops_and_time(model, (1,) + test[0].data.shape[1:], n_steps=5)
    write_report(run / "eval.json", {"model": name, "metrics": report.to_dict(),
                                     "diverged_at": curve.diverged_at, "cost": cost})
    _out(f"{name}: " + " ".join(f"{k}={v:.4g}" for k, v in report.to_dict().items()))
    return run / "metrics.csv"


def cmd_verify(cfg) -> Path:
    import numpy as np

    from .baseline import FnoParams
    from .evaluation import rollout_eval
    from .io import write_report
    from .theory import (accumulated_error_ratio, check_prop1, check_prop2, estimate_propagation_gain,
                         fit_growth, write_bound_csv)
    from .training import conditioning_value

    _, test = _split(cfg, _dataset(cfg))
    test = test[:cfg.theory.n_trajectories]
    run = _prepare_run_dir(cfg)
    model, _, _ = _load_model(cfg)
    frames = [t.data for t in test]
    report: dict[str, Any] = {}
    for i, (traj, f) in enumerate(zip(test, frames)):
        if isinstance(model, FnoParams):
            rep = check_prop1(model, f)
        else:
            rep = check_prop2(model, f, conditioning_value(traj), traj.dt_save)
        write_bound_csv(run / f"bounds_{i}.csv", rep)
        report[f"trajectory_{i}"] = {"violation_fraction": rep.violation_fraction,
                                     "physical_violation_fraction": rep.physical_violation_fraction,
                                     "growth": rep.growth.__dict__ if rep.growth else None}
    if not isinstance(model, FnoParams):
        horizons = [k for k in cfg.theory.horizons if k < min(len(f) for f in frames)]
        if horizons:
            gain = estimate_propagation_gain(model, frames, conditioning_value(test[0]), test[0].dt_save,
                                             horizons, cfg.theory.splits,
                                             percentile=cfg.theory.eta_percentile)
            report["propagation_gain"] = {"eta": gain.eta, "pooled": gain.pooled, "flatness": gain.flatness,
                                          "kappa": {str(w): v for w, v in gain.kappa.items()}}
    curve, _ = rollout_eval(model, test, cfg.eval.n_steps)
    try:
        report["growth"] = fit_growth(curve.rel_l2, skip=cfg.theory.growth_skip).__dict__
    except Exception as exc:         # too short or too flat to fit
        report["growth"] = {"error": str(exc)}
    if cfg.paths.baseline_checkpoint:
        other, _, _ = _load_model(cfg, cfg.paths.baseline_checkpoint)
        other_curve, _ = rollout_eval(other, test, cfg.eval.n_steps)
        ar, af = (other_curve, curve) if isinstance(other, FnoParams) else (curve, other_curve)
        ratio = accumulated_error_ratio(np.sqrt(ar.mse), np.sqrt(af.mse))
        report["accumulated_ratio"] = {"ratio": ratio.ratio, "slope": ratio.slope}
    write_report(run / "verify.json", report)
    _out(f"bound reports in {run}")
    return run / "verify.json"


def cmd_spectrum(cfg) -> Path:
    import csv

    import numpy as np

    from .evaluation import energy_spectrum, predict_rollout
    from .training import conditioning_value

    _, test = _split(cfg, _dataset(cfg))
    run = _prepare_run_dir(cfg)
    model, _, _ = _load_model(cfg)
    step = min(cfg.eval.spectrum_step, test[0].n_frames - 1)
    dims = cfg.dims()
    u0 = np.stack([t.data[0] for t in test])
    nu = np.array([conditioning_value(t) for t in test])
    dt = np.array([t.dt_save for t in test])
    pred = predict_rollout(model, u0, step, nu, dt)[step]
    truth_e = np.mean([energy_spectrum(t.data[step], dims) for t in test], axis=0)
    pred_e = np.mean([energy_spectrum(p, dims) for p in pred], axis=0)
    out = run / "spectrum.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "truth", "prediction"])
        for k, (a, b) in enumerate(zip(truth_e, pred_e)):
            w.writerow([k, a, b])
    _out(f"spectrum at step {step}: {out}")
    return out


def cmd_pca(cfg) -> Path:
    import csv

    import numpy as np

    from .evaluation import pca_project
    from .model import AfnoParams, encode
    from .training import conditioning_value, latent_rollout

    _, test = _split(cfg, _dataset(cfg))
    run = _prepare_run_dir(cfg)
    model, _, _ = _load_model(cfg)
    if not isinstance(model, AfnoParams):
        raise ValueError("pca needs a latent-model checkpoint")
    traj = test[0]
    z_true = encode(traj.data, model).value
    z_roll = latent_rollout(z_true[0], conditioning_value(traj), traj.dt_save, len(z_true) - 1, model)
    res = pca_project(z_true, cfg.eval.pca_components)
    mean = z_true.reshape(len(z_true), -1).mean(axis=0)
    roll_proj = (z_roll.reshape(len(z_roll), -1) - mean) @ res.components.T
    out = run / "pca.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        r = res.components.shape[0]
        w.writerow(["frame"] + [f"truth_pc{i + 1}" for i in range(r)] + [f"rollout_pc{i + 1}" for i in range(r)])
        for t in range(len(z_true)):
            w.writerow([t] + list(res.trajectory[t]) + list(roll_proj[t]))
    _out(f"explained variance ratio {np.round(res.explained_ratio, 4).tolist()}: {out}")
    return out


def cmd_crossparam(cfg) -> Path:
    """Train (or load) at the configured parameter, evaluate at each held-out value."""
    from .evaluation import METRIC_NAMES, rollout_eval
    from .pde import generate
    from .training import CONDITIONING_PARAM, load_model

    param = CONDITIONING_PARAM.get(cfg.pde.name)
    if param is None:
        raise ValueError(f"{cfg.pde.name} has no conditioning parameter")
    run = _prepare_run_dir(cfg)
    ckpt = _checkpoint_path(cfg)
    if not ckpt.exists():
        if cfg.paths.checkpoint:
            raise MissingArtifact(f"checkpoint not found: {ckpt}")
        cmd_train(cfg)
    model, _, meta = load_model(ckpt)
    rows = []
    for value in cfg.eval.crossparam_values:
        grid, solve = _grid_and_solver(cfg, {param: value})
        test = generate(solve, grid, cfg.eval.crossparam_trajectories, seed0=cfg.seed + 100_000)
        _, report = rollout_eval(model, test, cfg.eval.crossparam_steps)
        rows.append((meta.get("model_kind", "afno"), value, report))
        _out(f"{param}={value}: mse={report.mse:.4g} rel_l2={report.rel_l2:.4g}")
    out = run / "crossparam.csv"
    import csv
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", param] + list(METRIC_NAMES))
        for name, value, r in rows:
            w.writerow([name, value] + [getattr(r, k) for k in METRIC_NAMES])
    return out


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afno", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML run configuration")
        if name == "generate":
            s.add_argument("--pde")
            s.add_argument("--n", type=int, help="number of trajectories")
            s.add_argument("--seed", type=int)
            s.add_argument("--out", help="dataset path")
        if name == "train":
            s.add_argument("--ablation", help="none | ar | conv | mlp | fno")
            s.add_argument("--resume", help="checkpoint to continue from")
            s.add_argument("--stop-after", type=int, help="stop after this many epochs (total)")
        if name == "eval":
            s.add_argument("--truth-as-prediction", action="store_true")
    return p


def _shortcuts(args) -> dict[str, Any]:
    out = {}
    for attr, key in (("pde", "pde.name"), ("n", "solver.n_trajectories"), ("seed", "seed"),
                      ("out", "paths.dataset"), ("ablation", "model.ablation")):
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .config import ConfigError, load_config, parse_overrides
    from .io import DatasetIOError
    from .model import ModelConfigError
    from .pde import InstabilityError, UnknownPdeError
    from .tensor import ContractError
    from .training import DivergenceError

    try:
        overrides = {**parse_overrides(rest), **_shortcuts(args)}
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.resume, args.stop_after)
        elif args.command == "eval":
            cmd_eval(cfg, args.truth_as_prediction)
        else:
            {"verify": cmd_verify, "spectrum": cmd_spectrum, "pca": cmd_pca,
             "crossparam": cmd_crossparam}[args.command](cfg)
    except (InstabilityError, DivergenceError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DatasetIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, UnknownPdeError, ModelConfigError, ContractError, ValueError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
