"""Run configuration: YAML file plus dotted command-line overrides, strict about unknown keys."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .baseline import FnoConfig
from .model import AfnoConfig
from .training import TrainConfig

RUN_DIR_ENV = "AFNO_RUN_DIR"
ABLATIONS = ("none", "ar", "conv", "mlp", "fno")


class ConfigError(ValueError):
    pass


@dataclass
class PdeSection:
    name: str = "burgers"
    params: dict[str, Any] = field(default_factory=dict)   # overrides of the equation defaults


@dataclass
class GridSection:
    resolution: int | None = None            # None: desk default for the dimension


@dataclass
class SolverSection:
    n_trajectories: int = 80
    t_end: float | None = None
    n_frames: int | None = None
    dt: float | None = None
    cfl: float | None = None
    blowup: float = 1e6


@dataclass
class ModelSection:
    ablation: str = "none"                   # none | ar | conv | mlp | fno (physical-space baseline)
    c_z: int = 16
    width: int = 64
    modes: int = 4
    n_layers: int = 4
    n_res: int = 4
    embed_dim: int = 16
    embed_hidden: int = 16
    conditioned: bool = True
    fno_width: int | None = None             # None: matched to the latent model's parameter count
    fno_layers: int = 4
    spectral_path: str = "dft"


@dataclass
class TrainSection:
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int | None = None            # None: 32 in 1D, 8 in 2D
    horizon: int = 5
    stage_fraction: float = 0.3
    stage2: list[float] = field(default_factory=lambda: [0.0, 0.5, 0.1])
    lambda_h1: float = 0.1
    clip_norm: float | None = 1.0
    windows_per_trajectory: int = 1
    roll_all_steps: bool = False
    train_fraction: float = 0.8


@dataclass
class EvalSection:
    n_steps: int = 100
    start_frame: int = 0
    spectrum_step: int = 100
    pca_components: int = 2
    crossparam_values: list[float] = field(default_factory=lambda: [0.005, 0.02, 0.05])
    crossparam_trajectories: int = 16
    crossparam_steps: int = 20


@dataclass
class TheorySection:
    horizons: list[int] = field(default_factory=lambda: list(range(10, 101, 10)))
    splits: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    eta_percentile: float = 95.0
    growth_skip: int = 5
    n_trajectories: int = 4


@dataclass
class PathsSection:
    run_dir: str | None = None               # None: $AFNO_RUN_DIR or ./runs
    dataset: str | None = None
    checkpoint: str | None = None
    baseline_checkpoint: str | None = None


SECTIONS = {"pde": PdeSection, "grid": GridSection, "solver": SolverSection, "model": ModelSection,
            "train": TrainSection, "eval": EvalSection, "theory": TheorySection, "paths": PathsSection}


@dataclass
class RunConfig:
    pde: PdeSection = field(default_factory=PdeSection)
    grid: GridSection = field(default_factory=GridSection)
    solver: SolverSection = field(default_factory=SolverSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    theory: TheorySection = field(default_factory=TheorySection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any] | None) -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, section in SECTIONS.items():
            values = raw.get(name) or {}
            if not isinstance(values, Mapping):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = section(**values)
        if "seed" in raw:
            if not isinstance(raw["seed"], int):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = raw["seed"]
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.model.ablation not in ABLATIONS:
            raise ConfigError(f"model.ablation must be one of {ABLATIONS}, got {self.model.ablation!r}")
        if not 0 < self.train.train_fraction < 1:
            raise ConfigError("train.train_fraction must lie in (0, 1)")
        if len(self.train.stage2) != 3:
            raise ConfigError("train.stage2 needs three weights (rec, flow, roll)")

    def digest(self) -> str:
        """Short hash of the configuration with artifact paths left out."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        root = self.paths.run_dir or os.environ.get(RUN_DIR_ENV) or "runs"
        return Path(root) / self.digest()

    # -- derived component configs -------------------------------------------------------

    def dims(self) -> int:
        from .pde import PDE_DIMS
        return PDE_DIMS[self.pde.name]

    def afno_config(self, in_channels: int, resolution: Sequence[int]) -> AfnoConfig:
        m = self.model
        variant = {"conv": "conv", "mlp": "mlp"}.get(m.ablation, "spectral")
        return AfnoConfig(in_channels=in_channels, dims=self.dims(), c_z=m.c_z, width=m.width, modes=m.modes,
                          n_layers=m.n_layers, n_res=m.n_res, embed_dim=m.embed_dim, embed_hidden=m.embed_hidden,
                          variant=variant, autoregressive=m.ablation == "ar", resolution=tuple(resolution),
                          spectral_path=m.spectral_path, conditioned=m.conditioned)

    def fno_config(self, in_channels: int, resolution: Sequence[int]) -> FnoConfig:
        from .baseline import matched_capacity
        m = self.model
        if m.fno_width is None:
            cfg = matched_capacity(self.afno_config(in_channels, resolution), n_layers=m.fno_layers)
            cfg.resolution = tuple(resolution)
            return cfg
        return FnoConfig(in_channels, self.dims(), m.fno_width, m.modes, m.fno_layers,
                         resolution=tuple(resolution), spectral_path=m.spectral_path)

    def train_config(self) -> TrainConfig:
        t = self.train
        batch = t.batch_size or (32 if self.dims() == 1 else 8)
        return TrainConfig(epochs=t.epochs, lr=t.lr, batch_size=batch, horizon=t.horizon, seed=self.seed,
                           stage_fraction=t.stage_fraction, stage2=tuple(t.stage2), lambda_h1=t.lambda_h1,
                           clip_norm=t.clip_norm, windows_per_trajectory=t.windows_per_trajectory,
                           roll_all_steps=t.roll_all_steps)


def _merge(base: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = base
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read YAML (if given), apply dotted overrides such as ``{"train.lr": 0.001}``."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        _merge(raw, key, value)
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_overrides(tokens: Sequence[str]) -> dict[str, Any]:
    """``["--train.lr", "0.001", "--seed=3"]`` to ``{"train.lr": 0.001, "seed": 3}`` (YAML-typed values)."""
    out: dict[str, Any] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            text = tokens[i + 1]
            i += 2
        out[key] = yaml.safe_load(text)
    return out


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
