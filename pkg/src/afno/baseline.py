"""Physical-space FNO one-step propagator, the autoregressive baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .model import AfnoConfig, AfnoParams, ModelConfigError, mode_shape, spectral_layer_forward
from .pde.grid import FieldTrajectory
from .tensor import ops
from .tensor.autograd import ContractError, Tape, Var, as_var
from .training import (AdamState, DivergenceError, TrainConfig, TrainResult, WindowBatch, fit,
                       training_frames)


@dataclass
class FnoConfig:
    in_channels: int = 1
    dims: int = 1
    width: int = 64
    modes: int = 4
    n_layers: int = 4
    proj_hidden: int | None = None       # defaults to ``width``
    resolution: tuple[int, ...] | None = None
    spectral_path: str = "dft"

    def __post_init__(self):
        if self.proj_hidden is None:
            self.proj_hidden = self.width
        if self.dims not in (1, 2):
            raise ModelConfigError(f"dims must be 1 or 2, got {self.dims}")
        if min(self.in_channels, self.width, self.modes, self.n_layers, self.proj_hidden) < 1:
            raise ModelConfigError(f"sizes must be positive: {self}")
        if self.resolution is not None:
            self.resolution = tuple(int(n) for n in self.resolution)
            for n in self.resolution:
                if self.modes > n // 2:
                    raise ModelConfigError(f"{self.modes} modes exceed half the extent {n}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["resolution"] = list(self.resolution) if self.resolution else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FnoConfig":
        return cls(**dict(d))


def fno_param_shapes(cfg: FnoConfig) -> dict[str, tuple[int, ...]]:
    ms = mode_shape(cfg.modes, cfg.dims)
    w, c = cfg.width, cfg.in_channels
    shapes: dict[str, tuple[int, ...]] = {"lift.w": (w, c), "lift.bias": (w,)}
    for i in range(cfg.n_layers):
        shapes[f"layer.{i}.w"] = (w, w)
        shapes[f"layer.{i}.b"] = (w, w)
        shapes[f"layer.{i}.bias"] = (w,)
        shapes[f"layer.{i}.r"] = (w, w) + ms + (2,)
    shapes["proj.0.w"] = (cfg.proj_hidden, w)
    shapes["proj.0.bias"] = (cfg.proj_hidden,)
    shapes["proj.1.w"] = (c, cfg.proj_hidden)
    shapes["proj.1.bias"] = (c,)
    return shapes


class FnoParams:
    def __init__(self, hyper: FnoConfig, arrays: dict[str, Any]):
        self.hyper = hyper
        self.arrays = arrays

    @classmethod
    def create(cls, hyper: FnoConfig, seed: int = 0) -> "FnoParams":
        """Same initialization rules as the latent model: fan-in uniform, zero biases,
        ``U[0,1)/(C_in C_out)`` spectra."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in fno_param_shapes(hyper).items():
            if name.endswith(".bias"):
                arrays[name] = np.zeros(shape)
            elif name.endswith(".r"):
                arrays[name] = rng.random(shape) / (shape[0] * shape[1])
            else:
                bound = 1.0 / np.sqrt(shape[1])
                arrays[name] = rng.uniform(-bound, bound, shape)
        return cls(hyper, arrays)

    def __getitem__(self, name: str):
        return self.arrays[name]

    def names(self) -> Iterator[str]:
        return iter(self.arrays)

    def on_tape(self, tape: Tape) -> "FnoParams":
        return FnoParams(self.hyper, {k: tape.leaf(v) for k, v in self.values().items()})

    def values(self) -> dict[str, np.ndarray]:
        return {k: (v.value if isinstance(v, Var) else np.asarray(v)) for k, v in self.arrays.items()}

    def copy(self) -> "FnoParams":
        return FnoParams(FnoConfig.from_dict(self.hyper.to_dict()), {k: v.copy() for k, v in self.values().items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.values().values()))

    def validate(self) -> None:
        expected = fno_param_shapes(self.hyper)
        if list(expected) != list(self.arrays):
            raise ContractError("parameter names differ from the configuration")
        for k, shape in expected.items():
            if tuple(self.values()[k].shape) != shape:
                raise ContractError(f"{k}: shape {self.values()[k].shape}, expected {shape}")


def fno_step(u, p: FnoParams) -> Var:
    """``u_t -> u_{t+dt}``: lift, spectral layers (GELU), two-layer pointwise projection."""
    cfg = p.hyper
    h = as_var(u)
    d = cfg.dims
    if h.ndim < d + 1 or h.shape[-d - 1] != cfg.in_channels:
        raise ContractError(f"fno_step: expected {cfg.in_channels} channels, got shape {h.shape}")
    if cfg.resolution is not None and tuple(h.shape[-d:]) != cfg.resolution:
        raise ContractError(f"fno_step: resolution {h.shape[-d:]} differs from {cfg.resolution}")
    h = ops.channel_map(p["lift.w"], h, p["lift.bias"], spatial_ndim=d)
    for i in range(cfg.n_layers):
        layer = {k: p[f"layer.{i}.{k}"] for k in ("w", "b", "bias", "r")}
        h = spectral_layer_forward(h, layer, cfg.modes, d, True, cfg.spectral_path)
    h = ops.gelu(ops.channel_map(p["proj.0.w"], h, p["proj.0.bias"], spatial_ndim=d))
    return ops.channel_map(p["proj.1.w"], h, p["proj.1.bias"], spatial_ndim=d)


def matched_capacity(afno_cfg: AfnoConfig, n_layers: int = 4, max_width: int = 512) -> FnoConfig:
    """FNO whose parameter count is closest to the latent model's."""
    target = AfnoParams.zeros(afno_cfg).n_parameters()

    def count(w):
        cfg = FnoConfig(afno_cfg.in_channels, afno_cfg.dims, w, afno_cfg.modes, n_layers,
                        resolution=afno_cfg.resolution, spectral_path=afno_cfg.spectral_path)
        return cfg, sum(int(np.prod(s)) for s in fno_param_shapes(cfg).values())

    best = min((count(w) for w in range(1, max_width + 1)), key=lambda cn: abs(cn[1] - target))
    return best[0]


def ar_rollout(u0, p: FnoParams, n_steps: int) -> np.ndarray:
    """``[n_steps + 1, *u0.shape]``: each prediction is fed back as the next input."""
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    u = np.asarray(u0, dtype=float)
    out = [u]
    for s in range(n_steps):
        u = fno_step(u, p).value
        if not np.all(np.isfinite(u)):
            raise DivergenceError("non-finite autoregressive state", step=s + 1)
        out.append(u)
    return np.stack(out)


def _mse(pred: Var, target: np.ndarray) -> Var:
    return ops.mean(ops.square(ops.sub(pred, target)))


def ar_batch_loss(p: FnoParams, batch: WindowBatch, cfg: TrainConfig) -> tuple[Var, dict[str, float]]:
    """Pushforward MSE: severed prefix of ``p`` physical steps, loss on the next one
    (or summed over every step when ``cfg.roll_all_steps``)."""
    if cfg.roll_all_steps:
        u = as_var(batch.frames[:, 0])
        total = None
        for s in range(1, batch.frames.shape[1]):
            u = fno_step(u, p)
            term = _mse(u, batch.frames[:, s])
            total = term if total is None else ops.add(total, term)
        return total, {"mse": float(total.value)}
    idx = np.arange(len(batch.prefix))
    start = batch.frames[idx, batch.prefix].copy()
    u = batch.frames[:, 0]
    for s in range(1, int(batch.prefix.max(initial=0)) + 1):
        u = fno_step(u, p).value
        if not np.all(np.isfinite(u)):
            raise DivergenceError("non-finite state in pushforward prefix", step=s)
        done = batch.prefix == s
        start[done] = u[done]
    loss = _mse(fno_step(start, p), batch.frames[idx, batch.prefix + 1])
    return loss, {"mse": float(loss.value)}


def train_ar_baseline(trajectories: Sequence[FieldTrajectory], fno_cfg: FnoConfig, cfg: TrainConfig,
                      params: FnoParams | None = None, optimizer: AdamState | None = None,
                      start_epoch: int = 0, log: Callable[[dict[str, float]], None] | None = None,
                      history: list[dict[str, float]] | None = None,
                      end_epoch: int | None = None) -> TrainResult:
    """Same sampling, optimizer, schedule and pushforward horizon as the latent model."""
    params = params or FnoParams.create(fno_cfg, cfg.seed)
    values = params.values()
    optimizer = optimizer or AdamState.for_params(values)
    frames = training_frames(trajectories, fno_cfg.resolution)
    history, done = fit(values, lambda arrays: FnoParams(fno_cfg, arrays),
                        lambda tracked, batch, epoch: ar_batch_loss(tracked, batch, cfg),
                        trajectories, frames, cfg, optimizer, start_epoch, end_epoch, log, history)
    return TrainResult(FnoParams(fno_cfg, values), optimizer, history, done)
