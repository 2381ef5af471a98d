"""Latent Euler evolution, losses, Adam with cosine schedule, and the training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .io import load_checkpoint, resample_field, save_checkpoint
from .model import AfnoConfig, AfnoParams, decode, embed_params, encode, vector_field
from .pde.grid import FieldTrajectory
from .tensor import ops
from .tensor.autograd import ContractError, Tape, Var, as_var, detach

# physical parameter fed to the embedding, per equation
CONDITIONING_PARAM = {"burgers": "nu", "ns": "nu", "allen_cahn": "eps", "ks": None, "swe": "g",
                      "cgl": "b"}


class DivergenceError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None,
                 step: int | None = None):
        where = ", ".join(f"{k} {v}" for k, v in (("epoch", epoch), ("batch", batch), ("step", step))
                          if v is not None)
        super().__init__(f"{message} ({where})" if where else message)
        self.epoch, self.batch, self.step = epoch, batch, step


def conditioning_value(traj: FieldTrajectory) -> float:
    key = CONDITIONING_PARAM[traj.config.pde]
    return float(traj.config.params[key]) if key else 0.0


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    rec: float
    flow: float
    roll: float

    def __post_init__(self):
        if min(self.rec, self.flow, self.roll) < 0:
            raise ContractError(f"loss weights must be non-negative: {self}")


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    horizon: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stage_fraction: float = 0.3
    stage1: tuple[float, float, float] = (1.0, 0.0, 0.0)
    stage2: tuple[float, float, float] = (0.0, 0.5, 0.1)
    lambda_h1: float = 0.1
    clip_norm: float | None = 1.0
    windows_per_trajectory: int = 1
    roll_all_steps: bool = False     # sum all K decoded steps instead of the pushforward final step

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.horizon < 1 or self.windows_per_trajectory < 1:
            raise ContractError(f"epochs, batch size, horizon and windows must be >= 1: {self}")
        self.stage1 = tuple(float(w) for w in self.stage1)
        self.stage2 = tuple(float(w) for w in self.stage2)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stage1"], d["stage2"] = list(self.stage1), list(self.stage2)
        return d


def stage_weights(epoch: int, cfg: TrainConfig) -> LossWeights:
    """Stage 1 for the first ``stage_fraction`` of epochs, stage 2 afterwards."""
    boundary = cfg.stage_fraction * cfg.epochs
    return LossWeights(*(cfg.stage1 if epoch < boundary else cfg.stage2))


def cosine_lr(epoch: float, total: int, lr0: float) -> float:
    return lr0 * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


# -- latent dynamics -------------------------------------------------------------

def _per_item(values, shape: tuple[int, ...]) -> np.ndarray | float:
    """Scalar stays scalar; a length-B vector is broadcast to ``shape`` (leading axis B)."""
    a = np.asarray(values, dtype=float)
    if a.ndim == 0:
        return float(a)
    return np.broadcast_to(a.reshape((-1,) + (1,) * (len(shape) - 1)), shape)


def _scale(x: Var, factor) -> Var:
    if isinstance(factor, float):
        return ops.scale(x, factor)
    return ops.mul(x, np.ascontiguousarray(factor))


def latent_map(z, nu, dt, params: AfnoParams) -> Var:
    """``z + dt v(z, b)``, or the direct next-state map for the autoregressive variant."""
    z = as_var(z)
    spatial = z.shape[-params.hyper.dims:]
    v = vector_field(z, embed_params(nu, dt, params, spatial), params)
    if params.hyper.autoregressive:
        return v
    return ops.add(z, _scale(v, _per_item(dt, z.shape)))


def euler_step(z, nu, dt, params: AfnoParams) -> Var:
    """One explicit Euler step of the latent ODE; non-finite results raise."""
    if np.any(np.asarray(dt) <= 0):
        raise ContractError(f"time step must be positive, got {dt}")
    out = latent_map(z, nu, dt, params)
    if not np.all(np.isfinite(out.value)):
        raise DivergenceError("non-finite latent state", step=1)
    return out


def latent_rollout(z0, nu, dt, n_steps: int, params: AfnoParams) -> np.ndarray:
    """``[n_steps + 1, *z0.shape]`` latent trajectory; the decoder is never called."""
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    z = as_var(detach(as_var(z0)))
    out = [z.value]
    for s in range(n_steps):
        z = latent_map(z, nu, dt, params)
        if not np.all(np.isfinite(z.value)):
            raise DivergenceError("non-finite latent state", step=s + 1)
        out.append(z.value)
    return np.stack(out)


# -- losses ------------------------------------------------------------------------

def _cell_volume(shape: tuple[int, ...], lengths: Sequence[float]) -> float:
    d = len(lengths)
    return float(np.prod([l / n for l, n in zip(lengths, shape[-d:])]))


def _weighted_sq_norm(e: Var, lengths: Sequence[float]) -> Var:
    """Grid-weighted squared L2, summed over channels and space, averaged over leading axes."""
    d = len(lengths)
    per_item = ops.sum(ops.square(e), axis=tuple(range(e.ndim - d - 1, e.ndim)))
    return ops.scale(ops.mean(per_item), _cell_volume(e.shape, lengths))


def periodic_gradient(u, lengths: Sequence[float]) -> list[Var]:
    """Central differences with periodic wrap, one component per spatial axis."""
    u = as_var(u)
    d = len(lengths)
    out = []
    for i, l in enumerate(lengths):
        ax = u.ndim - d + i
        h = l / u.shape[ax]
        out.append(ops.scale(ops.sub(ops.roll(u, -1, ax), ops.roll(u, 1, ax)), 1.0 / (2 * h)))
    return out


def loss_rec(u, u_hat, lambda_h1: float, lengths: Sequence[float]) -> Var:
    """``||u - u_hat||^2 + lambda_h1 ||grad u - grad u_hat||^2`` on the grid."""
    u, u_hat = as_var(u), as_var(u_hat)
    if u.shape != u_hat.shape:
        raise ContractError(f"loss_rec: shapes {u.shape} and {u_hat.shape} differ")
    e = ops.sub(u_hat, u)
    out = _weighted_sq_norm(e, lengths)
    if lambda_h1:
        for g in periodic_gradient(e, lengths):
            out = ops.add(out, ops.scale(_weighted_sq_norm(g, lengths), lambda_h1))
    return out


def loss_flow(z_t, z_next, nu, dt, params: AfnoParams, lengths: Sequence[float]) -> Var:
    """Squared distance between ``v(z_t)`` and the finite difference ``(z_next - z_t)/dt``."""
    if params.hyper.autoregressive:
        raise ContractError("the autoregressive variant has no vector field to match")
    z_t, z_next = as_var(z_t), as_var(z_next)
    if z_t.shape != z_next.shape:
        raise ContractError(f"loss_flow: shapes {z_t.shape} and {z_next.shape} differ")
    if np.any(np.asarray(dt) <= 0):
        raise ContractError(f"time step must be positive, got {dt}")
    spatial = z_t.shape[-params.hyper.dims:]
    v = vector_field(z_t, embed_params(nu, dt, params, spatial), params)
    target = _scale(ops.sub(z_next, z_t), _per_item(1.0 / np.asarray(dt, dtype=float), z_t.shape))
    return _weighted_sq_norm(ops.sub(v, target), lengths)


def loss_roll(u_frames, z0, nu, dt, n_steps: int, params: AfnoParams, lengths: Sequence[float]) -> Var:
    """Sum over ``s = 1..K`` of ``||Dec(z_s) - u_s||^2`` with ``z_s`` from latent Euler steps.

    ``u_frames`` is ``[K+1, ...]`` (or ``[B, K+1, ...]`` when ``z0`` is batched);
    frame 0 is the state ``z0`` encodes.
    """
    u_frames = np.asarray(u_frames)
    z = as_var(z0)
    time_axis = z.ndim - params.hyper.dims - 1     # frames carry time right after the batch axes
    if n_steps < 1:
        raise ContractError("rollout horizon K must be >= 1")
    if u_frames.shape[time_axis] < n_steps + 1:
        raise ContractError(f"loss_roll: {u_frames.shape[time_axis]} frames cannot supervise {n_steps} steps")
    total = None
    for s in range(1, n_steps + 1):
        z = latent_map(z, nu, dt, params)
        term = _weighted_sq_norm(ops.sub(decode(z, params), np.take(u_frames, s, axis=time_axis)), lengths)
        total = term if total is None else ops.add(total, term)
    return total


def total_loss(weights: LossWeights, rec=0.0, flow=0.0, roll=0.0) -> Var:
    out = ops.scale(as_var(rec), weights.rec)
    out = ops.add(out, ops.scale(as_var(flow), weights.flow))
    return ops.add(out, ops.scale(as_var(roll), weights.roll))


# -- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "m": self.m, "v": self.v}


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- batches -----------------------------------------------------------------------

@dataclass
class WindowBatch:
    frames: np.ndarray     # [B, K+1, C, *spatial]
    prefix: np.ndarray     # [B] severed pushforward steps before the supervised one
    nu: np.ndarray         # [B]
    dt: np.ndarray         # [B]


def _prefix_states(batch: WindowBatch, params: AfnoParams) -> np.ndarray:
    """Detached latent states after each item's prefix; items with prefix 0 get the encoding."""
    z = encode(batch.frames[:, 0], params).value
    out = z.copy()
    for s in range(1, int(batch.prefix.max(initial=0)) + 1):
        z = latent_map(z, batch.nu, batch.dt, params).value
        if not np.all(np.isfinite(z)):
            raise DivergenceError("non-finite latent state in pushforward prefix", step=s)
        done = batch.prefix == s
        out[done] = z[done]
    return out


def batch_loss(params: AfnoParams, batch: WindowBatch, weights: LossWeights, cfg: TrainConfig,
               lengths: Sequence[float]) -> tuple[Var, dict[str, float]]:
    """Weighted objective on one batch and its unweighted parts.

    Items with a nonzero prefix start the supervised step from a detached latent
    state, so no gradient flows through the prefix.
    """
    B = len(batch.prefix)
    if np.any(batch.prefix < 0) or np.any(batch.prefix >= batch.frames.shape[1] - 1):
        raise ContractError(f"prefix lengths {batch.prefix} leave no supervised frame in windows of "
                            f"{batch.frames.shape[1]}")
    idx = np.arange(B)
    parts: dict[str, Var] = {}
    # the autoregressive ablation learns the one-step map from the rollout term alone
    flow_free = params.hyper.autoregressive or weights.flow == 0
    if weights.flow == 0 and weights.roll == 0:
        u = batch.frames[idx, batch.prefix]
        parts["rec"] = loss_rec(u, decode(encode(u, params), params), cfg.lambda_h1, lengths)
    elif cfg.roll_all_steps:
        k = batch.frames.shape[1] - 1
        z0 = encode(batch.frames[:, 0], params)
        if weights.rec:
            parts["rec"] = loss_rec(batch.frames[:, 0], decode(z0, params), cfg.lambda_h1, lengths)
        if not flow_free:
            z1 = encode(batch.frames[:, 1], params)
            parts["flow"] = loss_flow(z0, z1, batch.nu, batch.dt, params, lengths)
        parts["roll"] = loss_roll(batch.frames, z0, batch.nu, batch.dt, k, params, lengths)
    else:
        u_a = batch.frames[idx, batch.prefix]
        u_b = batch.frames[idx, batch.prefix + 1]
        if flow_free:
            z_a = encode(u_a, params)
        else:
            both = encode(np.concatenate([u_a, u_b]), params)
            z_a = ops.take(both, list(range(B)), 0)
            z_b = ops.take(both, list(range(B, 2 * B)), 0)
            parts["flow"] = loss_flow(z_a, z_b, batch.nu, batch.dt, params, lengths)
        if weights.rec:
            parts["rec"] = loss_rec(u_a, decode(z_a, params), cfg.lambda_h1, lengths)
        severed = batch.prefix > 0
        if np.any(severed):
            keep = _per_item((~severed).astype(float), z_a.shape)
            start = ops.add(ops.mul(z_a, keep), np.where(keep, 0.0, _prefix_states(batch, params)))
        else:
            start = z_a
        z_next = latent_map(start, batch.nu, batch.dt, params)
        parts["roll"] = _weighted_sq_norm(ops.sub(decode(z_next, params), u_b), lengths)
    total = total_loss(weights, **parts)
    return total, {k: float(v.value) for k, v in parts.items()}


def sample_batches(trajectories: Sequence[FieldTrajectory], cfg: TrainConfig, rng: np.random.Generator,
                   frames: Sequence[np.ndarray] | None = None) -> list[WindowBatch]:
    """One epoch of shuffled windows of ``horizon + 1`` frames with random prefix lengths."""
    k = cfg.horizon
    frames = frames if frames is not None else [t.data for t in trajectories]
    items = np.repeat(np.arange(len(trajectories)), cfg.windows_per_trajectory)
    rng.shuffle(items)
    out = []
    for start in range(0, len(items), cfg.batch_size):
        sel = items[start:start + cfg.batch_size]
        wins, prefixes = [], []
        for i in sel:
            n_frames = frames[i].shape[0]
            if n_frames < k + 1:
                raise ContractError(f"trajectory with {n_frames} frames is shorter than horizon + 1")
            t0 = int(rng.integers(0, n_frames - k))
            wins.append(frames[i][t0:t0 + k + 1])
            prefixes.append(int(rng.integers(0, k)))
        out.append(WindowBatch(np.stack(wins), np.array(prefixes),
                               np.array([conditioning_value(trajectories[i]) for i in sel]),
                               np.array([trajectories[i].dt_save for i in sel])))
    return out


# -- loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: AfnoParams
    optimizer: AdamState
    history: list[dict[str, float]]
    epochs_done: int


def training_frames(trajectories: Sequence[FieldTrajectory], resolution: tuple[int, ...] | None) -> list[np.ndarray]:
    """Trajectory arrays at the model's training resolution (spectral resampling)."""
    out = []
    for t in trajectories:
        d = t.data
        if resolution is not None and d.shape[2:] != tuple(resolution):
            d = resample_field(d, resolution)
        out.append(d)
    return out


def fit(values: dict[str, np.ndarray], wrap: Callable[[dict[str, Var]], Any],
        objective: Callable[[Any, WindowBatch, int], tuple[Var, dict[str, float]]],
        trajectories: Sequence[FieldTrajectory], frames: Sequence[np.ndarray], cfg: TrainConfig,
        optimizer: AdamState, start_epoch: int = 0, end_epoch: int | None = None,
        log: Callable[[dict[str, float]], None] | None = None,
        history: list[dict[str, float]] | None = None,
        epoch_info: Callable[[int], dict[str, Any]] | None = None) -> tuple[list[dict[str, float]], int]:
    """Shared Adam loop: cosine schedule, clipping, divergence checks, per-epoch history.

    ``values`` is updated in place; ``wrap`` turns taped leaves into the model's
    parameter object and ``objective`` returns the batch loss and its parts.
    """
    if not trajectories:
        raise ContractError("no training trajectories")
    history = list(history or [])
    end_epoch = cfg.epochs if end_epoch is None else min(end_epoch, cfg.epochs)
    for epoch in range(start_epoch, end_epoch):
        t_start = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        sums: dict[str, float] = {"total": 0.0, "grad_norm": 0.0}
        batches = sample_batches(trajectories, cfg, rng, frames)
        for b_idx, batch in enumerate(batches):
            tape = Tape()
            tracked = {k: tape.leaf(v) for k, v in values.items()}
            try:
                loss, parts = objective(wrap(tracked), batch, epoch)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), epoch=epoch, batch=b_idx) from None
            if not math.isfinite(float(loss.value)):
                raise DivergenceError("non-finite loss", epoch=epoch, batch=b_idx)
            tape.backward(loss, release=True)
            grads = {k: tracked[k].grad for k in values}
            sums["grad_norm"] += clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(values, grads, optimizer, lr, cfg.beta1, cfg.beta2, cfg.eps)
            sums["total"] += float(loss.value)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, "lr": lr, **(epoch_info(epoch) if epoch_info else {}),
               **{k: v / len(batches) for k, v in sums.items()}, "seconds": time.perf_counter() - t_start}
        history.append(row)
        if log:
            log(row)
    return history, max(end_epoch, start_epoch)


def train(trajectories: Sequence[FieldTrajectory], model_cfg: AfnoConfig, cfg: TrainConfig,
          params: AfnoParams | None = None, optimizer: AdamState | None = None, start_epoch: int = 0,
          log: Callable[[dict[str, float]], None] | None = None,
          history: list[dict[str, float]] | None = None, end_epoch: int | None = None) -> TrainResult:
    """Two-stage end-to-end optimization of encoder, decoder, embedding and field.

    Pass ``params``, ``optimizer`` and ``start_epoch`` from an earlier run to resume;
    the data order is a function of ``cfg.seed`` and the epoch index only.
    ``end_epoch`` stops early without changing the schedule.
    """
    if not trajectories:
        raise ContractError("no training trajectories")
    if params is None:
        params = AfnoParams.create(model_cfg, cfg.seed)
    values = params.values()
    optimizer = optimizer or AdamState.for_params(values)
    lengths = trajectories[0].grid.lengths
    frames = training_frames(trajectories, model_cfg.resolution)

    def objective(tracked, batch, epoch):
        return batch_loss(tracked, batch, stage_weights(epoch, cfg), cfg, lengths)

    def epoch_info(epoch):
        # every row carries all loss columns, zero when a term is inactive
        return {"stage": 1 if epoch < cfg.stage_fraction * cfg.epochs else 2, "rec": 0.0, "flow": 0.0,
                "roll": 0.0}

    history, done = fit(values, lambda arrays: AfnoParams(model_cfg, arrays), objective, trajectories,
                        frames, cfg, optimizer, start_epoch, end_epoch, log, history,
                        epoch_info)
    return TrainResult(AfnoParams(model_cfg, values), optimizer, history, done)


def write_history_csv(path, history: Sequence[Mapping[str, float]]) -> None:
    if not history:
        raise ContractError("empty history")
    keys = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow(row)


def save_model(path, params, optimizer: AdamState | None = None,
               train_cfg: TrainConfig | None = None, epoch: int | None = None,
               extra: Mapping[str, Any] | None = None) -> None:
    """Checkpoint a latent model or an FNO baseline with optional optimizer state."""
    kind = "fno" if type(params.hyper).__name__ == "FnoConfig" else "afno"
    meta = {"model_kind": kind, "epoch": epoch, "train": train_cfg.to_dict() if train_cfg else None,
            **(extra or {})}
    save_checkpoint(path, params.hyper.to_dict(), params.values(),
                    optimizer.to_dict() if optimizer else None, meta)


def load_model(path) -> tuple[Any, AdamState | None, dict[str, Any]]:
    """Parameters (shape-checked against the stored configuration), optimizer state and metadata."""
    from .baseline import FnoConfig, FnoParams

    raw = load_checkpoint(path)
    if raw["meta"].get("model_kind") == "fno":
        params = FnoParams(FnoConfig.from_dict(raw["hparams"]), raw["params"])
    else:
        params = AfnoParams(AfnoConfig.from_dict(raw["hparams"]), raw["params"])
    params.validate()
    opt = raw["optimizer"]
    state = AdamState(int(opt["step"]), opt["m"], opt["v"]) if opt else None
    return params, state, raw["meta"]
