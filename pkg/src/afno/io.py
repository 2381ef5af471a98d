"""Binary dataset and checkpoint files, spectral resampling, dataset splits.

Both file kinds share one framing::

    8-byte magic | uint32 LE header length | UTF-8 JSON header | payload

The dataset payload is little-endian float64 in ``[trajectory, time, channel,
*spatial]`` row-major order. The checkpoint payload is the concatenation of
named flat float64 arrays in the order listed by the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .pde.grid import FieldTrajectory, GridSpec, SolveConfig
from .tensor.autograd import ContractError
from .tensor.fft import check_power_of_two, fft_nd, ifft_nd

DATASET_MAGIC = b"AFNODSET"
CHECKPOINT_MAGIC = b"AFNOCKPT"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")
_F8 = np.dtype("<f8")


class DatasetIOError(Exception):
    """Base class; ``code`` distinguishes the failure kind."""

    code = "io"


class FormatError(DatasetIOError):
    code = "format"


class VersionMismatchError(DatasetIOError):
    code = "version"


class TruncationError(DatasetIOError):
    code = "truncated"


class ExtentMismatchError(DatasetIOError):
    code = "extent"


# -- framing -----------------------------------------------------------------

def _write_framed(path, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    # "x" would refuse to overwrite; "wb" keeps one exclusive writer per call
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        fh.write(payload)


def _read_framed(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < len(magic) + _LEN.size or raw[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, not a {magic.decode()} file")
    start = len(magic) + _LEN.size
    (n_head,) = _LEN.unpack(raw[len(magic):start])
    if len(raw) < start + n_head:
        raise TruncationError(f"{path}: header declares {n_head} bytes, file ends early")
    try:
        header = json.loads(raw[start:start + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if header.get("endianness", "little") != "little" or header.get("scalar", "float64") != "float64":
        raise FormatError(f"{path}: only little-endian float64 payloads are supported")
    return header, raw[start + n_head:]


def _check_payload(path, payload: bytes, n_values: int) -> None:
    expected = n_values * 8
    if len(payload) < expected:
        raise TruncationError(f"{path}: payload {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise ExtentMismatchError(f"{path}: payload {len(payload)} bytes, header implies {expected}")


# -- datasets ----------------------------------------------------------------

def channel_stats(trajectories: Sequence[FieldTrajectory]) -> dict[str, list[float]]:
    """Per-channel mean and standard deviation over all trajectories and frames."""
    data = np.stack([t.data for t in trajectories])
    axes = (0, 1) + tuple(range(3, data.ndim))
    std = data.std(axis=axes)
    return {"mean": data.mean(axis=axes).tolist(), "std": np.where(std > 0, std, 1.0).tolist()}


def normalize(data: np.ndarray, stats: Mapping[str, Sequence[float]], channel_axis: int = -1) -> np.ndarray:
    shape = [1] * data.ndim
    shape[channel_axis] = -1
    return (data - np.reshape(stats["mean"], shape)) / np.reshape(stats["std"], shape)


def denormalize(data: np.ndarray, stats: Mapping[str, Sequence[float]], channel_axis: int = -1) -> np.ndarray:
    shape = [1] * data.ndim
    shape[channel_axis] = -1
    return data * np.reshape(stats["std"], shape) + np.reshape(stats["mean"], shape)


def write_dataset(path, trajectories: Sequence[FieldTrajectory], normalization: bool = False) -> None:
    """Write homogeneous trajectories; optionally record per-channel z-score stats."""
    if not trajectories:
        raise ContractError("write_dataset: no trajectories")
    first = trajectories[0]
    for t in trajectories[1:]:
        if (t.config.pde != first.config.pde or t.grid != first.grid
                or t.data.shape != first.data.shape or t.dt_save != first.dt_save):
            raise ContractError("write_dataset: trajectories are not homogeneous")
    header: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "pde": first.config.pde,
        "config": first.config.to_dict(),
        "grid": {"extents": list(first.grid.extents), "lengths": list(first.grid.lengths)},
        "dt_save": first.dt_save,
        "n_trajectories": len(trajectories),
        "n_frames": first.data.shape[0],
        "n_channels": first.data.shape[1],
        "scalar": "float64",
        "endianness": "little",
        "seeds": [t.config.seed for t in trajectories],
        "normalization": channel_stats(trajectories) if normalization else None,
    }
    payload = np.stack([t.data for t in trajectories]).astype(_F8, copy=False).tobytes(order="C")
    _write_framed(path, DATASET_MAGIC, header, payload)


def read_dataset_header(path) -> dict:
    return _read_framed(path, DATASET_MAGIC)[0]


def read_dataset(path) -> list[FieldTrajectory]:
    header, payload = _read_framed(path, DATASET_MAGIC)
    try:
        extents = tuple(int(n) for n in header["grid"]["extents"])
        shape = (int(header["n_trajectories"]), int(header["n_frames"]), int(header["n_channels"])) + extents
        grid = GridSpec(extents, tuple(float(l) for l in header["grid"]["lengths"]))
        cfg_fields = dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    _check_payload(path, payload, int(np.prod(shape)))
    data = np.frombuffer(payload, dtype=_F8).reshape(shape).astype(np.float64)
    seeds = header.get("seeds") or [cfg_fields.get("seed", 0)] * shape[0]
    out = []
    for i in range(shape[0]):
        cfg = SolveConfig(**{**cfg_fields, "seed": seeds[i]})
        if cfg.n_frames != shape[1]:
            raise ExtentMismatchError(f"{path}: config declares {cfg.n_frames} frames, header {shape[1]}")
        out.append(FieldTrajectory(data[i], float(header["dt_save"]), grid, cfg))
    return out


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, hparams: Mapping[str, Any], params: Mapping[str, np.ndarray],
                    optimizer: Mapping[str, Any] | None = None, meta: Mapping[str, Any] | None = None) -> None:
    """Store named parameter arrays (declaration order) plus optional Adam state.

    ``optimizer`` is ``{"step": int, "m": {name: array}, "v": {name: array}}``.
    """
    entries, chunks = [], []
    for group, arrays in [("param", params)] + (
            [("adam_m", optimizer["m"]), ("adam_v", optimizer["v"])] if optimizer else []):
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            entries.append({"group": group, "name": name, "shape": list(arr.shape)})
            chunks.append(arr.astype(_F8, copy=False).tobytes(order="C"))
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "hparams": dict(hparams),
        "arrays": entries,
        "has_optimizer": optimizer is not None,
        "optimizer_step": int(optimizer["step"]) if optimizer else 0,
        "meta": dict(meta or {}),
        "scalar": "float64",
        "endianness": "little",
    }
    _write_framed(path, CHECKPOINT_MAGIC, header, b"".join(chunks))


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None) -> dict[str, Any]:
    """Returns ``{"hparams", "params", "optimizer", "meta"}``; arrays are checked against
    ``expected_shapes`` when given."""
    header, payload = _read_framed(path, CHECKPOINT_MAGIC)
    entries = header.get("arrays", [])
    sizes = [int(np.prod(e["shape"])) for e in entries]
    _check_payload(path, payload, sum(sizes))
    flat = np.frombuffer(payload, dtype=_F8)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    offset = 0
    for e, n in zip(entries, sizes):
        groups[e["group"]][e["name"]] = flat[offset:offset + n].reshape(e["shape"]).astype(np.float64)
        offset += n
    if expected_shapes is not None:
        if list(expected_shapes) != list(groups["param"]):
            raise ExtentMismatchError(f"{path}: parameter names/order differ from the model")
        for name, shape in expected_shapes.items():
            if tuple(groups["param"][name].shape) != tuple(shape):
                raise ExtentMismatchError(
                    f"{path}: {name} has shape {groups['param'][name].shape}, model expects {tuple(shape)}")
    optimizer = None
    if header.get("has_optimizer"):
        optimizer = {"step": header["optimizer_step"], "m": groups["adam_m"], "v": groups["adam_v"]}
    return {"hparams": header["hparams"], "params": groups["param"], "optimizer": optimizer,
            "meta": header.get("meta", {})}


def write_report(path, report: Mapping[str, Any]) -> None:
    """JSON report; numpy arrays and scalars become lists and floats."""

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    Path(path).write_text(json.dumps(report, indent=2, default=default, allow_nan=True))


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


# -- resampling and splitting ------------------------------------------------

def _resample_axis(x: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = x.shape[axis]
    if n == target:
        return x
    xh = np.moveaxis(fft_nd(x, [axis]), axis, -1)
    yh = np.zeros(xh.shape[:-1] + (target,), dtype=complex)
    k = min(n, target) // 2
    yh[..., :k] = xh[..., :k]
    yh[..., target - k + 1:] = xh[..., n - k + 1:]
    if target > n:
        # split the source Nyquist mode evenly between +k and -k
        yh[..., k] += 0.5 * xh[..., k]
        yh[..., target - k] += 0.5 * xh[..., k]
    else:
        # fold +k and -k onto the target Nyquist bin
        yh[..., k] = xh[..., k] + xh[..., n - k]
    yh *= target / n
    return np.moveaxis(ifft_nd(yh, [-1]), -1, axis)


def resample_field(u, target_extents: Sequence[int]) -> np.ndarray:
    """Spectrally resample the trailing ``len(target_extents)`` axes of ``u``."""
    u = np.asarray(u, dtype=float)
    target_extents = tuple(int(n) for n in target_extents)
    nd = len(target_extents)
    if nd == 0 or nd > u.ndim:
        raise ValueError(f"cannot resample {u.shape} to {target_extents}")
    for n in target_extents:
        check_power_of_two(n, "target extent")
    for n in u.shape[-nd:]:
        check_power_of_two(n, "source extent")
    if u.shape[-nd:] == target_extents:
        return u.copy()
    out = u.astype(complex)
    for i, n in enumerate(target_extents):
        out = _resample_axis(out, u.ndim - nd + i, n)
    return out.real


def split_dataset(items: Sequence, train_fraction: float, seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled split into disjoint (train, test) lists."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train fraction {train_fraction} not in (0, 1)")
    n = len(items)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ContractError(f"split of {n} items at {train_fraction} leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]
