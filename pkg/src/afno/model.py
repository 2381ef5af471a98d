"""FNO autoencoder, parameter embedding and conditioned latent vector field.

Layout convention: fields are ``[..., C, *spatial]`` with one or two spatial
axes; any leading axes are batch axes. All forward functions accept plain
arrays or tape variables for both inputs and parameters, so the same code
serves inference and training.

Spectral convolution keeps modes ``0..k-1`` on the last axis and
``-(k-1)..k-1`` on the first axis (2D). Because only non-negative last-axis
modes are stored, their contributions are doubled and the real part taken,
which is the same as completing the spectrum with conjugate partners.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Iterator, Mapping

import numpy as np

from .tensor import ops
from .tensor.autograd import ContractError, Tape, Var, as_var

VARIANTS = ("spectral", "conv", "mlp")


class ModelConfigError(ValueError):
    pass


@dataclass
class AfnoConfig:
    in_channels: int = 1
    dims: int = 1
    c_z: int = 16
    width: int = 64
    modes: int = 4
    n_layers: int = 4
    n_res: int = 4
    embed_dim: int = 16
    embed_hidden: int = 16
    field_width: int | None = None       # defaults to ``width``
    variant: str = "spectral"            # spectral | conv | mlp vector field
    autoregressive: bool = False         # latent map predicts the next state directly
    resolution: tuple[int, ...] | None = None
    embed_scale: tuple[float, float] = (1.0, 1.0)   # multiplies [nu, dt] before the MLP
    spectral_path: str = "dft"           # dft (fused partial transform) | fft
    conditioned: bool = True             # False zeroes the embedding fed to the field (control)

    def __post_init__(self):
        if self.field_width is None:
            self.field_width = self.width
        if self.dims not in (1, 2):
            raise ModelConfigError(f"dims must be 1 or 2, got {self.dims}")
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.spectral_path not in ("dft", "fft"):
            raise ModelConfigError(f"unknown spectral path {self.spectral_path!r}")
        if min(self.in_channels, self.c_z, self.width, self.modes, self.n_layers,
               self.embed_dim, self.embed_hidden, self.field_width) < 1 or self.n_res < 0:
            raise ModelConfigError(f"sizes must be positive: {self}")
        if self.resolution is not None:
            self.resolution = tuple(int(n) for n in self.resolution)
            self.check_resolution(self.resolution)
        self.embed_scale = tuple(float(s) for s in self.embed_scale)

    def check_resolution(self, extents) -> None:
        for n in extents:
            if self.modes > n // 2:
                raise ModelConfigError(f"{self.modes} modes exceed half the extent {n}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["resolution"] = list(self.resolution) if self.resolution else None
        d["embed_scale"] = list(self.embed_scale)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AfnoConfig":
        return cls(**dict(d))


def mode_lists(k: int, dims: int) -> list[list[int]]:
    if dims == 1:
        return [list(range(k))]
    return [list(range(k)) + list(range(-(k - 1), 0)), list(range(k))]


def _mode_weights(k: int) -> np.ndarray:
    w = np.full(k, 2.0)
    w[0] = 1.0
    return w


def mode_shape(k: int, dims: int) -> tuple[int, ...]:
    return tuple(len(m) for m in mode_lists(k, dims))


# -- building blocks -------------------------------------------------------

def spectral_conv(h, r, k: int, dims: int, path: str = "dft") -> Var:
    """``Re IFFT(R * truncate_k(FFT h))`` with ``r`` stored as real (re, im) pairs."""
    h = as_var(h)
    spatial = h.shape[-dims:]
    for n in spatial:
        if k > n // 2:
            raise ModelConfigError(f"{k} modes exceed half the extent {n}")
    axes = list(range(-dims, 0))
    modes = mode_lists(k, dims)
    kernel = ops.complex_from_pair(r)
    if path == "dft":
        xh = ops.dft_modes(h, axes, modes)
    else:
        xh = ops.fft(h, axes)
        for ax, ms in zip(axes, modes):
            xh = ops.take(xh, [m % h.shape[ax] for m in ms], ax)
    yh = ops.mul(ops.modal_product(kernel, xh, spatial_ndim=dims), _mode_weights(k))
    if path == "dft":
        return ops.idft_modes(yh, axes, modes, spatial, real_output=True)
    else:
        for ax, ms, n in zip(axes, modes, spatial):
            yh = ops.pad(yh, [m % n for m in ms], ax, n)
        out = ops.ifft(yh, axes)
    return ops.real(out)


def local_conv(h, kernel, dims: int) -> Var:
    """Periodic 3-wide (1D) or 3x3 (2D) cross-correlation; ``kernel`` is ``[O, I, 3(, 3)]``."""
    kernel = as_var(kernel)
    c_out, c_in = kernel.shape[:2]
    out = None
    offsets = [(j,) for j in range(3)] if dims == 1 else [(i, j) for i in range(3) for j in range(3)]
    flat = ops.reshape(kernel, (c_out, c_in, 3 ** dims))
    for idx, off in enumerate(offsets):
        w = ops.reshape(ops.take(flat, [idx], axis=2), (c_out, c_in))
        shifted = as_var(h)
        for ax, o in zip(range(-dims, 0), off):
            if o != 1:
                shifted = ops.roll(shifted, 1 - o, ax)
        term = ops.channel_map(w, shifted, spatial_ndim=dims)
        out = term if out is None else ops.add(out, term)
    return out


def spectral_layer_forward(h, layer: Mapping[str, Any], k: int, dims: int, activation: bool = True,
                           path: str = "dft") -> Var:
    """One Fourier layer: ``sigma((W + B) h + bias + Re IFFT(R * truncate_k(FFT h)))``.

    ``layer`` holds ``w``, ``b`` (pointwise maps), ``bias`` and ``r``.
    """
    pointwise = ops.channel_map(ops.add(layer["w"], layer["b"]), h, layer["bias"], spatial_ndim=dims)
    out = ops.add(pointwise, spectral_conv(h, layer["r"], k, dims, path))
    return ops.gelu(out) if activation else out


# -- parameters ------------------------------------------------------------

def _encoder_channels(cfg: AfnoConfig) -> list[int]:
    return [cfg.in_channels] + [cfg.width] * (cfg.n_layers - 1) + [cfg.c_z]


def _decoder_channels(cfg: AfnoConfig) -> list[int]:
    return [cfg.c_z] + [cfg.width] * (cfg.n_layers - 1) + [cfg.in_channels]


def param_shapes(cfg: AfnoConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable array in declaration order."""
    ms = mode_shape(cfg.modes, cfg.dims)
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix, chans in (("enc", _encoder_channels(cfg)), ("dec", _decoder_channels(cfg))):
        for i, (ci, co) in enumerate(zip(chans[:-1], chans[1:])):
            shapes[f"{prefix}.{i}.w"] = (co, ci)
            shapes[f"{prefix}.{i}.b"] = (co, ci)
            shapes[f"{prefix}.{i}.bias"] = (co,)
            shapes[f"{prefix}.{i}.r"] = (co, ci) + ms + (2,)
    shapes["embed.w1"] = (2, cfg.embed_hidden)
    shapes["embed.b1"] = (cfg.embed_hidden,)
    shapes["embed.w2"] = (cfg.embed_hidden, cfg.embed_dim)
    shapes["embed.b2"] = (cfg.embed_dim,)
    c_in, fw = cfg.c_z + cfg.embed_dim, cfg.field_width
    if cfg.variant == "spectral":
        shapes["field.in.w"] = (fw, c_in)
        shapes["field.in.bias"] = (fw,)
        for i in range(cfg.n_res):
            shapes[f"field.res.{i}.w"] = (fw, fw)
            shapes[f"field.res.{i}.bias"] = (fw,)
            shapes[f"field.res.{i}.r"] = (fw, fw) + ms + (2,)
        shapes["field.out.w"] = (cfg.c_z, fw)
        shapes["field.out.bias"] = (cfg.c_z,)
    else:
        taps = (3,) * cfg.dims if cfg.variant == "conv" else ()
        shapes["field.l0.w"] = (fw, c_in) + taps
        shapes["field.l0.bias"] = (fw,)
        shapes["field.l1.w"] = (cfg.c_z, fw) + taps
        shapes["field.l1.bias"] = (cfg.c_z,)
    return shapes


def init_params(cfg: AfnoConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in uniform for pointwise/dense weights, zero biases, ``U[0,1)/(C_in C_out)`` spectra."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("bias", "b1", "b2"):
            out[name] = np.zeros(shape)
        elif kind == "r":
            out[name] = rng.random(shape) / (shape[0] * shape[1])
        elif kind in ("w1", "w2"):
            bound = 1.0 / np.sqrt(shape[0])
            out[name] = rng.uniform(-bound, bound, shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            out[name] = rng.uniform(-bound, bound, shape)
    return out


@dataclass
class AfnoParams:
    """Hyperparameters plus named arrays (plain arrays or tape leaves)."""

    hyper: AfnoConfig
    arrays: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, hyper: AfnoConfig, seed: int = 0) -> "AfnoParams":
        return cls(hyper, init_params(hyper, seed))

    @classmethod
    def zeros(cls, hyper: AfnoConfig) -> "AfnoParams":
        return cls(hyper, {k: np.zeros(s) for k, s in param_shapes(hyper).items()})

    def __getitem__(self, name: str):
        return self.arrays[name]

    def names(self) -> Iterator[str]:
        return iter(self.arrays)

    def on_tape(self, tape: Tape) -> "AfnoParams":
        return AfnoParams(self.hyper, {k: tape.leaf(np.asarray(v.value if isinstance(v, Var) else v))
                                       for k, v in self.arrays.items()})

    def values(self) -> dict[str, np.ndarray]:
        return {k: (v.value if isinstance(v, Var) else np.asarray(v)) for k, v in self.arrays.items()}

    def copy(self) -> "AfnoParams":
        return AfnoParams(AfnoConfig.from_dict(self.hyper.to_dict()),
                          {k: v.copy() for k, v in self.values().items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.values().values()))

    def validate(self) -> None:
        expected = param_shapes(self.hyper)
        if list(expected) != list(self.arrays):
            raise ContractError("parameter names differ from the configuration")
        for k, s in expected.items():
            if tuple(self.values()[k].shape) != s:
                raise ContractError(f"{k}: shape {self.values()[k].shape}, expected {s}")


def _layer(p: AfnoParams, prefix: str) -> dict[str, Any]:
    return {k: p[f"{prefix}.{k}"] for k in ("w", "b", "bias", "r")}


def _check_channels(x: Var, expected: int, dims: int, what: str) -> None:
    if x.ndim < dims + 1 or x.shape[-dims - 1] != expected:
        raise ContractError(f"{what}: expected {expected} channels before {dims} spatial axes, got {x.shape}")


# -- network ---------------------------------------------------------------

def encode(u, p: AfnoParams) -> Var:
    """Physical field ``[..., C, *spatial]`` to latent ``[..., C_z, *spatial]``."""
    cfg = p.hyper
    h = as_var(u)
    _check_channels(h, cfg.in_channels, cfg.dims, "encode")
    spatial = h.shape[-cfg.dims:]
    if cfg.resolution is not None and tuple(spatial) != cfg.resolution:
        raise ContractError(f"encode: input resolution {spatial} differs from training resolution "
                            f"{cfg.resolution}; resample first")
    for i in range(cfg.n_layers):
        h = spectral_layer_forward(h, _layer(p, f"enc.{i}"), cfg.modes, cfg.dims, True, cfg.spectral_path)
    return h


def decode(z, p: AfnoParams) -> Var:
    """Mirror of :func:`encode`; the last layer is linear so outputs may take any sign."""
    cfg = p.hyper
    h = as_var(z)
    _check_channels(h, cfg.c_z, cfg.dims, "decode")
    for i in range(cfg.n_layers):
        last = i == cfg.n_layers - 1
        h = spectral_layer_forward(h, _layer(p, f"dec.{i}"), cfg.modes, cfg.dims, not last,
                                   cfg.spectral_path)
    return h


def embed_params(nu, dt, p: AfnoParams, spatial) -> Var:
    """``MLP([nu, dt])`` tiled over ``spatial``; scalars give ``[m, *spatial]``,
    length-B arrays give ``[B, m, *spatial]``."""
    nu_a = np.asarray(nu, dtype=float)
    dt_a = np.asarray(dt, dtype=float)
    if np.any(dt_a <= 0):
        raise ContractError(f"time step must be positive, got {dt}")
    nu_a, dt_a = np.broadcast_arrays(nu_a, dt_a)
    sx, st = p.hyper.embed_scale
    x = np.stack([nu_a * sx, dt_a * st], axis=-1)          # [..., 2]
    hidden = ops.gelu(ops.add(ops.matmul(x.reshape(-1, 2), p["embed.w1"]), p["embed.b1"]))
    b = ops.add(ops.matmul(hidden, p["embed.w2"]), p["embed.b2"])
    b = ops.reshape(b, nu_a.shape + (p.hyper.embed_dim,))
    if not p.hyper.conditioned:
        b = ops.scale(b, 0.0)
    return ops.broadcast_spatial(b, tuple(spatial))


def vector_field(z, b_tilde, p: AfnoParams) -> Var:
    """``g([z, b~])``: latent velocity (or next latent when autoregressive)."""
    cfg = p.hyper
    z, b_tilde = as_var(z), as_var(b_tilde)
    d = cfg.dims
    _check_channels(z, cfg.c_z, d, "vector_field")
    if z.shape[-d:] != b_tilde.shape[-d:]:
        raise ContractError(f"vector_field: latent {z.shape} and embedding {b_tilde.shape} differ spatially")
    if b_tilde.ndim < z.ndim:
        b_tilde = ops.add(np.zeros(z.shape[:-d - 1] + b_tilde.shape), b_tilde)
    x = ops.concat([z, b_tilde], axis=-d - 1)
    if cfg.variant == "spectral":
        h = ops.channel_map(p["field.in.w"], x, p["field.in.bias"], spatial_ndim=d)
        for i in range(cfg.n_res):
            inner = ops.add(spectral_conv(h, p[f"field.res.{i}.r"], cfg.modes, d, cfg.spectral_path),
                            ops.channel_map(p[f"field.res.{i}.w"], h, p[f"field.res.{i}.bias"], spatial_ndim=d))
            h = ops.add(h, ops.gelu(inner))
        return ops.channel_map(p["field.out.w"], h, p["field.out.bias"], spatial_ndim=d)
    if cfg.variant == "conv":
        h = ops.gelu(ops.add(local_conv(x, p["field.l0.w"], d), ops.broadcast_spatial(p["field.l0.bias"], x.shape[-d:])))
        return ops.add(local_conv(h, p["field.l1.w"], d), ops.broadcast_spatial(p["field.l1.bias"], x.shape[-d:]))
    h = ops.gelu(ops.channel_map(p["field.l0.w"], x, p["field.l0.bias"], spatial_ndim=d))
    return ops.channel_map(p["field.l1.w"], h, p["field.l1.bias"], spatial_ndim=d)
