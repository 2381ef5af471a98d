"""Hand-set latent models with closed-form behaviour, shared by several test files."""

import numpy as np

from afno.model import AfnoConfig, AfnoParams


def tiny_config(**kw):
    base = dict(in_channels=1, dims=1, c_z=3, width=8, modes=2, n_layers=2, n_res=1,
                embed_dim=3, embed_hidden=4)
    base.update(kw)
    return AfnoConfig(**base)


def linear_field(rate, **kw):
    """Zero parameters except a field that returns ``rate * z``."""
    cfg = tiny_config(**kw)
    p = AfnoParams.zeros(cfg)
    p.arrays["field.in.w"][:cfg.c_z, :cfg.c_z] = np.eye(cfg.c_z)
    p.arrays["field.out.w"][:, :cfg.c_z] = rate * np.eye(cfg.c_z)
    return p


def identity_codec(rate):
    """One-channel latent equal to the field, decoded unchanged, evolving at ``rate * z``."""
    p = linear_field(rate, c_z=1, n_layers=1)
    p.arrays["enc.0.w"][:] = 1.0
    p.arrays["dec.0.w"][:] = 1.0
    return p


def exact_codec(rate, shift=50.0):
    """Encode/decode round-trip exact for fields in (-shift/2, shift/2), latent map ``u -> (1 + dt rate) u``.

    The encoder adds ``shift`` so its activation is the identity in double precision;
    the decoder removes it and the field bias keeps the offset fixed under the flow.
    """
    p = identity_codec(rate)
    p.arrays["enc.0.bias"][:] = shift
    p.arrays["dec.0.bias"][:] = -shift
    p.arrays["field.out.bias"][:] = -rate * shift
    return p
