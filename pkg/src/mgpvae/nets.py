"""3-d variational encoder/decoder over single-channel volumes.

The encoder runs a fixed number of spatial levels, each two 3x3x3
convolutions with ELU where the second convolution strides by 2, halving
every axis; the last level narrows to the endpoint feature count before a
fully connected head emits the latent mean and pre-softplus scale.  The
decoder mirrors it: a dense layer back to the endpoint volume, then per
level a nearest-neighbor 2x upsample followed by two convolutions with ELU,
and a final single-channel convolution with identity output.

Volumes are channels-last: ``[S, S, S, 1]`` or batched ``[N, S, S, S, 1]``.
At the documentation-fidelity scale (side 64, four levels) the encoder
endpoint is 16 x 4 x 4 x 4, sixteen times spatially smaller than the input;
desk-scale sides below 64 use two levels so the smallest convolved extent
stays meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError

SIGMA_FLOOR = 1e-5


@dataclass
class NetConfig:
    """Shape hyperparameters of the encoder/decoder pair."""

    input_side: int = 16
    latent_dim: int = 16
    features: int = 32
    endpoint_features: int = 16
    levels: int | None = None  # default: 4 for sides >= 64, else 2

    def __post_init__(self):
        side = self.input_side
        if side < 8 or side & (side - 1):
            raise ValidationError(f"input_side must be a power of two >= 8, got {side}")
        if self.levels is None:
            self.levels = 4 if side >= 64 else 2
        if side >> (self.levels - 1) < 4:
            raise ValidationError(
                f"input_side {side} too small for {self.levels} levels "
                f"(smallest convolved extent must stay >= 3)"
            )
        for name in ("latent_dim", "features", "endpoint_features"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    @property
    def endpoint_side(self) -> int:
        return self.input_side >> self.levels

    @property
    def endpoint_size(self) -> int:
        return self.endpoint_features * self.endpoint_side**3


def _uniform_fan_in(rng, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_pair(rng, c_in: int, c_mid: int, c_out: int):
    return {
        "c1.w": Tensor(_uniform_fan_in(rng, (3, 3, 3, c_in, c_mid), c_in * 27), requires_grad=True),
        "c1.b": Tensor(np.zeros(c_mid, np.float32), requires_grad=True),
        "c2.w": Tensor(_uniform_fan_in(rng, (3, 3, 3, c_mid, c_out), c_mid * 27), requires_grad=True),
        "c2.b": Tensor(np.zeros(c_out, np.float32), requires_grad=True),
    }


class EncoderParams:
    """Per-level convolution stacks plus the dense head producing 2L outputs."""

    def __init__(self, cfg: NetConfig, rng):
        f = cfg.features
        self.levels = []
        for i in range(cfg.levels):
            c_in = 1 if i == 0 else f
            c_out = cfg.endpoint_features if i == cfg.levels - 1 else f
            self.levels.append(_conv_pair(rng, c_in, f, c_out))
        two_l = 2 * cfg.latent_dim
        self.fc_w = Tensor(_uniform_fan_in(rng, (two_l, cfg.endpoint_size), cfg.endpoint_size), requires_grad=True)
        self.fc_b = Tensor(np.zeros(two_l, np.float32), requires_grad=True)

    def named(self) -> dict:
        out = {}
        for i, lvl in enumerate(self.levels):
            for key, t in lvl.items():
                out[f"enc.l{i}.{key}"] = t
        out["enc.fc.w"] = self.fc_w
        out["enc.fc.b"] = self.fc_b
        return out


class DecoderParams:
    """Dense layer back to the endpoint volume, mirrored conv stacks, output conv."""

    def __init__(self, cfg: NetConfig, rng):
        f = cfg.features
        self.fc_w = Tensor(_uniform_fan_in(rng, (cfg.endpoint_size, cfg.latent_dim), cfg.latent_dim), requires_grad=True)
        self.fc_b = Tensor(np.zeros(cfg.endpoint_size, np.float32), requires_grad=True)
        self.levels = []
        for i in range(cfg.levels):
            c_in = cfg.endpoint_features if i == 0 else f
            self.levels.append(_conv_pair(rng, c_in, f, f))
        self.out_w = Tensor(_uniform_fan_in(rng, (3, 3, 3, f, 1), f * 27), requires_grad=True)
        self.out_b = Tensor(np.zeros(1, np.float32), requires_grad=True)

    def named(self) -> dict:
        out = {"dec.fc.w": self.fc_w, "dec.fc.b": self.fc_b}
        for i, lvl in enumerate(self.levels):
            for key, t in lvl.items():
                out[f"dec.l{i}.{key}"] = t
        out["dec.out.w"] = self.out_w
        out["dec.out.b"] = self.out_b
        return out


def _check_volume_input(x: Tensor, cfg: NetConfig):
    s = cfg.input_side
    if x.ndim == 4:
        single, shape = True, x.shape
    elif x.ndim == 5:
        single, shape = False, x.shape[1:]
    else:
        raise ShapeError("encoder input", "[S,S,S,1] or [N,S,S,S,1]", f"{x.shape}")
    if shape != (s, s, s, 1):
        raise ShapeError("encoder input", f"spatial side {s} with one channel", f"{shape}")
    return single


def _encode_endpoint(x: Tensor, enc: EncoderParams, cfg: NetConfig) -> Tensor:
    h = x
    for lvl in enc.levels:
        h = ad.elu(ad.conv3d(h, lvl["c1.w"], lvl["c1.b"], stride=1))
        h = ad.elu(ad.conv3d(h, lvl["c2.w"], lvl["c2.b"], stride=2))
    return h


def encode(x, enc: EncoderParams, cfg: NetConfig):
    """Variational posterior parameters (mu, sigma) for one volume or a batch.

    ``sigma`` is softplus of the dense head's second half plus a small floor,
    hence strictly positive.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = _check_volume_input(x, cfg)
    h = _encode_endpoint(x, enc, cfg)
    n = 1 if single else x.shape[0]
    flat = ad.reshape(h, (n, cfg.endpoint_size) if not single else (1, cfg.endpoint_size))
    head = ad.dense(flat, enc.fc_w, enc.fc_b)
    mu = ad.narrow(head, 0, cfg.latent_dim, axis=-1)
    sigma = ad.softplus(ad.narrow(head, cfg.latent_dim, cfg.latent_dim, axis=-1)) + SIGMA_FLOOR
    if single:
        mu = ad.reshape(mu, (cfg.latent_dim,))
        sigma = ad.reshape(sigma, (cfg.latent_dim,))
    return mu, sigma


def reparameterize(mu: Tensor, sigma: Tensor, noise) -> Tensor:
    """Differentiable sample ``mu + noise * sigma`` for externally drawn noise."""
    noise_t = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise_t.shape != mu.shape:
        raise ShapeError("reparameterization noise", f"{mu.shape}", f"{noise_t.shape}")
    return mu + noise_t * sigma


def decode(z, dec: DecoderParams, cfg: NetConfig) -> Tensor:
    """Map latent vectors back to volumes; identity output activation.

    Each level is a nearest-neighbor 2x upsample followed by two
    convolutions with ELU; the upsample and the first convolution are
    evaluated as one fused op (same map, ~3x fewer kernel taps on CPU).
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    single = z.ndim == 1
    if z.shape[-1] != cfg.latent_dim or z.ndim > 2:
        raise ShapeError("decoder input", f"[{cfg.latent_dim}] or [N,{cfg.latent_dim}]", f"{z.shape}")
    h = ad.dense(z, dec.fc_w, dec.fc_b)
    n = 1 if single else z.shape[0]
    es = cfg.endpoint_side
    h = ad.reshape(h, (n, es, es, es, cfg.endpoint_features))
    for lvl in dec.levels:
        h = ad.elu(ad.upsample_conv3d(h, lvl["c1.w"], lvl["c1.b"]))
        h = ad.elu(ad.conv3d(h, lvl["c2.w"], lvl["c2.b"], stride=1))
    out = ad.conv3d(h, dec.out_w, dec.out_b, stride=1)
    if single:
        s = cfg.input_side
        out = ad.reshape(out, (s, s, s, 1))
    return out
