"""Split classifier: head (x -> z), tail (z_hat -> logits) and entropy models.

Two priors are provided:

* ``FP``   factorized prior, one discretized logistic per latent channel.
* ``MSHP`` mean-scale hyperprior: a hyper-latent ``h`` (coded under its own
  factorized prior) from which per-element Gaussian means and scales of ``z``
  are decoded.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor

LIKELIHOOD_FLOOR = 1e-9
SCALE_FLOOR = 1e-3
SUPPORT = 127
_SQRT2PI = math.sqrt(2 * math.pi)


class ParameterError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    latent_channels: int = 48
    latent_downsample: int = 4
    num_classes: int = 10
    prior_kind: str = "FP"
    beta: float = 0.08
    head_widths: tuple[int, int] = (32, 64)
    tail_widths: tuple[int, int, int] = (96, 128, 128)
    hyper_channels: int = 16
    hyper_width: int = 64

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.head_widths = tuple(self.head_widths)
        self.tail_widths = tuple(self.tail_widths)
        c, h, w = self.input_shape
        ds = self.latent_downsample
        if ds not in (1, 2, 4) or h % ds or w % ds:
            raise ParameterError(f"latent_downsample {ds} must be 1, 2 or 4 and divide {h}x{w}")
        if self.beta <= 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if self.prior_kind not in ("FP", "MSHP"):
            raise ParameterError(f"unknown prior_kind {self.prior_kind!r}")
        if self.prior_kind == "MSHP" and (h // ds) % 4:
            raise ParameterError("MSHP needs latent spatial size divisible by 4")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        ds = self.latent_downsample
        return (self.latent_channels, h // ds, w // ds)

    @property
    def hyper_shape(self) -> tuple[int, int, int]:
        c, h, w = self.latent_shape
        return (self.hyper_channels, h // 4, w // 4)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- likelihood primitive


def _std_cdf(u: np.ndarray, family: str) -> np.ndarray:
    return special.expit(u) if family == "logistic" else special.ndtr(u)


def _std_pdf(u: np.ndarray, family: str) -> np.ndarray:
    if family == "logistic":
        s = special.expit(u)
        return s * (1 - s)
    return np.exp(-0.5 * u * u) / _SQRT2PI


def _channel_view(p: np.ndarray, ndim: int) -> np.ndarray:
    return p.reshape((1, -1) + (1,) * (ndim - 2))


def bin_probability(v: Tensor, loc: Tensor | None, scale: Tensor, family: str) -> Tensor:
    """Mass of the unit bin around ``v``: ``c((v-loc+0.5)/s) - c((v-loc-0.5)/s)``.

    ``loc``/``scale`` are either full-shape tensors or per-channel vectors.
    Evaluated on the upper tail when ``v > loc`` so far-tail bins keep
    precision. The result is clipped to ``[LIKELIHOOD_FLOOR, 1]``; the gradient
    vanishes where the floor is active.
    """
    if np.any(scale.data <= 0):
        raise ParameterError(f"non-positive scale (min {scale.data.min()})")
    x = v.data
    per_channel = scale.data.ndim == 1
    s = _channel_view(scale.data, x.ndim) if per_channel else scale.data
    mu = 0.0 if loc is None else (_channel_view(loc.data, x.ndim) if per_channel else loc.data)
    d = x - mu
    flip = np.where(d > 0, -1.0, 1.0).astype(x.dtype)
    up = (d + 0.5) / s
    lo = (d - 0.5) / s
    raw = flip * (_std_cdf(flip * up, family) - _std_cdf(flip * lo, family))
    p = np.clip(raw, LIKELIHOOD_FLOOR, 1.0).astype(x.dtype)
    live = raw > LIKELIHOOD_FLOOR

    def bw(g):
        fu = _std_pdf(up, family)
        fl = _std_pdf(lo, family)
        gg = g * live
        dv = (gg * (fu - fl) / s).astype(x.dtype)
        ds = (-gg * (fu * up - fl * lo) / s).astype(x.dtype)
        if per_channel:
            axes = (0,) + tuple(range(2, x.ndim))
            gloc = None if loc is None else -dv.sum(axis=axes)
            return (dv, gloc, ds.sum(axis=axes)) if loc is not None else (dv, ds.sum(axis=axes))
        return (dv, -dv, ds) if loc is not None else (dv, ds)

    parents = (v, loc, scale) if loc is not None else (v, scale)
    return ad.make_op(p, parents, bw, f"bin_probability[{family}]")


def rate_bits(likelihoods: Tensor) -> tuple[Tensor, Tensor]:
    """Total and per-sample ``sum(-log2 p)``."""
    if np.any(likelihoods.data <= 0):
        raise ad.DomainError("likelihoods must be strictly positive")
    bits = ad.scale(ad.log(likelihoods), -1.0 / math.log(2.0))
    per_sample = ad.sum(bits, axis=tuple(range(1, bits.data.ndim)))
    return ad.sum(per_sample), per_sample


# --------------------------------------------------------------------------- model


@dataclass
class QuantizedLatent:
    """Integer latent symbols plus the per-channel value range they occupy."""

    values: np.ndarray
    channel_range: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int32)
        if self.channel_range is None:
            self.channel_range = channel_range(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def channel_range(values: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return np.zeros((values.shape[1] if values.ndim > 1 else 0, 2), dtype=np.int32)
    axes = (0,) + tuple(range(2, values.ndim))
    return np.stack([values.min(axis=axes), values.max(axis=axes)], axis=1).astype(np.int32)


def quantize(z: np.ndarray) -> QuantizedLatent:
    """Round half away from zero and clamp into the coder support."""
    q = np.clip(ad.round_half_away(z), -SUPPORT, SUPPORT)
    return QuantizedLatent(q.astype(np.int32))


@dataclass
class Forward:
    """Everything one pass through head + prior + tail produced."""

    z: Tensor
    z_hat: Tensor
    z_likelihoods: Tensor
    logits: Tensor | None = None
    h: Tensor | None = None
    h_likelihoods: Tensor | None = None
    mu: Tensor | None = None
    sigma: Tensor | None = None

    def rate(self) -> tuple[Tensor, Tensor]:
        total, per = rate_bits(self.z_likelihoods)
        if self.h_likelihoods is not None:
            htotal, hper = rate_bits(self.h_likelihoods)
            return ad.add(total, htotal), ad.add(per, hper)
        return total, per


class SplitModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _conv(self, rng, name: str, cin: int, cout: int, k: int, gain: float = math.sqrt(2.0)):
        std = gain / math.sqrt(cin * k * k)
        self.params[f"{name}.w"] = Tensor(rng.normal(0, std, (cout, cin, k, k)).astype(np.float32), True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, np.float32), True)

    def _init(self, rng) -> None:
        cfg = self.config
        c_in = cfg.input_shape[0]
        cz = cfg.latent_channels
        h1, h2 = cfg.head_widths
        self._conv(rng, "head.0", c_in, h1, 4)
        self._conv(rng, "head.1", h1, h2, 4)
        self._conv(rng, "head.2", h2, cz, 3, gain=2.0)
        t1, t2, t3 = cfg.tail_widths
        self._conv(rng, "tail.0", cz, t1, 3)
        self._conv(rng, "tail.1", t1, t2, 4)
        self._conv(rng, "tail.2", t2, t3, 3)
        self.params["tail.fc.w"] = Tensor(rng.normal(0, 1 / math.sqrt(t3), (cfg.num_classes, t3)).astype(np.float32), True)
        self.params["tail.fc.b"] = Tensor(np.zeros(cfg.num_classes, np.float32), True)
        if cfg.prior_kind == "FP":
            self._factorized(rng, "prior", cz)
        else:
            ch, hw = cfg.hyper_channels, cfg.hyper_width
            self._conv(rng, "hyper_enc.0", cz, hw, 3)
            self._conv(rng, "hyper_enc.1", hw, hw, 4)
            self._conv(rng, "hyper_enc.2", hw, ch, 4, gain=1.0)
            self._factorized(rng, "hyper_prior", ch)
            self._conv(rng, "hyper_dec.0", ch, hw, 3)
            self._conv(rng, "hyper_dec.1", hw, hw, 3)
            self._conv(rng, "hyper_dec.2", hw, 2 * cz, 1, gain=0.5)

    def _factorized(self, rng, name: str, channels: int) -> None:
        self.params[f"{name}.loc"] = Tensor(np.zeros(channels, np.float32), True)
        # softplus(0.5413) == 1
        self.params[f"{name}.raw_scale"] = Tensor(np.full(channels, 0.5413, np.float32), True)

    def parameters(self) -> OrderedDict[str, Tensor]:
        return self.params

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ParameterError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ParameterError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def _layer(self, x: Tensor, name: str, stride: int = 1, act: bool = True) -> Tensor:
        w = self.params[f"{name}.w"]
        k = w.shape[-1]
        pad = 1 if k in (3, 4) else 0
        y = ad.conv2d(x, w, self.params[f"{name}.b"], stride=stride, pad=pad)
        return ad.relu(y) if act else y

    # -- networks -----------------------------------------------------------

    def head_forward(self, x: Tensor) -> Tensor:
        """Image batch in [0, 1] -> continuous latent ``z[N, Cz, H/ds, W/ds]``."""
        x = ad._as_tensor(x)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ad.DimensionError(f"head expects (N, {self.config.input_shape}), got {x.shape}")
        strides = {1: (1, 1), 2: (2, 1), 4: (2, 2)}[self.config.latent_downsample]
        centred = Tensor(np.full(x.shape, -0.5, dtype=x.data.dtype))
        y = self._layer(ad.add(x, centred), "head.0", stride=strides[0])
        y = self._layer(y, "head.1", stride=strides[1])
        return self._layer(y, "head.2", act=False)

    def tail_forward(self, z_hat: Tensor) -> Tensor:
        z_hat = ad._as_tensor(z_hat)
        if z_hat.data.ndim != 4 or tuple(z_hat.shape[1:]) != self.config.latent_shape:
            raise ad.DimensionError(f"tail expects (N, {self.config.latent_shape}), got {z_hat.shape}")
        y = self._layer(z_hat, "tail.0")
        y = self._layer(y, "tail.1", stride=2)
        y = self._layer(y, "tail.2")
        return ad.dense(ad.global_avg_pool(y), self.params["tail.fc.w"], self.params["tail.fc.b"])

    # -- prior --------------------------------------------------------------

    def factorized_params(self, name: str = "prior") -> tuple[Tensor, Tensor]:
        return self.params[f"{name}.loc"], ad.softplus(self.params[f"{name}.raw_scale"])

    def hyper_encode(self, z: Tensor) -> Tensor:
        y = self._layer(z, "hyper_enc.0")
        y = self._layer(y, "hyper_enc.1", stride=2)
        return self._layer(y, "hyper_enc.2", stride=2, act=False)

    def hyper_decode(self, h_hat: Tensor) -> tuple[Tensor, Tensor]:
        """Quantized hyper-latent -> per-element (mean, scale) of ``z``."""
        y = self._layer(ad.upsample2x(h_hat), "hyper_dec.0")
        y = self._layer(ad.upsample2x(y), "hyper_dec.1")
        y = self._layer(y, "hyper_dec.2", act=False)
        cz = self.config.latent_channels
        mu = ad.channel_slice(y, 0, cz)
        sigma = ad.clamp(ad.softplus(ad.channel_slice(y, cz, 2 * cz)), lo=SCALE_FLOOR)
        return mu, sigma

    def _check_mode(self, mode: str) -> None:
        if mode not in ("noisy", "rounded"):
            raise ValueError(f"mode must be 'noisy' or 'rounded', got {mode!r}")

    def likelihood(self, z: Tensor, mode: str = "rounded", seed: int = 0) -> Tensor:
        """Per-element probabilities of ``z`` under the prior.

        ``noisy`` adds U(-0.5, 0.5) (train-time surrogate), ``rounded`` rounds
        with a straight-through gradient. Returns only the ``z`` likelihoods; use
        :meth:`prior_forward` for the MSHP hyper-latent as well.
        """
        return self.prior_forward(z, mode, seed).z_likelihoods

    def prior_forward(self, z: Tensor, mode: str = "rounded", seed: int = 0) -> Forward:
        self._check_mode(mode)
        if self.config.prior_kind == "FP":
            z_hat = ad.add_uniform_noise(z, seed) if mode == "noisy" else ad.round_ste(z)
            loc, scale = self.factorized_params("prior")
            return Forward(z=z, z_hat=z_hat, z_likelihoods=bin_probability(z_hat, loc, scale, "logistic"))
        return self.mshp_forward(z, mode, seed)

    def mshp_forward(self, z: Tensor, mode: str = "rounded", seed: int = 0) -> Forward:
        """Hyper-latent path: ``h = he(z)``, ``h`` under FP, ``z ~ N(mu(h_hat), sigma(h_hat))``."""
        if self.config.prior_kind != "MSHP":
            raise ParameterError("mshp_forward called on a factorized-prior model")
        self._check_mode(mode)
        h = self.hyper_encode(z)
        h_hat = ad.add_uniform_noise(h, seed + 1) if mode == "noisy" else ad.round_ste(h)
        hloc, hscale = self.factorized_params("hyper_prior")
        h_lik = bin_probability(h_hat, hloc, hscale, "logistic")
        mu, sigma = self.hyper_decode(h_hat)
        centered = ad.scale_add(z, mu, -1.0)
        residual = ad.add_uniform_noise(centered, seed) if mode == "noisy" else ad.round_ste(centered)
        z_lik = bin_probability(residual, None, sigma, "gaussian")
        z_hat = ad.add(residual, mu)
        return Forward(z=z, z_hat=z_hat, z_likelihoods=z_lik, h=h, h_likelihoods=h_lik, mu=mu, sigma=sigma)

    def forward(self, x: Tensor, mode: str = "rounded", seed: int = 0, with_logits: bool = True) -> Forward:
        z = self.head_forward(x)
        out = self.prior_forward(z, mode, seed)
        if with_logits:
            out.logits = self.tail_forward(out.z_hat)
        return out

    # -- numpy helpers used by the coder ------------------------------------

    def factorized_numpy(self, name: str = "prior") -> tuple[np.ndarray, np.ndarray]:
        loc, scale = self.factorized_params(name)
        return loc.data.astype(np.float64), scale.data.astype(np.float64)

    def decode_scales(self, h_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, sigma = self.hyper_decode(Tensor(h_q.astype(np.float32)))
        return mu.data, sigma.data


def bitrate_map(model: SplitModel, z_hat: QuantizedLatent | np.ndarray, sigma: np.ndarray | None = None) -> np.ndarray:
    """Channel-summed ``-log2 p`` per latent location, shape ``(N, hz, wz)``.

    For FP ``z_hat`` holds the rounded latent. For MSHP it holds the coded
    residuals ``round(z - mu)`` and ``sigma`` the decoded per-element scales.
    """
    values = z_hat.values if isinstance(z_hat, QuantizedLatent) else np.asarray(z_hat)
    v = Tensor(values.astype(np.float32))
    if model.config.prior_kind == "FP":
        loc, scale = model.factorized_params("prior")
        p = bin_probability(v, loc, scale, "logistic")
    else:
        if sigma is None:
            raise ParameterError("MSHP bit-rate map needs the decoded scales")
        p = bin_probability(v, None, Tensor(np.asarray(sigma, np.float32)), "gaussian")
    return (-np.log2(p.data)).sum(axis=1)
