"""Total-variation denoising, optionally restricted by a prior-derived soft mask."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .model import SplitModel


@dataclass
class DenoiseSpec:
    lam: float = 0.02
    alpha: float = 0.05
    steps: int = 100
    mask_mode: str = "prior_soft_mask"
    mask_reduce: str = "mean"
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.mask_mode not in ("none", "prior_soft_mask"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.mask_reduce not in ("mean", "min"):
            raise ValueError(f"unknown mask_reduce {self.mask_reduce!r}")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def describe(self) -> str:
        tag = "masked-TV" if self.mask_mode == "prior_soft_mask" else "TV"
        return f"{tag}(lam={self.lam:g},alpha={self.alpha:g},steps={self.steps})"

    def to_dict(self) -> dict:
        return asdict(self)


def total_variation(x: np.ndarray) -> np.ndarray | float:
    """Anisotropic TV: sum of absolute forward differences along both image axes.

    ``(H, W)`` and ``(C, H, W)`` inputs give a scalar; ``(N, C, H, W)`` gives one
    value per sample. No wrap-around at the border.
    """
    x = np.asarray(x, dtype=np.float64)
    tv = np.abs(np.diff(x, axis=-2)).sum(axis=(-2, -1)) + np.abs(np.diff(x, axis=-1)).sum(axis=(-2, -1))
    if x.ndim == 4:
        return tv.sum(axis=1)
    return float(np.sum(tv))


def tv_subgradient(x: np.ndarray) -> np.ndarray:
    """Sub-gradient of :func:`total_variation` with ``sign(0) = 0``."""
    x = np.asarray(x)
    g = np.zeros_like(x)
    sv = np.sign(np.diff(x, axis=-2))
    g[..., 1:, :] += sv
    g[..., :-1, :] -= sv
    sh = np.sign(np.diff(x, axis=-1))
    g[..., :, 1:] += sh
    g[..., :, :-1] -= sh
    return g


def _objective(x: np.ndarray, x_prime: np.ndarray, lam: float) -> float:
    d = np.asarray(x, np.float64) - x_prime
    return float(0.5 * np.sum(d * d) + lam * np.sum(total_variation(x)))


@dataclass
class DenoiseResult:
    x: np.ndarray
    trace: list[float] = field(default_factory=list)


def _iterate(x_prime: np.ndarray, mask: np.ndarray | None, spec: DenoiseSpec, with_trace: bool) -> DenoiseResult:
    x_prime = np.asarray(x_prime, dtype=np.float32)
    alpha = np.float32(spec.alpha)
    lam = np.float32(spec.lam)
    x = x_prime.copy()
    trace = [_objective(x, x_prime, spec.lam)] if with_trace else []
    for _ in range(spec.steps):
        step = alpha * ((x - x_prime) + lam * tv_subgradient(x))
        if mask is not None:
            step = step * mask
        x = np.clip(x - step, 0.0, 1.0)
        if with_trace:
            trace.append(_objective(x, x_prime, spec.lam))
    return DenoiseResult(x, trace)


def tv_denoise(x_prime: np.ndarray, spec: DenoiseSpec, with_trace: bool = False) -> DenoiseResult:
    """Sub-gradient descent on ``0.5 * ||x - x'||^2 + lam * TV(x)`` from ``x = x'``."""
    return _iterate(x_prime, None, spec, with_trace)


def masked_tv_denoise(x_prime: np.ndarray, mask: np.ndarray, spec: DenoiseSpec, with_trace: bool = False) -> DenoiseResult:
    """As :func:`tv_denoise` but every step is scaled elementwise by ``mask``."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != np.shape(x_prime):
        raise ValueError(f"mask shape {mask.shape} != image shape {np.shape(x_prime)}")
    return _iterate(x_prime, mask, spec, with_trace)


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (s - i0).astype(np.float32)


def upsample(maps: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize ``(N, h, w)`` maps to ``(N, H, W)`` with half-pixel-centred sampling."""
    n, h, w = maps.shape
    H, W = size
    if mode == "nearest":
        ri = np.minimum((np.arange(H) * h) // H, h - 1)
        ci = np.minimum((np.arange(W) * w) // W, w - 1)
        return maps[:, ri][:, :, ci]
    r0, r1, rw = _interp_axis(h, H)
    c0, c1, cw = _interp_axis(w, W)
    rows = maps[:, r0] * (1 - rw)[None, :, None] + maps[:, r1] * rw[None, :, None]
    return rows[:, :, c0] * (1 - cw)[None, None, :] + rows[:, :, c1] * cw[None, None, :]


def likelihood_map(model: SplitModel, x: np.ndarray, reduce: str = "mean") -> np.ndarray:
    """Per-location latent likelihood reduced over channels, shape ``(N, hz, wz)``."""
    model.set_trainable(False)
    p = model.likelihood(model.head_forward(Tensor(np.asarray(x, np.float32))), mode="rounded").data
    return p.mean(axis=1) if reduce == "mean" else p.min(axis=1)


def prior_soft_mask(model: SplitModel, x_prime: np.ndarray, reduce: str = "mean", interpolation: str = "bilinear") -> np.ndarray:
    """Interpolated likelihood map broadcast over colour channels; no gradient reaches the model."""
    n, c, h, w = np.shape(x_prime)
    m = upsample(likelihood_map(model, x_prime, reduce), (h, w), interpolation)
    return np.clip(np.broadcast_to(m[:, None], (n, c, h, w)), 0.0, 1.0).astype(np.float32)


def defend(model: SplitModel, x_prime: np.ndarray, spec: DenoiseSpec) -> np.ndarray:
    if spec.mask_mode == "none":
        return tv_denoise(x_prime, spec).x
    mask = prior_soft_mask(model, x_prime, spec.mask_reduce, spec.interpolation)
    return masked_tv_denoise(x_prime, mask, spec).x
