"""Input-space interference: parametrised corruptions and PGD-family attacks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft, ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .model import SplitModel

# Five severities per kind; logged with every result row via CorruptionSpec.describe().
SEVERITY_TABLES: dict[str, tuple] = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),  # std
    "shot_noise": (500, 250, 100, 75, 50),  # photon count
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),  # replaced fraction
    "defocus_blur": (0.6, 1.0, 1.5, 2.0, 2.6),  # disk radius, px
    "motion_blur": (3, 5, 7, 9, 11),  # line length, px
    "glass_blur": ((0.4, 1, 1), (0.5, 1, 2), (0.6, 1, 2), (0.6, 2, 2), (0.7, 2, 3)),  # (sigma, max shift, iterations)
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),  # contrast factor
}
CORRUPTIONS = tuple(SEVERITY_TABLES)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise ValueError(f"unknown corruption kind {self.kind!r}; choose from {', '.join(CORRUPTIONS)}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self):
        return SEVERITY_TABLES[self.kind][self.severity - 1]

    def describe(self) -> str:
        return f"{self.kind}:s{self.severity}({self.parameter})"


def _filter_channels(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel[None, None]
    return ndimage.convolve(x, k, mode="reflect")


def disk_kernel(radius: float) -> np.ndarray:
    """Anti-aliased disk, normalised to unit sum."""
    r = int(np.ceil(radius + 0.5))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    w = np.clip(radius + 0.5 - np.hypot(yy, xx), 0.0, 1.0)
    return w / w.sum()


def motion_kernel(length: int) -> np.ndarray:
    """Normalised line kernel along the 45 degree diagonal."""
    k = np.eye(length)[::-1]
    return k / k.sum()


def _glass(x: np.ndarray, sigma: float, shift: int, iterations: int, rng: np.random.Generator) -> np.ndarray:
    out = ndimage.gaussian_filter(x, sigma=(0, 0, sigma, sigma), mode="reflect")
    n, c, h, w = out.shape
    yy, xx = np.mgrid[0:h, 0:w]
    rows = np.arange(n)[:, None, None]
    for _ in range(iterations):
        dy = rng.integers(-shift, shift + 1, size=(n, h, w))
        dx = rng.integers(-shift, shift + 1, size=(n, h, w))
        sy = np.clip(yy[None] + dy, 0, h - 1)
        sx = np.clip(xx[None] + dx, 0, w - 1)
        out = out.transpose(0, 2, 3, 1)[rows, sy, sx].transpose(0, 3, 1, 2)
    return ndimage.gaussian_filter(out, sigma=(0, 0, sigma, sigma), mode="reflect")


def corrupt(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption to an image batch ``(N, 3, H, W)`` in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    p = spec.parameter
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, p, size=x.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(x * p) / p
    elif spec.kind == "impulse_noise":
        out = x.copy()
        hit = rng.random(x.shape) < p
        out[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float64)
    elif spec.kind == "defocus_blur":
        out = _filter_channels(x, disk_kernel(p))
    elif spec.kind == "motion_blur":
        out = _filter_channels(x, motion_kernel(p))
    elif spec.kind == "glass_blur":
        out = _glass(x, *p, rng=rng)
    else:  # contrast
        m = x.mean(axis=(2, 3), keepdims=True)
        out = (x - m) * p + m
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_noise_baseline(x: np.ndarray, epsilon: float, seed: int = 0) -> np.ndarray:
    """``x + U(-eps, eps)``, clipped to [0, 1]."""
    if epsilon == 0:
        return np.asarray(x, dtype=np.float32).copy()
    u = np.random.default_rng(seed).uniform(-epsilon, epsilon, size=np.shape(x))
    return np.clip(x + u, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- frequency tools


def dct2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    return fft.dctn(x, type=2, norm="ortho", axes=(-2, -1))


def idct2(c: np.ndarray) -> np.ndarray:
    return fft.idctn(c, type=2, norm="ortho", axes=(-2, -1))


def lowfreq_filter_gradient(g: np.ndarray, cutoff: int) -> np.ndarray:
    """Drop DCT coefficients with ``u + v >= cutoff`` and transform back."""
    h, w = g.shape[-2:]
    if cutoff > h + w:
        cutoff = h + w
    uu, vv = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    keep = (uu + vv) < cutoff
    return idct2(dct2(g) * keep).astype(g.dtype)


# --------------------------------------------------------------------------- attacks


@dataclass
class AttackSpec:
    loss_kind: str = "entropy"
    epsilon: float = 8 / 255
    alpha: float | None = None
    steps: int = 20
    grad_filter: str = "none"
    cutoff: int | None = None
    loss_mask: str = "none"
    random_start: bool = False
    seed: int = 0
    rounding: str = "ste"

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = min(1.0, 2.5 / self.steps) if self.steps > 0 else 1.0
        if self.loss_kind not in ("accuracy", "entropy"):
            raise ValueError(f"loss_kind must be accuracy or entropy, got {self.loss_kind!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.grad_filter not in ("none", "lowfreq"):
            raise ValueError(f"unknown grad_filter {self.grad_filter!r}")
        if self.loss_mask not in ("none", "regional"):
            raise ValueError(f"unknown loss_mask {self.loss_mask!r}")
        if self.rounding not in ("ste", "noise"):
            raise ValueError(f"rounding must be ste or noise, got {self.rounding!r}")

    def describe(self) -> str:
        name = "PGD-Acc" if self.loss_kind == "accuracy" else "PGD-E"
        if self.grad_filter == "lowfreq":
            name += "-lowfreq" if self.cutoff is None else f"-lowfreq{self.cutoff}"
        if self.loss_mask == "regional":
            name += "-regional"
        return f"{name}:eps={self.epsilon * 255:g}/255"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: list[float] = field(default_factory=list)


def entropy_loss(model: SplitModel, x: Tensor, rounding: str = "ste", seed: int = 0) -> Tensor:
    """Total estimated bits ``sum(-log2 P(z))`` of the batch (hyper-latent included for MSHP)."""
    z = model.head_forward(x)
    fwd = model.prior_forward(z, mode="rounded" if rounding == "ste" else "noisy", seed=seed)
    return fwd.rate()[0]


def regional_entropy_loss(model: SplitModel, x: Tensor, rounding: str = "ste", seed: int = 0) -> Tensor:
    """``sum((1 - p) * -log2 p)`` over latent elements with the mask held constant."""
    z = model.head_forward(x)
    fwd = model.prior_forward(z, mode="rounded" if rounding == "ste" else "noisy", seed=seed)
    p = fwd.z_likelihoods
    bits = ad.scale(ad.log(p), -1.0 / np.log(2.0))
    weighted = ad.mul_const(bits, 1.0 - p.data)
    return ad.sum(weighted)


def _attack_loss(model: SplitModel, x: Tensor, y: np.ndarray, spec: AttackSpec, step: int) -> Tensor:
    seed = spec.seed * 7919 + step
    if spec.loss_kind == "accuracy":
        logits = model.tail_forward(model.forward(x, mode="rounded", with_logits=False).z_hat)
        return ad.scale(ad.softmax_cross_entropy(logits, y), float(len(y)))
    if spec.loss_mask == "regional":
        return regional_entropy_loss(model, x, spec.rounding, seed)
    return entropy_loss(model, x, spec.rounding, seed)


def pgd(x: np.ndarray, y: np.ndarray, model: SplitModel, spec: AttackSpec) -> AttackResult:
    """L-inf PGD: ``x <- clip01(clip_{x0 +- eps}(x + alpha * eps * sign(grad)))``.

    The trace holds the loss at every iterate, including the returned one.
    """
    model.set_trainable(False)
    x0 = np.asarray(x, dtype=np.float32)
    eps = np.float32(spec.epsilon)
    lo, hi = np.maximum(x0 - eps, 0), np.minimum(x0 + eps, 1)
    adv = x0.copy()
    if spec.random_start:
        adv = np.clip(adv + np.random.default_rng(spec.seed).uniform(-eps, eps, x0.shape).astype(np.float32), lo, hi)
    if spec.steps == 0:
        return AttackResult(adv, [])
    cutoff = spec.cutoff if spec.cutoff is not None else x0.shape[-2] // 4
    trace = []
    step_size = np.float32(spec.alpha * spec.epsilon)
    for i in range(spec.steps):
        xt = Tensor(adv, requires_grad=True)
        loss = _attack_loss(model, xt, y, spec, i)
        ad.backward(loss)
        trace.append(float(loss.data))
        g = xt.grad
        if spec.grad_filter == "lowfreq":
            g = lowfreq_filter_gradient(g, cutoff)
        adv = np.clip(adv + step_size * np.sign(g).astype(np.float32), lo, hi)
    trace.append(float(_attack_loss(model, Tensor(adv), y, spec, spec.steps).data))
    return AttackResult(adv, trace)
