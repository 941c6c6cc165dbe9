"""Rate-task training, evaluation and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coder import LatentCodec
from .data import Dataset
from .model import ModelConfig, SplitModel

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ENTC"
CKPT_VERSION = 1
BETA_GRID = (0.02, 0.08, 0.32, 1.28)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    beta: float = 0.08
    lr: float = 1e-3
    epochs: int = 8
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = (4, 6)
    lr_decay: float = 0.3
    augment: bool = True
    beta_grid: tuple[float, ...] = BETA_GRID

    def __post_init__(self):
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        self.beta_grid = tuple(self.beta_grid)
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def rd_task_loss(logits: Tensor, labels, rate_bits_per_sample: Tensor, beta: float, num_latent_elements: int) -> Tensor:
    """Cross entropy + beta * (mean per-sample rate in bits) / latent elements."""
    ce = ad.softmax_cross_entropy(logits, labels)
    if beta == 0:
        return ce
    return ad.add(ce, ad.scale(ad.mean(rate_bits_per_sample), beta / num_latent_elements))


# --------------------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_shapes(params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        g = grads.get(k)
        if g is not None and g.shape != p.shape:
            raise ad.DimensionError(f"{k}: grad shape {g.shape} != param shape {p.shape}")


def adam_step(params, grads, state: OptimizerState, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update of ``params`` (name -> array); missing grads count as zero."""
    _check_shapes(params, grads)
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def sgd_momentum_step(params, grads, state: OptimizerState, lr: float, momentum: float = 0.9) -> None:
    _check_shapes(params, grads)
    state.step += 1
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        buf = state.m.setdefault(k, np.zeros_like(p))
        buf *= momentum
        buf += g
        p -= (lr * buf).astype(p.dtype)


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: SplitModel
    train_config: TrainConfig | None = None
    metrics: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "model_config": self.model.config.to_dict(),
            "train_config": None if self.train_config is None else asdict(self.train_config),
            "metrics": self.metrics,
        }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(meta)), meta]
    state = ckpt.model.state_dict()
    out.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, mlen = struct.unpack_from("<BI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    meta = json.loads(data[pos : pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    model = SplitModel(ModelConfig(**meta["model_config"]))
    model.load_state_dict(state)
    tc = meta.get("train_config")
    return Checkpoint(model, TrainConfig(**tc) if tc else None, meta.get("metrics") or {})


# --------------------------------------------------------------------------- training


def _augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(x)) < 0.5
    x = x.copy()
    x[flip] = x[flip, :, :, ::-1]
    return x


def train(model_config: ModelConfig, config: TrainConfig, dataset: Dataset, progress: Callable[[str], None] | None = None) -> Checkpoint:
    """Train head, tail and prior jointly with the noise surrogate for rounding."""
    model_config = ModelConfig(**{**model_config.to_dict(), "beta": config.beta})
    model = SplitModel(model_config, seed=config.seed)
    params = model.parameters()
    arrays = {k: p.data for k, p in params.items()}
    state = OptimizerState()
    rng = np.random.default_rng(config.seed)
    n_elem = int(np.prod(model_config.latent_shape))
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** sum(epoch >= e for e in config.lr_decay_epochs)
        order = rng.permutation(len(dataset))
        t0 = time.time()
        tot_loss = tot_bits = correct = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            if config.augment:
                x = _augment(x, rng)
            model.zero_grad()
            fwd = model.forward(Tensor(x), mode="noisy", seed=config.seed * 1_000_003 + step)
            _, per_sample = fwd.rate()
            loss = rd_task_loss(fwd.logits, y, per_sample, config.beta, n_elem)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: rate {per_sample.data.mean():.3g}, "
                    f"logit range [{fwd.logits.data.min():.3g}, {fwd.logits.data.max():.3g}]"
                )
            ad.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            if config.optimizer == "adam":
                adam_step(arrays, grads, state, lr)
            else:
                sgd_momentum_step(arrays, grads, state, lr, config.momentum)
            tot_loss += float(loss.data) * len(idx)
            tot_bits += float(per_sample.data.sum())
            correct += float((fwd.logits.data.argmax(1) == y).sum())
            step += 1
        msg = (
            f"epoch {epoch + 1}/{config.epochs} lr {lr:.2e} loss {tot_loss / len(order):.4f} "
            f"acc {100 * correct / len(order):.2f}% bits/img {tot_bits / len(order):.1f} ({time.time() - t0:.0f}s)"
        )
        log.info(msg)
        if progress:
            progress(msg)
    model.zero_grad()
    return Checkpoint(model, config)


# --------------------------------------------------------------------------- evaluation


@dataclass
class Metrics:
    accuracy: float
    size_kb_mean: float
    size_kb_std: float
    payload_kb_mean: float
    est_bits_mean: float
    n: int
    sizes: np.ndarray = field(default=None, repr=False)
    correct: np.ndarray = field(default=None, repr=False)

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("sizes", "correct")}


Perturbation = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def estimated_bits(model: SplitModel, x: np.ndarray) -> np.ndarray:
    model.set_trainable(False)
    fwd = model.forward(Tensor(x), mode="rounded", with_logits=False)
    return fwd.rate()[1].data.astype(np.float64)


def evaluate(model: SplitModel, dataset: Dataset, perturbation: Perturbation | None = None, batch_size: int = 250) -> Metrics:
    """Accuracy and real coded sizes; the tail only sees decoded latents.

    ``perturbation(x, y, batch_index)`` is applied to each batch before the head.
    """
    model.set_trainable(False)
    codec = LatentCodec(model)
    sizes, payloads, bits, correct = [], [], [], []
    for bi, (x, y) in enumerate(dataset.batches(batch_size)):
        if perturbation is not None:
            x = perturbation(x, y, bi)
        z = model.head_forward(Tensor(x))
        est = model.prior_forward(z, mode="rounded")
        bits.append(est.rate()[1].data.astype(np.float64))
        coded = codec.roundtrip(z.data)
        logits = model.tail_forward(Tensor(coded.z_hat)).data
        sizes.append(coded.sizes)
        payloads.append(coded.payload_sizes)
        correct.append(logits.argmax(1) == y)
    sizes = np.concatenate(sizes)
    correct = np.concatenate(correct)
    return Metrics(
        accuracy=float(100.0 * correct.mean()),
        size_kb_mean=float(sizes.mean() / 1000.0),
        size_kb_std=float(sizes.std() / 1000.0),
        payload_kb_mean=float(np.concatenate(payloads).mean() / 1000.0),
        est_bits_mean=float(np.concatenate(bits).mean()),
        n=int(len(correct)),
        sizes=sizes,
        correct=correct,
    )
