"""Datasets and trained checkpoints shared by the slow tests, cached on disk.

The dataset is real CIFAR-10 when ``SPLITENT_CIFAR_DIR`` points at the binary
version (``data_batch_*.bin`` + ``test_batch.bin``); otherwise a synthetic
stand-in in the same format is generated. Checkpoints are keyed by their
training settings, so editing a setting retrains only what changed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

from splitent.data import TEST_FILE, load_dataset, write_synthetic_dataset
from splitent.model import ModelConfig
from splitent.train import BETA_GRID, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

CACHE = Path(os.environ.get("SPLITENT_CACHE", Path(__file__).resolve().parent.parent / ".cache"))
SYNTH_TRAIN = 20000
SYNTH_TEST = 2000
DEFAULT_BETA = 0.08


def cifar_dir() -> Path | None:
    d = os.environ.get("SPLITENT_CIFAR_DIR")
    if d and (Path(d) / TEST_FILE).exists():
        return Path(d)
    return None


def data_dir() -> Path:
    real = cifar_dir()
    if real is not None:
        return real
    root = CACHE / "synthetic"
    if not (root / TEST_FILE).exists():
        write_synthetic_dataset(root, SYNTH_TRAIN, SYNTH_TEST, seed=0)
    return root


def train_config(beta: float) -> TrainConfig:
    return TrainConfig(beta=beta)


def checkpoint_path(prior: str = "FP", beta: float = DEFAULT_BETA) -> Path:
    tc = train_config(beta)
    key = json.dumps({"data": str(data_dir()), "prior": prior, "train": tc.__dict__}, sort_keys=True, default=str)
    digest = hashlib.sha1(key.encode()).hexdigest()[:10]
    path = CACHE / "checkpoints" / f"{prior}_b{beta:g}_{digest}.entc"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        log.warning("training %s beta=%g (cached at %s)", prior, beta, path)
        ds = load_dataset(data_dir(), "train")
        ckpt = train(ModelConfig(prior_kind=prior, beta=beta), tc, ds)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(ckpt, tmp)
        tmp.replace(path)
    return path


def load(prior: str = "FP", beta: float = DEFAULT_BETA):
    return load_checkpoint(checkpoint_path(prior, beta)).model


def beta_grid() -> tuple[float, ...]:
    return BETA_GRID
