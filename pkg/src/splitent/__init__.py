"""Split-inference classifiers with learned entropy bottlenecks, a lossless range
coder, input-space attacks on coded size, and TV-based defenses."""

from .autodiff import Tensor, backward
from .coder import Bitstream, CdfTable, LatentCodec, build_cdf_tables, decode, encode
from .data import Dataset, load_dataset
from .defense import DenoiseSpec, defend, masked_tv_denoise, tv_denoise
from .model import ModelConfig, SplitModel
from .perturb import AttackSpec, CorruptionSpec, corrupt, pgd
from .pipeline import LinkModel, experiment_grid, run_split_inference
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
