"""Split-inference simulation, experiment grids, result CSVs and map rendering."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import Tensor
from .coder import Bitstream, LatentCodec
from .data import Dataset, load_dataset
from .defense import DenoiseSpec, defend, total_variation
from .model import SplitModel, bitrate_map
from .perturb import AttackSpec, CorruptionSpec, corrupt, pgd, random_noise_baseline
from .train import Metrics, evaluate, load_checkpoint

log = logging.getLogger(__name__)

CSV_HEADER = (
    "config_id",
    "perturbation",
    "defense",
    "acc_pct",
    "size_kb_mean",
    "size_kb_std",
    "est_bits_mean",
    "latency_s_mean",
    "error",
)


class LosslessnessError(AssertionError):
    """The tail would have seen a latent different from the decoded bitstream."""


@dataclass
class LinkModel:
    bandwidth_bytes_per_s: float = 1e6
    rtt_s: float = 0.01

    def latency(self, size_bytes):
        return np.asarray(size_bytes, dtype=np.float64) / self.bandwidth_bytes_per_s + self.rtt_s


@dataclass
class SplitResult:
    predictions: np.ndarray
    streams: list[Bitstream]
    size_bytes: np.ndarray
    latency_s: np.ndarray


def run_split_inference(x: np.ndarray, model: SplitModel, link: LinkModel | None = None, codec: LatentCodec | None = None) -> SplitResult:
    """Head -> quantize -> encode -> bytes -> decode -> tail, for a batch.

    Raises :class:`LosslessnessError` if a decoded latent differs from the
    pre-coding quantized latent.
    """
    link = link or LinkModel()
    codec = codec or LatentCodec(model)
    model.set_trainable(False)
    z = model.head_forward(Tensor(np.asarray(x, np.float32))).data
    streams, q = codec.encode_batch(z)
    wire = [Bitstream.from_bytes(s.to_bytes()) for s in streams]
    z_hat = codec.decode_batch(wire)
    if not np.array_equal(z_hat, q["z_hat"]):
        raise LosslessnessError("decoded latent differs from the quantized latent")
    logits = model.tail_forward(Tensor(z_hat)).data
    sizes = np.array([len(s.to_bytes()) for s in streams], dtype=np.int64)
    return SplitResult(logits.argmax(axis=1), wire, sizes, link.latency(sizes))


# --------------------------------------------------------------------------- perturbation descriptors


def perturbation_from_dict(d: dict | None):
    """``{"type": "corruption"|"attack"|"noise", ...}`` -> spec object (``None`` for clean)."""
    if not d:
        return None
    d = dict(d)
    kind = d.pop("type")
    if kind == "corruption":
        return CorruptionSpec(**d)
    if kind == "attack":
        return AttackSpec(**d)
    if kind == "noise":
        return NoiseSpec(**d)
    raise ValueError(f"unknown perturbation type {kind!r}")


def defense_from_dict(d: dict | None) -> DenoiseSpec | None:
    return DenoiseSpec(**d) if d else None


@dataclass
class NoiseSpec:
    """Uniform-noise baseline inside the same l-inf ball as the attacks."""

    epsilon: float = 8 / 255
    seed: int = 0

    def describe(self) -> str:
        return f"uniform-noise:eps={self.epsilon * 255:g}/255"


def describe(spec) -> str:
    return "clean" if spec is None else spec.describe()


def apply_perturbation(spec, model: SplitModel, x: np.ndarray, y: np.ndarray, batch_index: int = 0) -> np.ndarray:
    if spec is None:
        return x
    if isinstance(spec, CorruptionSpec):
        return corrupt(x, CorruptionSpec(spec.kind, spec.severity, spec.seed * 100_003 + batch_index))
    if isinstance(spec, NoiseSpec):
        return random_noise_baseline(x, spec.epsilon, spec.seed * 100_003 + batch_index)
    if isinstance(spec, AttackSpec):
        return pgd(x, y, model, spec).x_adv
    raise TypeError(f"unsupported perturbation {spec!r}")


# --------------------------------------------------------------------------- experiment cells


@dataclass
class ResultRow:
    config_id: str
    perturbation: str
    defense: str
    acc_pct: float
    size_kb_mean: float
    size_kb_std: float
    est_bits_mean: float
    latency_s_mean: float
    error: str = ""
    wall_time_s: float = field(default=0.0, compare=False)

    def csv_fields(self) -> list[str]:
        return [
            self.config_id,
            self.perturbation,
            self.defense,
            f"{self.acc_pct:.4f}",
            f"{self.size_kb_mean:.6f}",
            f"{self.size_kb_std:.6f}",
            f"{self.est_bits_mean:.3f}",
            f"{self.latency_s_mean:.6f}",
            self.error,
        ]


@dataclass
class Cell:
    checkpoint: str
    perturbation: Any = None
    defense: DenoiseSpec | None = None

    def key(self, sample_limit: int | None, seed: int) -> str:
        blob = json.dumps(
            {
                "checkpoint": self.checkpoint,
                "perturbation": describe(self.perturbation),
                "perturbation_args": asdict(self.perturbation) if self.perturbation is not None else None,
                "defense": None if self.defense is None else self.defense.to_dict(),
                "n": sample_limit,
                "seed": seed,
            },
            sort_keys=True,
        )
        return hashlib.sha1(blob.encode()).hexdigest()[:12]


class PerturbedCache:
    """Perturbed batches keyed by (checkpoint, perturbation) so defended cells reuse attacks."""

    def __init__(self):
        self._store: dict[tuple, list[np.ndarray]] = {}

    def get(self, checkpoint: str, spec, model: SplitModel, dataset: Dataset, batch_size: int) -> list[np.ndarray]:
        key = (checkpoint, json.dumps(asdict(spec), sort_keys=True) if spec is not None else None, len(dataset))
        if key not in self._store:
            self._store[key] = [
                apply_perturbation(spec, model, x, y, bi) for bi, (x, y) in enumerate(dataset.batches(batch_size))
            ]
        return self._store[key]


def evaluate_cell(
    cell: Cell,
    model: SplitModel,
    dataset: Dataset,
    link: LinkModel,
    cache: PerturbedCache | None = None,
    batch_size: int = 250,
    seed: int = 0,
) -> tuple[ResultRow, Metrics]:
    cache = cache or PerturbedCache()
    start = time.time()
    batches = cache.get(cell.checkpoint, cell.perturbation, model, dataset, batch_size)

    def perturb(x, y, bi):
        xp = batches[bi]
        return defend(model, xp, cell.defense) if cell.defense is not None else xp

    metrics = evaluate(model, dataset, perturb, batch_size=batch_size)
    row = ResultRow(
        config_id=cell.key(len(dataset), seed),
        perturbation=describe(cell.perturbation),
        defense="none" if cell.defense is None else cell.defense.describe(),
        acc_pct=metrics.accuracy,
        size_kb_mean=metrics.size_kb_mean,
        size_kb_std=metrics.size_kb_std,
        est_bits_mean=metrics.est_bits_mean,
        latency_s_mean=float(link.latency(metrics.sizes).mean()),
        wall_time_s=time.time() - start,
    )
    return row, metrics


# --------------------------------------------------------------------------- CSV store


def read_rows(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    with p.open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_rows(path: str | Path, rows: list[ResultRow]) -> None:
    """Append rows whose config_id is not yet in the file; header written once."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    seen = {r["config_id"] for r in read_rows(p)}
    fresh = [r for r in rows if r.config_id not in seen]
    new_file = not p.exists() or p.stat().st_size == 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if new_file:
        w.writerow(CSV_HEADER)
    for r in fresh:
        w.writerow(r.csv_fields())
        seen.add(r.config_id)
    with p.open("a", newline="") as fh:
        fh.write(buf.getvalue())


@dataclass
class GridConfig:
    dataset: str
    checkpoints: dict[str, str]
    cells: list[Cell]
    output: str = "results.csv"
    split: str = "test"
    sample_limit: int | None = None
    seed: int = 0
    link: LinkModel = field(default_factory=LinkModel)
    batch_size: int = 250

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "GridConfig":
        base = base or Path(".")

        def resolve(p: str) -> str:
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        cells = [
            Cell(c["checkpoint"], perturbation_from_dict(c.get("perturbation")), defense_from_dict(c.get("defense")))
            for c in d["cells"]
        ]
        return cls(
            dataset=resolve(d["dataset"]),
            checkpoints={k: resolve(v) for k, v in d["checkpoints"].items()},
            cells=cells,
            output=resolve(d.get("output", "results.csv")),
            split=d.get("split", "test"),
            sample_limit=d.get("sample_limit"),
            seed=d.get("seed", 0),
            link=LinkModel(**d.get("link", {})),
            batch_size=d.get("batch_size", 250),
        )


def experiment_grid(cfg: GridConfig, models: dict[str, SplitModel] | None = None) -> list[ResultRow]:
    """Evaluate every cell; failures become rows with the error column set."""
    dataset = load_dataset(cfg.dataset, cfg.split).subset(cfg.sample_limit)
    models = dict(models or {})
    cache = PerturbedCache()
    done = {r["config_id"] for r in read_rows(cfg.output)}
    rows = []
    for cell in cfg.cells:
        cid = cell.key(len(dataset), cfg.seed)
        if cid in done:
            log.info("skip %s (already in %s)", cid, cfg.output)
            continue
        try:
            if cell.checkpoint not in models:
                models[cell.checkpoint] = load_checkpoint(cfg.checkpoints[cell.checkpoint]).model
            row, _ = evaluate_cell(cell, models[cell.checkpoint], dataset, cfg.link, cache, cfg.batch_size, cfg.seed)
        except Exception as exc:  # recorded, grid continues
            log.exception("cell %s failed", cid)
            row = ResultRow(cid, describe(cell.perturbation), "none" if cell.defense is None else cell.defense.describe(),
                            float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), error=f"{type(exc).__name__}: {exc}")
        log.info("%s %s %s acc=%.2f size=%.4fKB", row.config_id, row.perturbation, row.defense, row.acc_pct, row.size_kb_mean)
        rows.append(row)
        write_rows(cfg.output, [row])
    return rows


# --------------------------------------------------------------------------- maps


@dataclass
class MapImage:
    width: int
    height: int
    values: np.ndarray
    mode: str = "grayscale"

    def to_bytes(self, scale: int = 1) -> bytes:
        v = np.asarray(self.values, np.float64)
        if scale > 1:
            v = v.repeat(scale, axis=0).repeat(scale, axis=1)
        h, w = v.shape
        if self.mode == "grayscale":
            top = v.max()
            g = np.zeros_like(v) if top <= 0 else np.clip(v, 0, None) / top
            pix = np.floor(g * 255 + 0.5).astype(np.uint8)
            return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()
        top = np.abs(v).max()
        t = np.zeros_like(v) if top <= 0 else v / top
        fade = np.floor((1 - np.abs(t)) * 255 + 0.5).astype(np.uint8)
        rgb = np.full((h, w, 3), 255, dtype=np.uint8)
        pos, neg = t > 0, t < 0
        rgb[pos, 1] = fade[pos]
        rgb[pos, 2] = fade[pos]
        rgb[neg, 0] = fade[neg]
        rgb[neg, 1] = fade[neg]
        return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()

    def save(self, path: str | Path, scale: int = 1) -> None:
        Path(path).write_bytes(self.to_bytes(scale))


def read_pnm(path: str | Path) -> tuple[str, np.ndarray]:
    data = Path(path).read_bytes()
    magic, dims, maxv, rest = data.split(b"\n", 3)
    w, h = map(int, dims.split())
    if magic == b"P5":
        return "P5", np.frombuffer(rest, np.uint8).reshape(h, w)
    return "P6", np.frombuffer(rest, np.uint8).reshape(h, w, 3)


def tv_map(x: np.ndarray, patch: int = 4) -> np.ndarray:
    """TV of each non-overlapping ``patch x patch`` tile (channels summed), shape ``(N, H/p, W/p)``."""
    x = np.asarray(x, np.float64)
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} must divide {h}x{w}")
    tiles = x.reshape(n, c, h // patch, patch, w // patch, patch).transpose(0, 2, 4, 1, 3, 5)
    return total_variation(tiles.reshape(-1, c, patch, patch)).reshape(n, h // patch, w // patch)


def model_bitrate_maps(model: SplitModel, x: np.ndarray) -> np.ndarray:
    """Bit-rate maps of the quantized latent, ``(N, hz, wz)``."""
    model.set_trainable(False)
    codec = LatentCodec(model)
    z = model.head_forward(Tensor(np.asarray(x, np.float32))).data
    q = codec.quantize(z)
    return bitrate_map(model, q["latent"], q.get("sigma"))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def render_bitrate_map(values: np.ndarray) -> MapImage:
    return MapImage(values.shape[1], values.shape[0], np.asarray(values), "grayscale")


def render_tv_map(values: np.ndarray) -> MapImage:
    return MapImage(values.shape[1], values.shape[0], np.asarray(values), "grayscale")


def render_comparison_map(a: np.ndarray, b: np.ndarray) -> MapImage:
    """Signed map of ``a - b``: red positive, blue negative, white zero."""
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return MapImage(d.shape[1], d.shape[0], d, "signed-diverging")


def write_maps(
    model: SplitModel,
    x: np.ndarray,
    out_dir: str | Path,
    patch: int | None = None,
    scale: int = 8,
    compare: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[float]:
    """Write bit-rate / TV maps per image and a ``correlations.csv``; returns per-image Pearson r.

    ``compare=(x_a, x_b)`` additionally writes ``compare_i.ppm`` of
    bitrate(x_a) - bitrate(x_b) (e.g. PGD-E minus PGD-Acc).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patch = patch or model.config.latent_downsample
    bmaps = model_bitrate_maps(model, x)
    tmaps = tv_map(x, patch)
    corrs = []
    lines = ["index,pearson\n"]
    for i in range(len(x)):
        render_bitrate_map(bmaps[i]).save(out / f"bitrate_{i:04d}.pgm", scale)
        render_tv_map(tmaps[i]).save(out / f"tv_{i:04d}.pgm", scale)
        r = pearson(bmaps[i], tmaps[i])
        corrs.append(r)
        lines.append(f"{i},{r:.6f}\n")
    if compare is not None:
        ma = model_bitrate_maps(model, compare[0])
        mb = model_bitrate_maps(model, compare[1])
        for i in range(len(ma)):
            render_comparison_map(ma[i], mb[i]).save(out / f"compare_{i:04d}.ppm", scale)
    (out / "correlations.csv").write_text("".join(lines))
    return corrs
