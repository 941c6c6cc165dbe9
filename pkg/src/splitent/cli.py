"""Command line entry point: ``splitent <command> [--config file.json] [flags]``.

Every flag can also be given as a key of the JSON config (dashes become
underscores); explicit flags win over the file, the file wins over defaults.
Exit status: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("splitent")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# (flag, type, default, help); type ``bool`` means a store_true switch
_DATA = [
    ("dataset", str, None, "directory with CIFAR-format binary batches"),
    ("split", str, "test", "train or test"),
    ("sample_limit", int, None, "evaluate only the first N images"),
    ("batch_size", int, 250, "evaluation batch size"),
]
_CKPT = [("checkpoint", str, None, "checkpoint file (.entc)")]
_LINK = [
    ("bandwidth", float, 1e6, "link bandwidth, bytes/s"),
    ("rtt", float, 0.01, "link round-trip time, s"),
    ("output", str, "results.csv", "CSV file rows are appended to"),
]
_ATTACK = [
    ("loss_kind", str, "entropy", "entropy (PGD-E) or accuracy (PGD-Acc)"),
    ("epsilon", float, 8 / 255, "l-inf budget in [0,1] units"),
    ("alpha", float, None, "step size as a fraction of epsilon (default 2.5/steps)"),
    ("steps", int, 20, "PGD iterations"),
    ("grad_filter", str, "none", "none or lowfreq"),
    ("cutoff", int, None, "DCT cutoff u+v for lowfreq (default H/4)"),
    ("loss_mask", str, "none", "none or regional"),
    ("rounding", str, "ste", "ste or noise surrogate for the entropy loss"),
    ("random_start", bool, False, "start from a uniform point in the ball"),
]
_DEFENSE = [
    ("tv_lam", float, 0.02, "TV weight lambda"),
    ("tv_alpha", float, 0.05, "denoising step size"),
    ("tv_steps", int, 100, "denoising iterations"),
    ("mask_mode", str, "prior_soft_mask", "prior_soft_mask or none"),
    ("mask_reduce", str, "mean", "channel reduction of the likelihood map: mean or min"),
    ("interpolation", str, "bilinear", "mask upsampling: bilinear or nearest"),
    ("perturb", str, "attack", "what to defend against: attack, corruption or none"),
]
_CORRUPT = [
    ("kind", str, "gaussian_noise", "corruption kind"),
    ("severity", int, 1, "severity 1..5"),
]
_TRAIN = [
    ("out", str, "model.entc", "checkpoint output path"),
    ("prior", str, "FP", "FP or MSHP"),
    ("beta", float, 0.08, "rate weight"),
    ("lr", float, 1e-3, "learning rate"),
    ("epochs", int, 8, "training epochs"),
    ("train_batch_size", int, 64, "training batch size"),
    ("optimizer", str, "adam", "adam or sgd_momentum"),
    ("latent_channels", int, 48, "latent channels"),
]
_MAPS = [
    ("out_dir", str, "maps", "directory for PGM/PPM files"),
    ("patch", int, None, "TV patch size (default latent stride)"),
    ("scale", int, 8, "nearest-neighbour magnification of written maps"),
    ("compare_epsilon", float, None, "also write PGD-E minus PGD-Acc maps at this budget"),
]
_SYNTH = [
    ("out_dir", str, "data", "output directory"),
    ("n_train", int, 20000, "training images"),
    ("n_test", int, 2000, "test images"),
]

COMMANDS = {
    "train": (_TRAIN + [("dataset", str, None, "training data directory"), ("sample_limit", int, None, "use the first N training images")], "train a split model"),
    "eval": (_CKPT + _DATA + _LINK, "clean accuracy and coded size"),
    "attack": (_CKPT + _DATA + _LINK + _ATTACK, "PGD attack then evaluate"),
    "corrupt": (_CKPT + _DATA + _LINK + _CORRUPT, "corrupt inputs then evaluate"),
    "defend": (_CKPT + _DATA + _LINK + _ATTACK + _CORRUPT + _DEFENSE, "perturb, denoise, evaluate"),
    "maps": (_CKPT + _DATA + _MAPS, "bit-rate, TV and comparison maps"),
    "grid": ([("output", str, None, "override the CSV path of the grid config")], "run an experiment grid"),
    "codec-selftest": ([("trials", int, 200, "random round-trip trials")], "entropy coder property checks"),
    "make-synthetic": (_SYNTH, "write a synthetic CIFAR-format dataset"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitent", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (opts, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=str, default=None, help="JSON file of flag values")
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        seen = set()
        for dest, typ, _default, h in opts:
            if dest in seen:
                continue
            seen.add(dest)
            flag = "--" + dest.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=h)
            else:
                sp.add_argument(flag, dest=dest, type=typ, default=None, help=h)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < JSON config < explicit flags."""
    opts = {}
    for dest, _typ, default, _h in COMMANDS[args.command][0]:
        opts.setdefault(dest, default)
    opts["seed"] = 0
    if args.config and args.command != "grid":
        cfg = json.loads(Path(args.config).read_text())
        unknown = set(cfg) - set(opts)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        opts.update(cfg)
    for k, v in vars(args).items():
        if k in opts and v is not None:
            opts[k] = v
    return opts


def _require(o: dict, *keys: str) -> None:
    missing = [k for k in keys if not o.get(k)]
    if missing:
        raise ValueError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    for k in ("checkpoint", "dataset"):
        if k in keys and not Path(o[k]).exists():
            raise FileNotFoundError(f"{k} not found: {o[k]}")


def _attack_spec(o: dict):
    from .perturb import AttackSpec

    return AttackSpec(
        loss_kind=o["loss_kind"], epsilon=o["epsilon"], alpha=o["alpha"], steps=o["steps"],
        grad_filter=o["grad_filter"], cutoff=o["cutoff"], loss_mask=o["loss_mask"],
        random_start=bool(o["random_start"]), seed=o["seed"], rounding=o["rounding"],
    )


def _evaluate_and_record(o: dict, perturbation, defense) -> int:
    from . import pipeline as pl
    from .data import load_dataset
    from .train import load_checkpoint

    _require(o, "checkpoint", "dataset")
    ds = load_dataset(o["dataset"], o["split"]).subset(o["sample_limit"])
    model = load_checkpoint(o["checkpoint"]).model
    cell = pl.Cell(o["checkpoint"], perturbation, defense)
    row, metrics = pl.evaluate_cell(cell, model, ds, pl.LinkModel(o["bandwidth"], o["rtt"]), batch_size=o["batch_size"], seed=o["seed"])
    print(
        f"{row.perturbation} | {row.defense} | acc {metrics.accuracy:.2f}% | size {metrics.size_kb_mean:.4f} KB "
        f"(std {metrics.size_kb_std:.4f}, payload {metrics.payload_kb_mean:.4f}) | est bits {metrics.est_bits_mean:.1f} "
        f"| latency {row.latency_s_mean:.5f} s | n {metrics.n}"
    )
    pl.write_rows(o["output"], [row])
    return 0


def cmd_train(o: dict) -> int:
    from .data import load_dataset
    from .model import ModelConfig
    from .train import TrainConfig, evaluate, save_checkpoint, train

    _require(o, "dataset")
    ds = load_dataset(o["dataset"], "train").subset(o["sample_limit"])
    e = o["epochs"]
    tc = TrainConfig(
        beta=o["beta"], lr=o["lr"], epochs=e, batch_size=o["train_batch_size"], seed=o["seed"],
        optimizer=o["optimizer"], lr_decay_epochs=(max(1, int(e * 0.6)), max(1, int(e * 0.85))),
    )
    mc = ModelConfig(prior_kind=o["prior"], beta=o["beta"], latent_channels=o["latent_channels"])
    ckpt = train(mc, tc, ds, progress=print)
    try:
        test = load_dataset(o["dataset"], "test")
        test = test.subset(min(1000, len(test)))
        ckpt.metrics = evaluate(ckpt.model, test).row()
        print(json.dumps(ckpt.metrics))
    except FileNotFoundError:
        pass
    save_checkpoint(ckpt, o["out"])
    print(f"saved {o['out']}")
    return 0


def cmd_defend(o: dict) -> int:
    from .defense import DenoiseSpec
    from .perturb import CorruptionSpec

    if o["perturb"] == "attack":
        pert = _attack_spec(o)
    elif o["perturb"] == "corruption":
        pert = CorruptionSpec(o["kind"], o["severity"], o["seed"])
    elif o["perturb"] == "none":
        pert = None
    else:
        raise ValueError(f"--perturb must be attack, corruption or none, got {o['perturb']!r}")
    spec = DenoiseSpec(o["tv_lam"], o["tv_alpha"], o["tv_steps"], o["mask_mode"], o["mask_reduce"], o["interpolation"])
    return _evaluate_and_record(o, pert, spec)


def cmd_maps(o: dict) -> int:
    from . import pipeline as pl
    from .data import load_dataset
    from .perturb import AttackSpec, pgd
    from .train import load_checkpoint

    _require(o, "checkpoint", "dataset")
    ds = load_dataset(o["dataset"], o["split"]).subset(o["sample_limit"] or 16)
    model = load_checkpoint(o["checkpoint"]).model
    compare = None
    if o["compare_epsilon"]:
        eps = o["compare_epsilon"]
        xe = pgd(ds.images, ds.labels, model, AttackSpec("entropy", eps, seed=o["seed"])).x_adv
        xa = pgd(ds.images, ds.labels, model, AttackSpec("accuracy", eps, seed=o["seed"])).x_adv
        compare = (xe, xa)
    r = pl.write_maps(model, ds.images, o["out_dir"], o["patch"], o["scale"], compare)
    print(f"wrote {len(r)} map pairs to {o['out_dir']}; mean Pearson r = {np.mean(r):.4f}")
    return 0


def cmd_grid(args: argparse.Namespace, o: dict) -> int:
    from . import pipeline as pl

    if not args.config:
        raise ValueError("grid needs --config")
    path = Path(args.config)
    cfg = pl.GridConfig.from_dict(json.loads(path.read_text()), base=path.parent)
    if o.get("output"):
        cfg.output = o["output"]
    if args.seed is not None:
        cfg.seed = args.seed
    for name, ck in cfg.checkpoints.items():
        if not Path(ck).exists():
            raise FileNotFoundError(f"checkpoint {name!r} not found: {ck}")
    rows = pl.experiment_grid(cfg)
    failed = sum(bool(r.error) for r in rows)
    print(f"{len(rows)} new rows -> {cfg.output} ({failed} failed)")
    return 0


def codec_selftest(trials: int = 200, seed: int = 0) -> list[str]:
    """Round-trip and size checks of the entropy coder; returns failure messages."""
    from .coder import CdfTable, DecodeError, decode_symbols, encode_symbols

    rng = np.random.default_rng(seed)
    failures = []
    for t in range(trials):
        k = int(rng.integers(1, 5))
        m = int(rng.integers(2, 300))
        pmf = rng.dirichlet(np.full(m, float(rng.choice([0.05, 1.0, 20.0]))), size=k)
        table = CdfTable.from_pmf(pmf, offset=int(rng.integers(-150, 10)))
        n = int(rng.integers(0, 2000))
        ctx = rng.integers(0, k, n).astype(np.int32)
        p = pmf[ctx]
        sym = (p.cumsum(1) > rng.random((n, 1))).argmax(1) + table.offset
        payload = encode_symbols(sym, ctx, table)
        back = decode_symbols(payload, ctx, table)
        if not np.array_equal(back, sym):
            failures.append(f"trial {t}: round trip mismatch")
        bound = table.table_bits(sym, ctx) + 64
        if 8 * len(payload) > bound:
            failures.append(f"trial {t}: {8 * len(payload)} bits > bound {bound:.1f}")
    table = CdfTable.from_pmf(np.full((1, 8), 1 / 8))
    try:
        decode_symbols(b"\x00", np.zeros(100, np.int32), table)
        failures.append("truncated stream decoded without error")
    except DecodeError:
        pass
    return failures


def run(argv: list[str] | None = None) -> int:
    from .coder import DecodeError
    from .train import TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"splitent: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        o = resolve(args)
        if args.command == "train":
            return cmd_train(o)
        if args.command == "eval":
            return _evaluate_and_record(o, None, None)
        if args.command == "attack":
            return _evaluate_and_record(o, _attack_spec(o), None)
        if args.command == "corrupt":
            from .perturb import CorruptionSpec

            return _evaluate_and_record(o, CorruptionSpec(o["kind"], o["severity"], o["seed"]), None)
        if args.command == "defend":
            return cmd_defend(o)
        if args.command == "maps":
            return cmd_maps(o)
        if args.command == "grid":
            return cmd_grid(args, o)
        if args.command == "make-synthetic":
            from .data import write_synthetic_dataset

            root = write_synthetic_dataset(o["out_dir"], o["n_train"], o["n_test"], o["seed"])
            print(f"wrote synthetic dataset to {root}")
            return 0
        failures = codec_selftest(o["trials"], o["seed"])
        for f in failures:
            print("FAIL", f)
        print(f"codec-selftest: {o['trials']} trials, {len(failures)} failures")
        return 0 if not failures else 2
    except (DecodeError, TrainingError) as exc:
        print(f"splitent: runtime error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, TypeError) as exc:
        print(f"splitent: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"splitent: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
