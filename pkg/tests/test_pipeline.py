from __future__ import annotations

import json

import numpy as np
import pytest

from splitent import pipeline as pl
from splitent.data import write_synthetic_dataset
from splitent.defense import DenoiseSpec
from splitent.model import ModelConfig, SplitModel
from splitent.perturb import AttackSpec, CorruptionSpec
from splitent.train import Checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data = write_synthetic_dataset(root / "data", n_train=20, n_test=24, seed=1)
    ckpt = root / "m.entc"
    save_checkpoint(Checkpoint(SplitModel(seed=0)), ckpt)
    return root, data, ckpt


def test_link_latency_example():
    assert pl.LinkModel(1e6, 0.01).latency(10_000) == pytest.approx(0.02)


@pytest.mark.parametrize("prior", ["FP", "MSHP"])
def test_split_inference_is_lossless(prior):
    m = SplitModel(ModelConfig(prior_kind=prior), seed=1)
    x = np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)
    res = pl.run_split_inference(x, m)
    assert res.predictions.shape == (3,)
    assert np.array_equal(res.size_bytes, [len(s.to_bytes()) for s in res.streams])
    np.testing.assert_allclose(res.latency_s, res.size_bytes / 1e6 + 0.01)


def test_describe():
    assert pl.describe(None) == "clean"
    assert "uniform-noise" in pl.describe(pl.NoiseSpec(4 / 255))
    assert pl.perturbation_from_dict({"type": "corruption", "kind": "contrast", "severity": 2}) == CorruptionSpec("contrast", 2)
    with pytest.raises(ValueError):
        pl.perturbation_from_dict({"type": "bogus"})


def test_cell_key_stable_and_distinct():
    a = pl.Cell("m", AttackSpec("entropy", 4 / 255))
    assert a.key(10, 0) == pl.Cell("m", AttackSpec("entropy", 4 / 255)).key(10, 0)
    assert a.key(10, 0) != a.key(10, 1)
    assert a.key(10, 0) != pl.Cell("m", AttackSpec("entropy", 4 / 255), DenoiseSpec()).key(10, 0)


# --------------------------------------------------------------------------- maps


def test_comparison_of_identical_maps_is_white():
    a = np.random.default_rng(0).random((8, 8))
    raw = pl.render_comparison_map(a, a).to_bytes()
    assert raw.startswith(b"P6\n8 8\n255\n")
    assert set(raw[len(b"P6\n8 8\n255\n"):]) == {255}


def test_comparison_colours():
    img = pl.render_comparison_map(np.array([[1.0, -1.0]]), np.zeros((1, 2)))
    px = np.frombuffer(img.to_bytes()[len(b"P6\n2 1\n255\n"):], np.uint8).reshape(2, 3)
    assert px[0].tolist() == [255, 0, 0] and px[1].tolist() == [0, 0, 255]


def test_tv_map_constant_is_zero():
    x = np.full((2, 3, 32, 32), 0.4)
    assert np.all(pl.tv_map(x, 4) == 0)
    assert pl.tv_map(x, 4).shape == (2, 8, 8)


def test_tv_map_edge_tiles():
    x = np.zeros((1, 1, 8, 8))
    x[..., :, 5:] = 1.0  # vertical edge inside the right-hand tiles
    t = pl.tv_map(x, 4)
    assert np.all(t[:, :, 0] == 0) and np.all(t[:, :, 1] > 0)


def test_pgm_scale_and_read(tmp_path):
    img = pl.render_tv_map(np.array([[0.0, 2.0], [1.0, 2.0]]))
    img.save(tmp_path / "a.pgm", scale=3)
    magic, pix = pl.read_pnm(tmp_path / "a.pgm")
    assert magic == "P5" and pix.shape == (6, 6)
    assert pix[0, 0] == 0 and pix[0, 5] == 255 and pix[5, 0] == 128


def test_pearson():
    a = np.arange(10.0)
    assert pl.pearson(a, 2 * a + 1) == pytest.approx(1.0)
    assert pl.pearson(a, -a) == pytest.approx(-1.0)
    assert pl.pearson(a, np.ones(10)) == 0.0


def test_write_maps(tmp_path):
    m = SplitModel(seed=0)
    x = np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32)
    r = pl.write_maps(m, x, tmp_path, compare=(x, x))
    assert len(r) == 2
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["bitrate_0000.pgm", "bitrate_0001.pgm", "compare_0000.ppm", "compare_0001.ppm", "correlations.csv", "tv_0000.pgm", "tv_0001.pgm"]


# --------------------------------------------------------------------------- grid


def _grid_dict(data, ckpt, out, cells):
    return {"dataset": str(data), "checkpoints": {"m": str(ckpt)}, "cells": cells, "output": str(out), "sample_limit": 8, "batch_size": 4}


def test_one_cell_grid_one_row(tiny, tmp_path):
    _, data, ckpt = tiny
    out = tmp_path / "r.csv"
    rows = pl.experiment_grid(pl.GridConfig.from_dict(_grid_dict(data, ckpt, out, [{"checkpoint": "m"}])))
    assert len(rows) == 1 and not rows[0].error
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(pl.CSV_HEADER)
    assert len(lines) == 2 and lines[1].split(",")[1] == "clean"


def test_grid_rerun_identical_and_resumable(tiny, tmp_path):
    _, data, ckpt = tiny
    cells = [
        {"checkpoint": "m"},
        {"checkpoint": "m", "perturbation": {"type": "attack", "loss_kind": "entropy", "epsilon": 4 / 255, "steps": 2}},
        {"checkpoint": "m", "perturbation": {"type": "attack", "loss_kind": "entropy", "epsilon": 4 / 255, "steps": 2},
         "defense": {"steps": 3}},
        {"checkpoint": "m", "perturbation": {"type": "corruption", "kind": "shot_noise", "severity": 3}},
        {"checkpoint": "m", "perturbation": {"type": "noise", "epsilon": 8 / 255}},
    ]
    outs = []
    for name in ("a.csv", "b.csv"):
        cfg = pl.GridConfig.from_dict(_grid_dict(data, ckpt, tmp_path / name, cells))
        pl.experiment_grid(cfg)
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].decode().splitlines()) == 1 + len(cells)
    # a second pass over the same file adds nothing
    assert pl.experiment_grid(pl.GridConfig.from_dict(_grid_dict(data, ckpt, tmp_path / "a.csv", cells))) == []
    assert (tmp_path / "a.csv").read_bytes() == outs[0]


def test_grid_records_failures(tiny, tmp_path):
    _, data, ckpt = tiny
    d = _grid_dict(data, ckpt, tmp_path / "r.csv", [{"checkpoint": "m"}, {"checkpoint": "m"}])
    d["checkpoints"]["m"] = str(tmp_path / "missing.entc")
    cfg = pl.GridConfig.from_dict(d)
    cfg.cells[1] = pl.Cell("m", CorruptionSpec("contrast", 1))
    rows = pl.experiment_grid(cfg)
    assert len(rows) == 2 and all(r.error for r in rows)
    assert all(np.isnan(r.acc_pct) for r in rows)


def test_grid_config_relative_paths(tmp_path):
    d = {"dataset": "data", "checkpoints": {"m": "ck/m.entc"}, "cells": [{"checkpoint": "m"}]}
    cfg = pl.GridConfig.from_dict(json.loads(json.dumps(d)), base=tmp_path)
    assert cfg.dataset == str(tmp_path / "data")
    assert cfg.checkpoints["m"] == str(tmp_path / "ck/m.entc")
    assert cfg.output == str(tmp_path / "results.csv")
