from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitent.defense import (
    DenoiseSpec,
    defend,
    masked_tv_denoise,
    prior_soft_mask,
    total_variation,
    tv_denoise,
    tv_subgradient,
    upsample,
)
from splitent.model import SplitModel
from splitent.perturb import AttackSpec, pgd


def naive_tv(img: np.ndarray) -> float:
    c, h, w = img.shape
    tot = 0.0
    for k in range(c):
        for i in range(h):
            for j in range(w):
                if i + 1 < h:
                    tot += abs(img[k, i + 1, j] - img[k, i, j])
                if j + 1 < w:
                    tot += abs(img[k, i, j + 1] - img[k, i, j])
    return tot


def test_tv_examples():
    assert total_variation(np.full((3, 5, 5), 0.4)) == 0.0
    assert total_variation(np.array([[0.0, 1.0], [0.0, 1.0]])) == 2.0


def test_tv_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.random((3, 16, 16))
        assert abs(total_variation(x) - naive_tv(x)) < 1e-5
    batch = rng.random((4, 3, 8, 8))
    np.testing.assert_allclose(total_variation(batch), [naive_tv(b) for b in batch], atol=1e-9)


def test_subgradient_examples():
    assert np.all(tv_subgradient(np.full((2, 4, 4), 0.3)) == 0)
    g = tv_subgradient(np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert np.array_equal(g, [[-1.0, 1.0], [-1.0, 1.0]])


def test_subgradient_matches_fd_away_from_kinks():
    rng = np.random.default_rng(1)
    # distinct values on a coarse lattice keep every difference well away from 0
    x = rng.permutation(64).reshape(1, 8, 8).astype(np.float64) * 0.01
    g = tv_subgradient(x)
    eps = 1e-5
    for idx in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += eps
        m[idx] -= eps
        num = (total_variation(p) - total_variation(m)) / (2 * eps)
        assert abs(num - g[idx]) <= 1e-3 * max(1.0, abs(num))


def test_denoise_identities():
    x = np.random.default_rng(2).random((2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(tv_denoise(x, DenoiseSpec(lam=0.0, steps=30)).x, x)
    assert np.array_equal(tv_denoise(x, DenoiseSpec(steps=0)).x, x)


def _noisy_ramp(seed=3):
    rng = np.random.default_rng(seed)
    clean = np.repeat(np.linspace(0.2, 0.8, 16)[None, None, None, :], 16, axis=2)
    clean = np.broadcast_to(clean, (2, 3, 16, 16))
    return np.clip(clean + rng.normal(0, 0.1, clean.shape), 0, 1).astype(np.float32)


@pytest.mark.xfail(strict=True, reason="fixed-step sub-gradient descent oscillates around TV kinks once near the optimum")
def test_denoise_trace_95pct_nonincreasing_at_alpha_005():
    trace = tv_denoise(_noisy_ramp(), DenoiseSpec(lam=0.1, alpha=0.05, steps=100), with_trace=True).trace
    assert (np.diff(trace) <= 1e-9).mean() >= 0.95


def test_denoise_trace_descends_then_settles():
    trace = np.array(tv_denoise(_noisy_ramp(), DenoiseSpec(lam=0.1, alpha=0.05, steps=100), with_trace=True).trace)
    first_rise = int(np.argmax(np.diff(trace) > 1e-9))
    assert first_rise >= 10 and np.all(np.diff(trace[: first_rise + 1]) < 0)
    # after that, the iterate chatters within a thin band above the best value
    assert trace[-1] < 0.5 * trace[0]
    assert trace[first_rise:].max() - trace.min() < 0.05 * (trace[0] - trace.min())


def test_denoise_trace_monotone_with_small_step():
    trace = tv_denoise(_noisy_ramp(), DenoiseSpec(lam=0.1, alpha=0.01, steps=100), with_trace=True).trace
    assert (np.diff(trace) <= 1e-6).mean() >= 0.95


def test_masked_denoise_limits():
    x = np.random.default_rng(4).random((1, 3, 8, 8)).astype(np.float32)
    spec = DenoiseSpec(lam=0.2, alpha=0.1, steps=20)
    assert np.array_equal(masked_tv_denoise(x, np.zeros_like(x), spec).x, x)
    assert np.array_equal(masked_tv_denoise(x, np.ones_like(x), spec).x, tv_denoise(x, spec).x)
    mask = np.ones_like(x)
    mask[..., :4, :] = 0
    out = masked_tv_denoise(x, mask, spec).x
    assert np.array_equal(out[..., :4, :], x[..., :4, :])
    with pytest.raises(ValueError):
        masked_tv_denoise(x, np.ones((1, 3, 4, 4)), spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        DenoiseSpec(lam=-1)
    with pytest.raises(ValueError):
        DenoiseSpec(mask_mode="edges")


@given(arrays(np.float32, (2, 8, 8), elements=st.floats(0, 1, width=32)))
@settings(max_examples=40, deadline=None)
def test_bilinear_upsample_bounded_by_neighbours(maps):
    up = upsample(maps, (32, 32), "bilinear")
    assert up.min() >= maps.min() - 1e-6 and up.max() <= maps.max() + 1e-6
    max_cell_jump = max(np.abs(np.diff(maps, axis=1)).max(), np.abs(np.diff(maps, axis=2)).max())
    assert np.abs(np.diff(up, axis=1)).max() <= max_cell_jump + 1e-6
    assert np.abs(np.diff(up, axis=2)).max() <= max_cell_jump + 1e-6


def test_nearest_upsample_blocks():
    maps = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
    up = upsample(maps, (4, 4), "nearest")
    assert np.array_equal(up[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_mask_range_and_concentrated_limit():
    m = SplitModel(seed=0)
    x = np.random.default_rng(5).random((2, 3, 32, 32)).astype(np.float32)
    mask = prior_soft_mask(m, x)
    assert mask.shape == x.shape and mask.min() >= 0 and mask.max() <= 1
    m.params["head.2.w"].data[:] = 0.0
    m.params["head.2.b"].data[:] = 0.0
    m.params["prior.raw_scale"].data[:] = -30.0
    assert np.allclose(prior_soft_mask(m, x), 1.0)


def test_defend_reduces_attacked_tv_and_is_deterministic(trained_fp):
    model, ds = trained_fp
    x, y = ds.images[:16], ds.labels[:16]
    adv = pgd(x, y, model, AttackSpec("entropy", 4 / 255, steps=10)).x_adv
    spec = DenoiseSpec()
    a = defend(model, adv, spec)
    assert np.array_equal(a, defend(model, adv, spec))
    assert total_variation(a).sum() < total_variation(adv).sum()
