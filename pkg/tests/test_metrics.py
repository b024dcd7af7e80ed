import math

import numpy as np
import pytest

from splatprune.errors import ShapeError
from splatprune.metrics import (
    PSNR_CAP,
    bench_fps,
    evaluate_views,
    gaussian_window,
    log_volumes,
    psnr,
    residual_map,
    ssim,
    ssim_and_grad,
    volume_histogram,
)

from conftest import random_cloud
from oracles import ssim_loop


def test_psnr_closed_forms():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, np.ones_like(a)) == 0.0
    b = a.copy()
    b[0, 0, 0] = 1.0  # mse = 1/48
    assert psnr(a, b) == pytest.approx(10 * math.log10(48), abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(a, np.zeros((4, 3, 3)))


def test_gaussian_window_normalized():
    g = gaussian_window()
    assert g.shape == (11,) and g.sum() == pytest.approx(1.0)
    assert g[5] == g.max() and np.allclose(g, g[::-1])


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 14, 3))
    b = np.clip(a + rng.normal(0, 0.1 * (seed + 1), a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-10)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(12, 12, 3))
    b = rng.uniform(size=(12, 12, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
    assert ssim(a, b) < 0.5


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(13, 12, 3))
    b = rng.uniform(size=(13, 12, 3))
    value, grad = ssim_and_grad(a, b)
    assert value == ssim(a, b)
    h = 1e-6
    for idx in [(0, 0, 0), (6, 5, 1), (12, 11, 2), (3, 9, 0)]:
        p, m = a.copy(), a.copy()
        p[idx] += h
        m[idx] -= h
        assert grad[idx] == pytest.approx((ssim(p, b) - ssim(m, b)) / (2 * h), abs=1e-8)


def test_residual_map():
    a = np.zeros((2, 3, 3))
    b = a.copy()
    b[1, 2] = [0.3, 0.6, 0.0]
    r = residual_map(a, b)
    assert r.shape == (2, 3) and r[1, 2] == pytest.approx(0.3) and r.sum() == pytest.approx(0.3)


def test_volume_histogram_counts_all():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 50)
    counts, edges = volume_histogram(cloud, 8)
    assert counts.sum() == 50 and edges.size == 9
    np.testing.assert_allclose(log_volumes(cloud), 2 * cloud.log_scales.sum(1))
    same = random_cloud(rng, 3)
    same.log_scales[:] = 0.0
    counts, _ = volume_histogram(same, 4)
    assert counts.sum() == 3
    with pytest.raises(ValueError):
        volume_histogram(cloud, 0)


def test_evaluate_views_perfect_scene(small_scene):
    signal = small_scene.cloud.subset(np.arange(12))  # ground truth comes from these
    rec = evaluate_views(signal, small_scene.views)
    assert rec.psnr_db == PSNR_CAP and rec.ssim == pytest.approx(1.0)
    assert rec.gaussian_count == 12 and len(rec.per_view_psnr) == len(small_scene.views)
    assert set(rec.to_dict()) >= {"psnr_db", "ssim", "fps", "gaussian_count", "size_mb"}


def test_bench_fps_positive_and_warmup_insensitive(small_scene):
    cloud, views = small_scene.cloud, small_scene.views
    f0 = bench_fps(cloud, views, frames=40, warmup=0)
    f5 = bench_fps(cloud, views, frames=40, warmup=5)
    assert f0 > 0 and f5 > 0
    with pytest.raises(ValueError):
        bench_fps(cloud, views, frames=0)
