"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest

from splatprune.gradcheck import run_gradcheck
from splatprune.metrics import PSNR_CAP, bench_fps, evaluate_views, psnr, ssim
from splatprune.pipeline import PruneConfig, RoundConfig, prune_once, refine, run_pipeline
from splatprune.plyio import load_ply, save_ply
from splatprune.raster import render_view
from splatprune.scene import GaussianCloud
from splatprune.sensitivity import (
    FisherBlock,
    accumulate_fisher,
    score_baseline,
    score_log_det,
    sensitivity_scores,
)
from splatprune.synthetic import generate_toy_scene

from conftest import camera, random_cloud
from oracles import render_scalar, ssim_loop

PARAM_FIELDS = ("positions", "log_scales", "rotations", "base_colors", "sh_rest", "raw_opacities")


def spearman(a, b):
    ra = np.argsort(np.argsort(a, kind="stable"), kind="stable").astype(float)
    rb = np.argsort(np.argsort(b, kind="stable"), kind="stable").astype(float)
    return float(np.corrcoef(ra, rb)[0, 1])


def test_c01_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    result = run_gradcheck(scenes=20, seed=0, max_gaussians=10, resolution=8, rtol=1e-3, atol=1e-6)
    elapsed = time.perf_counter() - t0
    ok = result.passed and result.scenes >= 20 and elapsed < 60.0
    acceptance(1, "gradient correctness", ok,
               f"{result.scenes} scenes, {result.checks} entries, max rel {result.max_rel_error:.1e}, "
               f"{len(result.failures)} failures, {elapsed:.1f}s")
    assert ok, result.failures[:5]


def test_c02_fisher_properties(acceptance):
    rng = np.random.default_rng(2)
    worst_sym, worst_psd, additive = 0.0, 0.0, True
    for trial in range(3):
        cloud = random_cloud(rng, 20, degree=trial % 2)
        views = [camera(24, eye=(3 * math.cos(t), 3 * math.sin(t), 0.4)) for t in (0.3 + trial, 2.0 + trial)]
        for variant in ("mean_scale", "mean_scale_rot", "rgb"):
            acc = accumulate_fisher(cloud, views, variant, divisor=1)
            for m in acc.matrices:
                worst_sym = max(worst_sym, np.abs(m - m.T).max() / max(1.0, np.abs(m).max()))
                lam = np.linalg.eigvalsh(0.5 * (m + m.T))
                worst_psd = max(worst_psd, -lam.min() / max(1.0, lam.max()))
            a = accumulate_fisher(cloud, views[:1], variant, 1)
            b = accumulate_fisher(cloud, views[1:], variant, 1)
            additive &= np.array_equal(acc.matrices, a.matrices + b.matrices)
    ok = worst_sym <= 1e-9 and worst_psd <= 1e-8 and additive
    acceptance(2, "Fisher properties", ok,
               f"asym {worst_sym:.1e}, neg-eig {worst_psd:.1e}, two-view sum exact={additive}")
    assert ok


def test_c03_log_det_contract(acceptance):
    rank1 = np.zeros((6, 6))
    rank1[0, 0] = 1.0
    s = score_log_det([FisherBlock(m, 1, i) for i, m in enumerate([np.eye(6), math.e * np.eye(6), rank1])]).scores
    units = (s[0] == 0.0 and abs(s[1] - 6.0) <= 1e-12 and abs(s[2] - 5 * math.log(1e-12)) <= 1e-6
             and abs(s[2] - (-138.155)) < 1e-3)
    worst = 0.0
    for seed in range(10):
        scene = generate_toy_scene(signal_count=10, clutter_count=10, views=4, resolution=16, seed=seed)
        prev = None
        for k in range(1, len(scene.views) + 1):
            cur = sensitivity_scores(scene.cloud, scene.views[:k], divisor=1).scores
            if prev is not None:
                worst = max(worst, float(np.max(prev - cur)))
            prev = cur
    ok = units and worst <= 1e-9
    acceptance(3, "log-det score contract", ok,
               f"I->{s[0]}, eI->{s[1]:.12f}, rank-1->{s[2]:.6f}; max decrease on adding a view {worst:.1e}")
    assert ok


def test_c04_patchwise_fidelity(acceptance):
    t0 = time.perf_counter()
    scene = generate_toy_scene(signal_count=25, clutter_count=25, views=20, resolution=64, seed=0)
    coarse = sensitivity_scores(scene.cloud, scene.views, divisor=4).scores
    full = sensitivity_scores(scene.cloud, scene.views, divisor=1).scores
    rho = spearman(coarse, full)
    elapsed = time.perf_counter() - t0
    ok = rho >= 0.8 and elapsed < 120.0
    acceptance(4, "patch-wise fidelity", ok, f"spearman {rho:.4f}, {elapsed:.1f}s")
    assert ok


def test_c05_pruning_efficacy(acceptance):
    drops, gaps = [], []
    for seed in range(5):
        scene = generate_toy_scene(signal_count=64, clutter_count=64, views=20, resolution=64, seed=seed)
        base = evaluate_views(scene.cloud, scene.views).psnr_db
        ours = evaluate_views(prune_once(scene.cloud, sensitivity_scores(scene.cloud, scene.views), 0.5)[0],
                              scene.views).psnr_db
        rand = evaluate_views(prune_once(scene.cloud, score_baseline(scene.cloud, scene.views, "random", seed),
                                         0.5)[0], scene.views).psnr_db
        drops.append(base - ours)
        gaps.append(ours - rand)
    ok = max(drops) <= 0.5 and float(np.mean(gaps)) >= 1.0
    acceptance(5, "pruning efficacy", ok,
               f"drops {np.round(drops, 3).tolist()} dB (max {max(drops):.3f}), "
               f"mean gain over random {np.mean(gaps):.2f} dB")
    assert ok


def test_c06_multi_round_direction(acceptance):
    k = 500
    margins = []
    for seed in range(3):
        scene = generate_toy_scene(seed=seed)
        two, _ = run_pipeline(scene.cloud, scene.views, PruneConfig([RoundConfig(0.5, k), RoundConfig(0.5, k)]),
                              scene.scene_extent, evaluate=False, deterministic=True)
        one, _ = run_pipeline(scene.cloud, scene.views, PruneConfig([RoundConfig(0.75, 2 * k)]),
                              scene.scene_extent, evaluate=False, deterministic=True)
        assert len(two) == len(one)
        margins.append(evaluate_views(two, scene.views).psnr_db - evaluate_views(one, scene.views).psnr_db)
    ok = min(margins) >= 0.0
    acceptance(6, "multi-round direction", ok,
               f"margins (50%,50%)x{k} minus 75%x{2 * k}: {np.round(margins, 3).tolist()} dB")
    assert ok


def test_c07_refine_recovery(acceptance):
    scene = generate_toy_scene(seed=0)
    pruned, _ = prune_once(scene.cloud, sensitivity_scores(scene.cloud, scene.views), 0.3)
    before = evaluate_views(pruned, scene.views).psnr_db
    after = evaluate_views(refine(pruned, scene.views, 500, scene_extent=scene.scene_extent), scene.views).psnr_db
    ok = after > before
    acceptance(7, "refine recovery", ok, f"post-prune {before:.3f} dB -> after 500 iters {after:.3f} dB")
    assert ok


def test_c08_throughput_direction(acceptance):
    scene = generate_toy_scene(seed=0)
    views = [v.without_image() for v in scene.views]
    small, _ = prune_once(scene.cloud, sensitivity_scores(scene.cloud, scene.views), 0.9)
    full_fps = bench_fps(scene.cloud, views, frames=100, warmup=10)
    small_fps = bench_fps(small, views, frames=100, warmup=10)
    ratio = small_fps / full_fps
    ok = ratio >= 2.0
    acceptance(8, "throughput direction", ok,
               f"{len(small)}/{len(scene.cloud)} Gaussians: {small_fps:.0f} vs {full_fps:.0f} fps ({ratio:.2f}x)")
    assert ok


def test_c09_rendering_oracle(acceptance):
    rng = np.random.default_rng(9)
    worst = 0.0
    for trial in range(20):
        cloud = random_cloud(rng, int(rng.integers(1, 6)), degree=trial % 2)
        cam = camera(16, eye=tuple(rng.normal(size=3) * 0.5 + np.array([0.0, -3.0, 0.3])))
        got = render_view(cloud, cam).rgb
        want = np.array(render_scalar(cloud, cam))
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-6
    acceptance(9, "rendering oracle", ok, f"20 scenes, N<=5, max |diff| {worst:.1e}")
    assert ok


def test_c10_io_exactness(acceptance, tmp_path):
    rng = np.random.default_rng(10)
    identical = 0
    for k in range(100):
        cloud = random_cloud(rng, int(rng.integers(0, 30)), degree=k % 4)
        for field in PARAM_FIELDS:
            setattr(cloud, field, getattr(cloud, field).astype(np.float32).astype(np.float64))
        save_ply(cloud, tmp_path / "c.ply")
        identical += load_ply(tmp_path / "c.ply").equals(cloud)
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[0, 0, 0] = 1.0
    closed = (psnr(a, a) == PSNR_CAP and psnr(a, np.ones_like(a)) == 0.0
              and psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0, abs=1e-12)
              and psnr(a, b) == pytest.approx(10 * math.log10(192), abs=1e-12))
    worst = 0.0
    for _ in range(5):
        x = rng.uniform(size=(20, 18, 3))
        y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
        worst = max(worst, abs(ssim(x, y) - ssim_loop(x, y)))
    ok = identical == 100 and closed and worst <= 1e-4
    acceptance(10, "I/O exactness", ok,
               f"{identical}/100 PLY round trips identical, PSNR closed forms {closed}, SSIM diff {worst:.1e}")
    assert ok


def test_c11_zero_impact_pruning(acceptance):
    scene = generate_toy_scene(seed=0)
    # add Gaussians no training view can see: far outside the ring and behind every camera
    extra = random_cloud(np.random.default_rng(11), 6)
    extra.positions[:] = [[40.0, 0, 0], [0, 40.0, 0], [0, 0, 40.0], [-40.0, 0, 0], [0, -40.0, 0], [0, 0, -40.0]]
    cloud = GaussianCloud.from_arrays(*(np.concatenate([getattr(scene.cloud, f), getattr(extra, f)])
                                        for f in PARAM_FIELDS))
    hits = sensitivity_scores(cloud, scene.views, divisor=1).hit_counts
    keep = np.flatnonzero(hits > 0)
    pruned = cloud.subset(keep)
    same = all(np.array_equal(render_view(cloud, v).rgb, render_view(pruned, v).rgb) for v in scene.views)
    removed = len(cloud) - len(keep)
    ok = same and removed >= len(extra)
    acceptance(11, "zero-impact pruning", ok, f"removed {removed} unhit Gaussians, renders identical={same}")
    assert ok
