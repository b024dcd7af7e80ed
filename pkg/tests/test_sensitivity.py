import math

import numpy as np
import pytest

from splatprune.errors import ScoringError
from splatprune.gradients import render_with_param_jacobians
from splatprune.sensitivity import (
    FisherAccumulation,
    FisherBlock,
    SensitivityScores,
    accumulate_fisher,
    load_scores,
    removal_order,
    save_scores,
    score_baseline,
    score_log_det,
    sensitivity_scores,
    visibility_hits,
)

from conftest import camera, random_cloud, ring


def blocks(*mats):
    return [FisherBlock(np.asarray(m, dtype=float), 1, i) for i, m in enumerate(mats)]


def test_log_det_unit_examples():
    s = score_log_det(blocks(np.eye(6), math.e * np.eye(6))).scores
    assert s[0] == 0.0
    assert s[1] == pytest.approx(6.0, abs=1e-12)
    v = np.arange(1.0, 7.0)
    rank1 = np.outer(v, v)
    # one eigenvalue |v|^2 = 91, five clamped at 1e-12
    got = score_log_det(blocks(rank1)).scores[0]
    assert got == pytest.approx(math.log(91.0) + 5 * math.log(1e-12), abs=1e-6)
    assert got == pytest.approx(-133.6440, abs=1e-3)


def test_log_det_zero_block_and_unhit():
    s = score_log_det([FisherBlock(np.zeros((6, 6)), 0, 0)]).scores
    assert s[0] == 6 * math.log(1e-12)
    # rank-one block with a single unit eigenvalue: the "rank-1 clamp" example
    e = np.zeros((6, 6))
    e[0, 0] = 1.0
    assert score_log_det(blocks(e)).scores[0] == pytest.approx(5 * math.log(1e-12), abs=1e-6)
    assert score_log_det(blocks(e)).scores[0] == pytest.approx(-138.155, abs=1e-3)


def test_log_det_errors():
    bad = np.eye(6)
    bad[2, 3] = np.nan
    with pytest.raises(ScoringError, match="Gaussian 1"):
        score_log_det(blocks(np.eye(6), bad))
    with pytest.raises(ValueError):
        score_log_det(blocks(np.eye(6)), epsilon=0.0)


def test_log_det_is_monotone_in_psd_order():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(6, 4))
        b = rng.normal(size=(6, 2))
        f = a @ a.T
        s0, s1 = score_log_det(blocks(f, f + b @ b.T)).scores
        assert s1 >= s0 - 1e-9


@pytest.fixture(scope="module")
def fisher_scene():
    rng = np.random.default_rng(5)
    return random_cloud(rng, 20, degree=1), ring(4, resolution=16)


@pytest.mark.parametrize("variant", ["mean_scale", "mean_scale_rot", "rgb"])
def test_fisher_symmetric_psd(fisher_scene, variant, backend):
    cloud, views = fisher_scene
    acc = accumulate_fisher(cloud, views, variant, divisor=1, backend=backend)
    d = {"mean_scale": 6, "mean_scale_rot": 10, "rgb": 3}[variant]
    assert acc.matrices.shape == (20, d, d)
    for block in acc:
        m = block.matrix
        scale = max(1.0, np.abs(m).max())
        assert np.abs(m - m.T).max() <= 1e-9 * scale
        lam = np.linalg.eigvalsh(m)
        assert lam.min() >= -1e-8 * max(1.0, lam.max())


def test_fisher_equals_sum_of_pixel_outer_products(fisher_scene):
    cloud, views = fisher_scene
    acc = accumulate_fisher(cloud, views[:1], "mean_scale", divisor=2)
    _, stream = render_with_param_jacobians(cloud, views[0], 2, "mean_scale")
    want = np.zeros_like(acc.matrices)
    for pj in stream:
        want[pj.gaussian_index] += pj.d_rgb_d_params.T @ pj.d_rgb_d_params
    np.testing.assert_allclose(acc.matrices, want, rtol=1e-12, atol=1e-14)


def test_fisher_additive_over_views(fisher_scene):
    cloud, views = fisher_scene
    both = accumulate_fisher(cloud, views[:2], "mean_scale", 1)
    one = accumulate_fisher(cloud, views[:1], "mean_scale", 1)
    two = accumulate_fisher(cloud, views[1:2], "mean_scale", 1)
    assert np.array_equal(both.matrices, (one + two).matrices)
    assert np.array_equal(both.hit_counts, one.hit_counts + two.hit_counts)


def test_threaded_accumulation_is_bit_identical(fisher_scene):
    cloud, views = fisher_scene
    a = accumulate_fisher(cloud, views, "mean_scale", 2, workers=1)
    b = accumulate_fisher(cloud, views, "mean_scale", 2, workers=3)
    assert np.array_equal(a.matrices, b.matrices)


def test_backends_agree_on_fisher(fisher_scene):
    from splatprune import _kernels

    cloud, views = fisher_scene
    mats = [accumulate_fisher(cloud, views, "mean_scale_rot", 2, backend=b).matrices
            for b in _kernels.available_backends()]
    for m in mats[1:]:
        np.testing.assert_allclose(m, mats[0], rtol=1e-10, atol=1e-12)


def test_unhit_gaussian_has_zero_block_and_floor_score(fisher_scene):
    cloud, views = fisher_scene
    far = cloud.copy()
    far.positions[0] = [100.0, 100.0, 100.0]
    acc = accumulate_fisher(far, views, "mean_scale", 1)
    assert acc.hit_counts[0] == 0 and not acc.matrices[0].any()
    scores = score_log_det(acc)
    assert scores.scores[0] == 6 * math.log(1e-12)
    assert np.all(scores.scores[acc.hit_counts > 0] > scores.scores[0])


def test_adding_a_view_never_decreases_scores(fisher_scene):
    cloud, views = fisher_scene
    prev = sensitivity_scores(cloud, views[:1], divisor=2).scores
    for k in range(2, len(views) + 1):
        cur = sensitivity_scores(cloud, views[:k], divisor=2).scores
        assert np.all(cur >= prev - 1e-9)
        prev = cur


def test_baselines(fisher_scene):
    cloud, views = fisher_scene
    r1 = score_baseline(cloud, views, "random", seed=3).scores
    r2 = score_baseline(cloud, views, "random", seed=3).scores
    assert np.array_equal(r1, r2) and r1.shape == (20,)
    np.testing.assert_array_equal(score_baseline(cloud, views, "opacity").scores, cloud.opacities)
    vv = score_baseline(cloud, views, "vis_volume")
    hits = visibility_hits(cloud, views)
    np.testing.assert_allclose(vv.scores, hits * cloud.opacities * np.exp(0.1 * cloud.log_scales.sum(1)))
    with pytest.raises(ValueError):
        score_baseline(cloud, views, "magic")


def test_removal_order_ties():
    scores = SensitivityScores(np.array([1.0, 0.5, 0.5, 0.5, 2.0]), "x", hit_counts=np.array([1, 1, 1, 1, 0]))
    opac = np.array([0.5, 0.7, 0.3, 0.7, 0.9])
    # never-hit first, then score; ties by opacity then index
    assert removal_order(scores, opac).tolist() == [4, 2, 1, 3, 0]


def test_scores_csv_round_trip(tmp_path, fisher_scene):
    cloud, views = fisher_scene
    s = sensitivity_scores(cloud, views[:2], divisor=4)
    save_scores(tmp_path / "s.csv", s)
    back = load_scores(tmp_path / "s.csv")
    assert np.array_equal(back.scores, s.scores)
    assert np.array_equal(back.hit_counts, s.hit_counts)


def test_divisor_validation(fisher_scene):
    cloud, views = fisher_scene
    with pytest.raises(ValueError):
        accumulate_fisher(cloud, views, divisor=3)
    with pytest.raises(ValueError):
        accumulate_fisher(cloud, views, variant="opacity")


def test_empty_cloud_scores():
    acc = accumulate_fisher(random_cloud(np.random.default_rng(0), 0), [camera(8)])
    assert isinstance(acc, FisherAccumulation) and len(acc) == 0
    assert score_log_det(acc).scores.shape == (0,)
