import os
import subprocess
import sys

import numpy as np
import pytest

from splatprune import _kernels
from splatprune.gradients import loss_and_gradients, render_with_param_jacobians
from splatprune.raster import render_view
from splatprune.sensitivity import accumulate_fisher

from conftest import camera, random_cloud

needs_cython = pytest.mark.skipif("cython" not in _kernels.available_backends(),
                                  reason="compiled kernels not built")


def test_python_backend_always_available():
    assert "python" in _kernels.available_backends()
    assert _kernels.get_backend("python").__name__.endswith("_pykernels")
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")


@pytest.mark.parametrize("value,expected", [("python", "python"), ("", None)])
def test_env_var_selects_backend(value, expected):
    env = dict(os.environ, SPLATPRUNE_BACKEND=value)
    out = subprocess.run([sys.executable, "-c", "from splatprune import _kernels; print(_kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True).stdout.strip()
    assert out == (expected or _kernels.available_backends()[0])


@needs_cython
@pytest.mark.parametrize("seed", range(3))
def test_backends_agree(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 15, degree=seed % 2)
    cam = camera(20)
    gt = np.clip(render_view(cloud, cam).rgb + rng.normal(0, 0.05, (20, 20, 3)), 0, 1)
    cam = camera(20, gt=gt)
    fast, slow = "cython", "python"

    a, b = render_view(cloud, cam, backend=fast), render_view(cloud, cam, backend=slow)
    np.testing.assert_allclose(a.rgb, b.rgb, rtol=0, atol=1e-12)
    assert np.array_equal(a.hits, b.hits)

    la, ga = loss_and_gradients(cloud, cam, 0.2, backend=fast)
    lb, gb = loss_and_gradients(cloud, cam, 0.2, backend=slow)
    assert la == pytest.approx(lb, abs=1e-12)
    for field in ("positions", "log_scales", "rotations", "base_colors", "sh_rest", "raw_opacities"):
        np.testing.assert_allclose(getattr(ga, field), getattr(gb, field), rtol=1e-9, atol=1e-12)

    _, sa = render_with_param_jacobians(cloud, cam, 2, "mean_scale_rot", backend=fast)
    _, sb = render_with_param_jacobians(cloud, cam, 2, "mean_scale_rot", backend=slow)
    assert np.array_equal(sa.gaussian_index, sb.gaussian_index)
    np.testing.assert_allclose(sa.jacobians, sb.jacobians, rtol=1e-9, atol=1e-12)

    fa = accumulate_fisher(cloud, [cam], "rgb", 1, backend=fast)
    fb = accumulate_fisher(cloud, [cam], "rgb", 1, backend=slow)
    np.testing.assert_allclose(fa.matrices, fb.matrices, rtol=1e-9, atol=1e-12)
    assert np.array_equal(fa.hit_counts, fb.hit_counts)
