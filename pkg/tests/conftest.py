import numpy as np
import pytest

from splatprune import _kernels
from splatprune.scene import SH_C0, CameraView, GaussianCloud, logit, look_at, sh_rest_count
from splatprune.synthetic import generate_toy_scene, random_quaternions

BACKENDS = _kernels.available_backends()


def random_cloud(rng, n, degree=0, spread=0.6, scale=(0.1, 0.4), opacity=(0.2, 0.9)):
    colors = rng.uniform(0.15, 0.85, size=(n, 3))
    return GaussianCloud.from_arrays(
        rng.uniform(-spread, spread, size=(n, 3)),
        np.log(rng.uniform(*scale, size=(n, 3))),
        random_quaternions(rng, n),
        (colors - 0.5) / SH_C0,
        rng.normal(0.0, 0.05, size=(n, sh_rest_count(degree), 3)),
        logit(rng.uniform(*opacity, size=n)),
    )


def camera(resolution=16, eye=(0.0, -3.0, 0.4), gt=None):
    focal = resolution / (2.0 * np.tan(np.radians(25.0)))
    return CameraView(look_at(eye, (0.0, 0.0, 0.0)), (focal, focal), (resolution / 2.0, resolution / 2.0),
                      resolution, resolution, gt_image=gt)


def ring(count, resolution=16, radius=3.0):
    out = []
    for k in range(count):
        t = 2 * np.pi * k / count
        out.append(camera(resolution, (radius * np.cos(t), radius * np.sin(t), 0.5 * (-1) ** k)))
    return out


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def small_scene():
    return generate_toy_scene(signal_count=12, clutter_count=12, views=6, resolution=24, seed=3)


@pytest.fixture(scope="session")
def toy_scene():
    return generate_toy_scene(seed=0)


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number, title, ok, detail=""):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
