"""Finite-difference verification of the analytic render Jacobians on small random scenes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradients import PARAM_SETS, finite_difference_jacobian, render_with_param_jacobians
from .raster import DEFAULT_CONFIG, RenderConfig, project_cloud
from .scene import SH_C0, CameraView, GaussianCloud, logit, look_at, sh_rest_count
from .synthetic import random_quaternions


@dataclass
class GradcheckScene:
    cloud: GaussianCloud
    camera: CameraView


@dataclass
class GradcheckResult:
    scenes: int = 0
    checks: int = 0
    max_abs_error: float = 0.0
    max_rel_error: float = 0.0
    failures: list[str] = field(default_factory=list)
    rtol: float = 1e-3
    atol: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.scenes > 0 and not self.failures

    def to_dict(self) -> dict:
        return {
            "scenes": self.scenes,
            "checks": self.checks,
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "rtol": self.rtol,
            "atol": self.atol,
            "passed": self.passed,
            "failures": self.failures,
        }


def near_threshold(cloud: GaussianCloud, cam: CameraView, config: RenderConfig = DEFAULT_CONFIG,
                   margin: float = 0.02) -> bool:
    """True if a small parameter step could flip a compositing branch.

    Branches are the alpha skip and clamp, the early-termination test, the
    depth order and the non-negative color clamp. ``margin`` is a relative
    distance (in log units) to the alpha and transmittance cut-offs. Such
    scenes make finite differences meaningless, so callers discard them.
    """
    proj = project_cloud(cloud, cam, config)
    if len(proj) == 0:
        return False
    if len(proj) > 1 and np.diff(proj.depth).min() < 1e-3:
        return True
    if np.any(proj.color < 0.02):
        return True
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    d = px[:, None, :] - proj.mean2d[None, :, :]
    a, b, c = proj.conic.T
    power = -0.5 * (a * d[..., 0] ** 2 + c * d[..., 1] ** 2) - b * d[..., 0] * d[..., 1]
    alpha = proj.opacity * np.exp(power)  # (P, K) in depth order
    lo, hi = config.alpha_min, config.alpha_max
    if np.any(np.abs(np.log(np.maximum(alpha, 1e-300) / lo)) < margin):
        return True
    if np.any(np.abs(np.log(np.maximum(alpha, 1e-300) / hi)) < margin):
        return True
    trans = np.ones(alpha.shape[0])
    for k in range(alpha.shape[1]):
        a_k = np.where(alpha[:, k] >= lo, np.minimum(alpha[:, k], hi), 0.0)
        nxt = trans * (1.0 - a_k)
        live = a_k > 0
        if np.any(live & (np.abs(np.log(np.maximum(nxt, 1e-300) / config.t_stop)) < margin)):
            return True
        trans = np.where(live & (nxt >= config.t_stop), nxt, trans)
    return False


def random_scene(rng: np.random.Generator, count: int = 6, resolution: int = 8,
                 sh_degree: int = 0) -> GradcheckScene:
    """One random camera looking at ``count`` Gaussians that cover a good part of the image."""
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    up = (0.0, 0.0, 1.0) if abs(eye[2]) < 2.5 else (1.0, 0.0, 0.0)
    focal = resolution / (2.0 * np.tan(np.radians(30.0)))
    cam = CameraView(look_at(eye, (0.0, 0.0, 0.0), up), (focal, focal * rng.uniform(0.9, 1.1)),
                     (resolution / 2.0, resolution / 2.0), resolution, resolution)
    colors = rng.uniform(0.2, 0.8, size=(count, 3))
    rest = rng.normal(0.0, 0.05, size=(count, sh_rest_count(sh_degree), 3))
    cloud = GaussianCloud.from_arrays(
        rng.uniform(-0.7, 0.7, size=(count, 3)),
        np.log(rng.uniform(0.15, 0.5, size=(count, 3))),
        random_quaternions(rng, count),
        (colors - 0.5) / SH_C0,
        rest,
        logit(rng.uniform(0.2, 0.8, size=count))[:, None],
    )
    return GradcheckScene(cloud, cam)


def sample_scenes(count: int, seed: int = 0, max_gaussians: int = 10, resolution: int = 8,
                  config: RenderConfig = DEFAULT_CONFIG, max_tries: int = 1000) -> list[GradcheckScene]:
    """``count`` random scenes away from every compositing threshold; half use SH degree 1."""
    rng = np.random.default_rng(seed)
    out: list[GradcheckScene] = []
    for _ in range(max_tries):
        if len(out) == count:
            break
        n = int(rng.integers(1, max_gaussians + 1))
        scene = random_scene(rng, n, resolution, sh_degree=len(out) % 2)
        if not near_threshold(scene.cloud, scene.camera, config):
            out.append(scene)
    if len(out) < count:
        raise RuntimeError(f"only {len(out)} of {count} scenes cleared the threshold margins")
    return out


def check_scene(scene: GradcheckScene, param_sets=tuple(PARAM_SETS), step: float = 1e-5,
                rtol: float = 1e-3, atol: float = 1e-6, config: RenderConfig = DEFAULT_CONFIG,
                backend=None, result: GradcheckResult | None = None, label: str = "") -> GradcheckResult:
    result = result or GradcheckResult(rtol=rtol, atol=atol)
    for param_set in param_sets:
        _, stream = render_with_param_jacobians(scene.cloud, scene.camera, 1, param_set, config, backend)
        for g in range(len(scene.cloud)):
            analytic = stream.dense(g)
            numeric = finite_difference_jacobian(scene.cloud, scene.camera, g, param_set, step, 1,
                                                 config, backend)
            err = np.abs(analytic - numeric)
            result.checks += err.size
            result.max_abs_error = max(result.max_abs_error, float(err.max(initial=0.0)))
            big = np.abs(numeric) > atol
            if big.any():
                rel = err[big] / np.abs(numeric[big])
                result.max_rel_error = max(result.max_rel_error, float(rel.max()))
            bad = err > atol + rtol * np.abs(numeric)
            if bad.any():
                result.failures.append(
                    f"{label}{param_set} gaussian {g}: {int(bad.sum())} entries off, max abs error {err.max():.3g}")
    return result


def run_gradcheck(scenes: int = 20, seed: int = 0, max_gaussians: int = 10, resolution: int = 8,
                  param_sets=tuple(PARAM_SETS), step: float = 1e-5, rtol: float = 1e-3, atol: float = 1e-6,
                  config: RenderConfig = DEFAULT_CONFIG, backend=None) -> GradcheckResult:
    result = GradcheckResult(rtol=rtol, atol=atol)
    for k, scene in enumerate(sample_scenes(scenes, seed, max_gaussians, resolution, config)):
        check_scene(scene, param_sets, step, rtol, atol, config, backend, result, label=f"scene {k} ")
        result.scenes += 1
    return result
