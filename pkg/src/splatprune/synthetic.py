"""Seeded toy scenes: signal Gaussians that produce the ground truth plus removable clutter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SceneBundle, camera_extent
from .raster import RenderConfig, render_view
from .scene import SH_C0, CameraView, GaussianCloud, logit, look_at

CLUTTER_KINDS = ("transparent", "occluded", "duplicate")


@dataclass(frozen=True)
class ToySceneSpec:
    signal_count: int = 64
    clutter_count: int = 64
    views: int = 20
    resolution: int = 64
    seed: int = 0
    ring_radius: float = 3.0
    fov_degrees: float = 40.0
    # dense, mutually overlapping signal like a converged reconstruction
    signal_scale_range: tuple[float, float] = (0.06, 0.2)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def ring_cameras(count: int, resolution: int, radius: float = 3.0, fov_degrees: float = 40.0):
    """Cameras on a ring around the origin, alternating elevation, all looking at the center."""
    focal = resolution / (2.0 * np.tan(np.radians(fov_degrees) / 2.0))
    views = []
    for k in range(count):
        theta = 2.0 * np.pi * k / max(count, 1)
        elevation = 0.35 * radius * (1.0 if k % 2 == 0 else -0.5)
        eye = (radius * np.cos(theta), radius * np.sin(theta), elevation)
        views.append(CameraView(look_at(eye, (0.0, 0.0, 0.0)), (focal, focal),
                                (resolution / 2.0, resolution / 2.0), resolution, resolution,
                                name=f"ring_{k:03d}"))
    return views


def _signal(rng, n, scale_range):
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    return {
        "positions": rng.uniform(-0.5, 0.5, size=(n, 3)),
        "log_scales": np.log(rng.uniform(*scale_range, size=(n, 3))),
        "rotations": random_quaternions(rng, n),
        "base_colors": (colors - 0.5) / SH_C0,
        "raw_opacities": logit(rng.uniform(0.6, 0.95, size=n)),
    }


def _clutter(rng, n, signal, scale_range):
    n_signal = signal["positions"].shape[0]
    out = {k: np.zeros((n,) + v.shape[1:]) for k, v in signal.items()}
    kinds = []
    for j in range(n):
        kind = CLUTTER_KINDS[j % 3] if n_signal else "transparent"
        kinds.append(kind)
        if kind == "transparent":
            out["positions"][j] = rng.uniform(-0.5, 0.5, 3)
            out["log_scales"][j] = np.log(rng.uniform(*scale_range, 3))
            out["rotations"][j] = random_quaternions(rng, 1)[0]
            out["base_colors"][j] = (rng.uniform(0.1, 0.9, 3) - 0.5) / SH_C0
            out["raw_opacities"][j] = rng.uniform(-9.0, -6.0)
            continue
        host = int(rng.integers(n_signal))
        for key in out:
            out[key][j] = signal[key][host]
        if kind == "occluded":
            # same center as its host (depth ties resolve host-first), much smaller footprint
            out["log_scales"][j] = signal["log_scales"][host] + np.log(0.4)
            out["base_colors"][j] += rng.uniform(-0.05, 0.05, 3) / SH_C0
            out["raw_opacities"][j] = logit(rng.uniform(0.3, 0.9))
        else:
            jitter = 0.3 * np.exp(signal["log_scales"][host]).mean()
            out["positions"][j] += rng.normal(0.0, jitter, 3)
    return out, kinds


def _cloud(parts) -> GaussianCloud:
    n = parts["positions"].shape[0]
    return GaussianCloud.from_arrays(parts["positions"], parts["log_scales"], parts["rotations"],
                                     parts["base_colors"], np.zeros((n, 0, 3)), parts["raw_opacities"])


def generate_toy_scene(spec: ToySceneSpec | None = None, **kwargs) -> SceneBundle:
    """Deterministic toy scene. Ground truth is rendered from the signal Gaussians only;
    clutter is appended after them (indices >= signal_count)."""
    spec = spec or ToySceneSpec(**kwargs)
    if spec.signal_count < 0 or spec.clutter_count < 0:
        raise ValueError("counts must be non-negative")
    if spec.resolution < 16:
        raise ValueError("resolution must be >= 16")
    rng = np.random.default_rng(spec.seed)
    signal = _signal(rng, spec.signal_count, spec.signal_scale_range)
    clutter, kinds = _clutter(rng, spec.clutter_count, signal, spec.signal_scale_range)
    config = RenderConfig(background=spec.background)
    views = ring_cameras(spec.views, spec.resolution, spec.ring_radius, spec.fov_degrees)
    signal_cloud = _cloud(signal)
    views = [
        CameraView(cam.pose, cam.focal, cam.principal_point, cam.width, cam.height,
                   gt_image=render_view(signal_cloud, cam, 1, config).rgb, name=cam.name)
        for cam in views
    ]
    full = _cloud({k: np.concatenate([signal[k], clutter[k]]) for k in signal})
    return SceneBundle(full, views, tuple(spec.background), 0, camera_extent(views), kinds)
