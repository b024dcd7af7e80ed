"""Image-quality metrics, residual maps, scene statistics and render throughput."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsRecord:
    psnr_db: float
    ssim: float
    per_view_psnr: list[float] = field(default_factory=list)
    per_view_ssim: list[float] = field(default_factory=list)
    fps: float | None = None
    gaussian_count: int = 0
    size_mb: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the two leading axes
    x = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(x, g.size, axis=1) @ g


def _filter_full(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # adjoint of _filter_valid for a symmetric window
    pad = g.size - 1
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (x.ndim - 2)
    return _filter_valid(np.pad(x, widths), g[::-1])


def _ssim_terms(a, b):
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + c1
    num2 = 2.0 * cov + c2
    den1 = mu_a * mu_a + mu_b * mu_b + c1
    den2 = var_a + var_b + c2
    smap = num1 * num2 / (den1 * den2)
    return g, smap, (mu_a, mu_b, num1, num2, den1, den2)


def ssim(a, b) -> float:
    """Mean SSIM over the valid region, per channel, averaged over channels."""
    a, b = _check_pair(a, b)
    return float(_ssim_terms(a, b)[1].mean())


def ssim_and_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    a, b = _check_pair(a, b)
    g, smap, (mu_a, mu_b, num1, num2, den1, den2) = _ssim_terms(a, b)
    scale = 1.0 / smap.size
    d_mu_a = (2.0 * mu_b * num2 / (den1 * den2) - smap * 2.0 * mu_a / den1) * scale
    d_var_a = -smap / den2 * scale
    d_cov = 2.0 * num1 / (den1 * den2) * scale
    # var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b
    d_ea = d_mu_a - 2.0 * mu_a * d_var_a - mu_b * d_cov
    grad = _filter_full(d_ea, g) + 2.0 * a * _filter_full(d_var_a, g) + b * _filter_full(d_cov, g)
    return float(smap.mean()), grad


def residual_map(a, b) -> np.ndarray:
    """Per-pixel mean absolute difference over channels, HxW."""
    a, b = _check_pair(a, b)
    return np.abs(a - b).mean(axis=-1)


residual_maps = residual_map


def log_volumes(cloud) -> np.ndarray:
    """ln det Sigma per Gaussian (= 2 * sum of log-scales)."""
    return 2.0 * cloud.log_scales.sum(axis=1)


def volume_histogram(cloud, bins: int = 50, value_range=None):
    """Histogram of ln det Sigma. Returns (counts, bin_edges)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    vols = log_volumes(cloud)
    if value_range is None and vols.size and np.ptp(vols) == 0:
        value_range = (vols[0] - 0.5, vols[0] + 0.5)
    return np.histogram(vols, bins=bins, range=value_range)


def evaluate_views(cloud, views, config=None, divisor: int = 1, backend=None) -> MetricsRecord:
    """Mean PSNR/SSIM of renders against each view's ground truth."""
    from .raster import DEFAULT_CONFIG, render_view

    config = config or DEFAULT_CONFIG
    p, s = [], []
    for cam in views:
        img = render_view(cloud, cam, divisor, config, backend=backend).rgb
        p.append(psnr(img, cam.gt_image))
        s.append(ssim(img, cam.gt_image) if min(img.shape[:2]) >= SSIM_WINDOW else float("nan"))
    return MetricsRecord(
        psnr_db=float(np.mean(p)) if p else float("nan"),
        ssim=float(np.mean(s)) if s else float("nan"),
        per_view_psnr=p,
        per_view_ssim=s,
        gaussian_count=len(cloud),
    )


def bench_fps(cloud, views, frames: int = 50, warmup: int = 5, config=None, backend=None) -> float:
    """Frames per second of ``render_view`` cycling round-robin over ``views``."""
    from .raster import DEFAULT_CONFIG, render_view

    if frames < 1:
        raise ValueError("frames must be >= 1")
    config = config or DEFAULT_CONFIG
    for k in range(warmup):
        render_view(cloud, views[k % len(views)], 1, config, backend=backend)
    start = time.perf_counter()
    for k in range(frames):
        render_view(cloud, views[k % len(views)], 1, config, backend=backend)
    elapsed = time.perf_counter() - start
    return frames / max(elapsed, 1e-12)
