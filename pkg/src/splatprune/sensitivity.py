"""Per-Gaussian block Fisher accumulation and sensitivity scores."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import _kernels
from .errors import ScoringError
from .gradients import PARAM_SETS, canonical_param_set, param_jacobians
from .raster import DEFAULT_CONFIG, RenderConfig, check_divisor, project_cloud, render_view
from .scene import CameraView, GaussianCloud

DEFAULT_EPSILON = 1e-12
BASELINES = ("random", "opacity", "vis_volume")


@dataclass
class FisherBlock:
    matrix: np.ndarray
    hit_count: int
    gaussian_index: int


@dataclass
class FisherAccumulation:
    """Block Fisher matrices for every Gaussian of a cloud, stored as one (N, d, d) array."""

    matrices: np.ndarray
    hit_counts: np.ndarray
    variant: str
    divisor: int

    def __len__(self):
        return self.matrices.shape[0]

    def __getitem__(self, i) -> FisherBlock:
        return FisherBlock(self.matrices[i], int(self.hit_counts[i]), int(i))

    def __iter__(self) -> Iterator[FisherBlock]:
        return (self[i] for i in range(len(self)))

    def __add__(self, other: "FisherAccumulation") -> "FisherAccumulation":
        return FisherAccumulation(self.matrices + other.matrices, self.hit_counts + other.hit_counts,
                                  self.variant, self.divisor)


@dataclass
class SensitivityScores:
    scores: np.ndarray
    variant: str
    divisor: int = 1
    epsilon: float = DEFAULT_EPSILON
    hit_counts: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.scores.shape[0]


def _view_fisher(cloud, cam, variant, config, kernels):
    d = PARAM_SETS[variant]
    proj = project_cloud(cloud, cam, config)
    k = len(proj)
    fisher = np.zeros((k, d, d))
    hits = np.zeros(k, dtype=np.int64)
    if k:
        proj_jac, color_jac = param_jacobians(cloud, cam, proj, variant, config)
        kernels.fisher_accumulate(*proj.kernel_args(config), proj_jac, color_jac, fisher, hits)
    return proj.source_index, fisher, hits


def accumulate_fisher(cloud: GaussianCloud, views: Sequence[CameraView], variant: str = "mean_scale",
                      divisor: int = 4, config: RenderConfig = DEFAULT_CONFIG, backend=None,
                      workers: int = 1) -> FisherAccumulation:
    """Sum over views, pixels and channels of j^T j for each Gaussian's parameter block.

    Views are rendered at 1/divisor resolution. Ground-truth images are not used.
    Per-view results are reduced in view order, so ``workers > 1`` gives the
    same bits as the serial path.
    """
    variant = canonical_param_set(variant)
    check_divisor(divisor)
    d = PARAM_SETS[variant]
    kernels = _kernels.get_backend(backend)
    total = np.zeros((len(cloud), d, d))
    hits = np.zeros(len(cloud), dtype=np.int64)
    scaled = [cam.scaled(divisor) for cam in views]

    def one(cam):
        return _view_fisher(cloud, cam, variant, config, kernels)

    if workers > 1 and len(scaled) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, scaled))
    else:
        results = map(one, scaled)
    for src, fisher, view_hits in results:
        total[src] += fisher
        hits[src] += view_hits
    return FisherAccumulation(total, hits, variant, divisor)


def score_log_det(blocks: FisherAccumulation | Sequence[FisherBlock],
                  epsilon: float = DEFAULT_EPSILON) -> SensitivityScores:
    """Log-determinant score: sum of log(max(eigenvalue, epsilon)) per block."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(blocks, FisherAccumulation):
        mats, hits = blocks.matrices, blocks.hit_counts
        variant, divisor = blocks.variant, blocks.divisor
    else:
        blocks = list(blocks)
        d = blocks[0].matrix.shape[0] if blocks else 6
        mats = np.array([b.matrix for b in blocks]).reshape(-1, d, d)
        hits = np.array([b.hit_count for b in blocks], dtype=np.int64)
        variant = {3: "rgb", 6: "mean_scale", 10: "mean_scale_rot"}.get(d, f"d{d}")
        divisor = 1
    n, d = mats.shape[0], mats.shape[-1]
    bad = ~np.isfinite(mats.reshape(n, d * d)).all(axis=1)
    if bad.any():
        idx = int(np.nonzero(bad)[0][0])
        raise ScoringError(f"Fisher block of Gaussian {idx} has non-finite entries")
    scores = np.full(n, d * math.log(epsilon))
    live = hits > 0
    if live.any():
        eig = np.linalg.eigvalsh(mats[live])
        scores[live] = np.log(np.maximum(eig, epsilon)).sum(axis=1)
    return SensitivityScores(scores, variant, divisor, epsilon, hits.copy())


def sensitivity_scores(cloud: GaussianCloud, views: Sequence[CameraView], variant: str = "mean_scale",
                       divisor: int = 4, epsilon: float = DEFAULT_EPSILON,
                       config: RenderConfig = DEFAULT_CONFIG, backend=None,
                       workers: int = 1) -> SensitivityScores:
    blocks = accumulate_fisher(cloud, views, variant, divisor, config, backend, workers)
    return score_log_det(blocks, epsilon)


def visibility_hits(cloud: GaussianCloud, views: Sequence[CameraView], divisor: int = 1,
                    config: RenderConfig = DEFAULT_CONFIG, backend=None) -> np.ndarray:
    """Number of (view, pixel) pairs each Gaussian affects."""
    hits = np.zeros(len(cloud), dtype=np.int64)
    for cam in views:
        hits += render_view(cloud, cam, divisor, config, backend).hits
    return hits


def score_baseline(cloud: GaussianCloud, views: Sequence[CameraView] | None = None,
                   kind: str = "random", seed: int = 0, divisor: int = 1,
                   config: RenderConfig = DEFAULT_CONFIG, backend=None) -> SensitivityScores:
    """Heuristic comparison scores: random, activated opacity, or hits * opacity * volume^0.05."""
    if kind == "random":
        scores = np.random.default_rng(seed).uniform(size=len(cloud))
        return SensitivityScores(scores, "random", divisor)
    if kind == "opacity":
        return SensitivityScores(cloud.opacities.copy(), "opacity", divisor)
    if kind == "vis_volume":
        if views is None:
            raise ValueError("vis_volume scoring needs views")
        hits = visibility_hits(cloud, views, divisor, config, backend)
        # det(Sigma)^0.05 = exp(0.05 * 2 * sum(log_scales))
        volume = np.exp(0.1 * cloud.log_scales.sum(axis=1))
        return SensitivityScores(hits * cloud.opacities * volume, "vis_volume", divisor, hit_counts=hits)
    raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")


def removal_order(scores: SensitivityScores, opacities: np.ndarray) -> np.ndarray:
    """Indices from first-to-prune to last.

    Never-hit Gaussians go first, then ascending score; ties by ascending
    opacity, then ascending index.
    """
    n = len(scores)
    hit_key = np.zeros(n) if scores.hit_counts is None else (scores.hit_counts > 0).astype(float)
    return np.lexsort((np.arange(n), opacities, scores.scores, hit_key))


def scores_csv(scores: SensitivityScores) -> str:
    lines = ["index,score,hit_count"]
    hits = scores.hit_counts if scores.hit_counts is not None else np.full(len(scores), -1)
    for i, (s, h) in enumerate(zip(scores.scores, hits)):
        lines.append(f"{i},{float(s)!r},{int(h)}")
    return "\n".join(lines) + "\n"


def save_scores(path, scores: SensitivityScores) -> None:
    """CSV dump with columns index, score, hit_count (-1 when unknown)."""
    from .plyio import atomic_write

    atomic_write(path, scores_csv(scores).encode())


def load_scores(path, variant: str = "external") -> SensitivityScores:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return SensitivityScores(np.zeros(0), variant)
    data = data[np.argsort(data[:, 0], kind="stable")]
    hits = data[:, 2].astype(np.int64)
    return SensitivityScores(data[:, 1], variant, hit_counts=None if np.any(hits < 0) else hits)
