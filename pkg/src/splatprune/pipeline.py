"""Multi-round prune-refine: score, rank, remove, fine-tune."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import require_images
from .errors import ConfigError, ShapeError
from .gradients import FullGradients, canonical_param_set, loss_and_gradients
from .metrics import MetricsRecord, bench_fps, evaluate_views
from .plyio import ply_bytes
from .raster import DEFAULT_CONFIG, RenderConfig, check_divisor
from .scene import CameraView, GaussianCloud, normalize_quaternions
from .sensitivity import (
    BASELINES,
    DEFAULT_EPSILON,
    SensitivityScores,
    removal_order,
    score_baseline,
    sensitivity_scores,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
SCORERS = ("mean_scale", "mean_scale_rot", "rgb") + BASELINES


def canonical_scorer(name: str) -> str:
    key = name.replace("-", "_").lower()
    if key not in SCORERS:
        raise ConfigError(f"unknown scorer {name!r}; choose from {SCORERS}")
    return key


@dataclass
class RoundConfig:
    percent: float
    refine_iters: int = 0
    scorer: str = "mean_scale"
    divisor: int = 4

    def __post_init__(self):
        self.scorer = canonical_scorer(self.scorer)
        if not 0.0 <= self.percent < 1.0:
            raise ConfigError(f"round percent must be in [0, 1), got {self.percent}")
        if self.refine_iters < 0:
            raise ConfigError("refine_iters must be >= 0")
        try:
            check_divisor(self.divisor)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class OptimizerConfig:
    """Adam step sizes per parameter group; position step is multiplied by the scene extent."""

    position_lr: float = 1.6e-4
    log_scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    color_lr: float = 2.5e-3
    sh_rest_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def step_sizes(self, scene_extent: float = 1.0) -> dict[str, float]:
        return {
            "positions": self.position_lr * scene_extent,
            "log_scales": self.log_scale_lr,
            "rotations": self.rotation_lr,
            "base_colors": self.color_lr,
            "sh_rest": self.sh_rest_lr,
            "raw_opacities": self.opacity_lr,
        }


@dataclass
class PruneConfig:
    rounds: list[RoundConfig] = field(default_factory=lambda: [
        RoundConfig(0.8, 5000), RoundConfig(0.5, 5000)])
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lambda_ssim: float = 0.2
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.rounds = [r if isinstance(r, RoundConfig) else RoundConfig(**r) for r in self.rounds]
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if not 0.0 <= self.lambda_ssim < 1.0:
            raise ConfigError("lambda_ssim must be in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    @property
    def cumulative_percent(self) -> float:
        return cumulative_percent([r.percent for r in self.rounds])

    def to_dict(self) -> dict:
        return asdict(self)


def cumulative_percent(percents: Sequence[float]) -> float:
    return 1.0 - math.prod(1.0 - p for p in percents)


def prune_once(cloud: GaussianCloud, scores: SensitivityScores | np.ndarray,
               percent: float) -> tuple[GaussianCloud, np.ndarray]:
    """Remove floor(percent * N) lowest-scoring Gaussians. Returns (kept cloud, removed indices)."""
    if not isinstance(scores, SensitivityScores):
        scores = SensitivityScores(np.asarray(scores, dtype=np.float64), "external")
    n = len(cloud)
    if len(scores) != n:
        raise ShapeError(f"{len(scores)} scores for {n} Gaussians")
    if not 0.0 <= percent < 1.0:
        raise ValueError("percent must be in [0, 1)")
    count = math.floor(percent * n)
    if count == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    removed = np.sort(removal_order(scores, cloud.opacities)[:count])
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return cloud.subset(keep), removed


class Adam:
    """Adam with bias correction and one step size per parameter array."""

    def __init__(self, cloud: GaussianCloud, config: OptimizerConfig, scene_extent: float = 1.0):
        self.config = config
        self.lr = config.step_sizes(scene_extent)
        self.m = {k: np.zeros_like(v) for k, v in cloud.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in cloud.arrays().items()}
        self.t = 0

    def step(self, cloud: GaussianCloud, grads: FullGradients) -> None:
        cfg = self.config
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.arrays().items():
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            lr = self.lr[name]
            if lr == 0.0:
                continue
            param = getattr(cloud, name)
            param -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if self.lr["rotations"] != 0.0:
            cloud.rotations[...] = normalize_quaternions(cloud.rotations)


def refine(cloud: GaussianCloud, views: Sequence[CameraView], iters: int,
           optimizer: OptimizerConfig | None = None, lambda_ssim: float = 0.2, seed: int = 0,
           scene_extent: float = 1.0, config: RenderConfig = DEFAULT_CONFIG, backend=None,
           callback=None) -> GaussianCloud:
    """Fine-tune for ``iters`` single-view steps without densification; returns a new cloud.

    Views are visited in a seeded shuffle that is redrawn every epoch.
    """
    require_images(views)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    out = cloud.copy()
    if iters == 0 or len(out) == 0:
        return out
    adam = Adam(out, optimizer or OptimizerConfig(), scene_extent)
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for it in range(iters):
        if not order:
            order = rng.permutation(len(views)).tolist()
        cam = views[order.pop()]
        loss, grads = loss_and_gradients(out, cam, lambda_ssim, config, backend)
        adam.step(out, grads)
        if callback is not None:
            callback(it, loss)
    return out


def score_cloud(cloud: GaussianCloud, views: Sequence[CameraView], scorer: str, divisor: int = 4,
                seed: int = 0, epsilon: float = DEFAULT_EPSILON, config: RenderConfig = DEFAULT_CONFIG,
                backend=None, workers: int = 1) -> SensitivityScores:
    scorer = canonical_scorer(scorer)
    if scorer in BASELINES:
        return score_baseline(cloud, views, scorer, seed, divisor, config, backend)
    return sensitivity_scores(cloud, views, canonical_param_set(scorer), divisor, epsilon,
                              config, backend, workers)


def score_summary(scores: np.ndarray, bins: int = 10) -> dict:
    finite = scores[np.isfinite(scores)]
    if finite.size == 0:
        return {"count": int(scores.size)}
    counts, edges = np.histogram(finite, bins=bins)
    return {
        "count": int(scores.size),
        "min": float(finite.min()),
        "max": float(finite.max()),
        "mean": float(finite.mean()),
        "quantiles": {str(q): float(np.quantile(finite, q)) for q in (0.1, 0.25, 0.5, 0.75, 0.9)},
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    }


def removed_digest(indices: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(indices, dtype="<i8").tobytes()).hexdigest()


def measure(cloud, views, config, backend, fps_frames: int = 0) -> MetricsRecord:
    rec = evaluate_views(cloud, views, config, backend=backend)
    rec.size_mb = len(ply_bytes(cloud)) / 1e6
    if fps_frames > 0 and len(cloud):
        rec.fps = bench_fps(cloud, views, fps_frames, warmup=min(3, fps_frames), config=config,
                            backend=backend)
    return rec


@dataclass
class RoundReport:
    round: int
    percent: float
    scorer: str
    divisor: int
    refine_iters: int
    count_before: int
    kept_count: int
    removed_count: int
    removed_indices: list[int]
    removed_digest: str
    score_summary: dict
    post_prune: dict | None = None
    post_refine: dict | None = None
    timings: dict | None = None


@dataclass
class PruneReport:
    initial_count: int
    config: dict
    rounds: list[RoundReport] = field(default_factory=list)
    initial_metrics: dict | None = None
    error: str | None = None
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def final_count(self) -> int:
        return self.rounds[-1].kept_count if self.rounds else self.initial_count

    @property
    def cumulative_percent(self) -> float:
        return cumulative_percent([r.percent for r in self.rounds])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["final_count"] = self.final_count
        out["cumulative_percent"] = self.cumulative_percent
        out["removed_fraction"] = 1.0 - self.final_count / self.initial_count if self.initial_count else 0.0
        return out

    def stage_table(self) -> str:
        """Plain-text stage summary: one row per baseline / prune / refine stage."""
        header = f"{'stage':<16}{'#gaussians':>12}{'PSNR':>9}{'SSIM':>9}{'FPS':>10}{'size MB':>10}"
        rows = [header, "-" * len(header)]

        def row(name, count, metrics):
            m = metrics or {}
            fps = m.get("fps")
            size = m.get("size_mb")
            rows.append(
                f"{name:<16}{count:>12d}{m.get('psnr_db', float('nan')):>9.2f}{m.get('ssim', float('nan')):>9.4f}"
                + (f"{fps:>10.1f}" if fps else f"{'-':>10}")
                + (f"{size:>10.3f}" if size is not None else f"{'-':>10}")
            )

        row("baseline", self.initial_count, self.initial_metrics)
        for r in self.rounds:
            row(f"prune {r.percent:.0%}", r.kept_count, r.post_prune)
            if r.refine_iters:
                row(f"refine {r.refine_iters}", r.kept_count, r.post_refine)
        return "\n".join(rows)


class PipelineError(RuntimeError):
    def __init__(self, message: str, report: PruneReport):
        super().__init__(message)
        self.report = report


def run_pipeline(cloud: GaussianCloud, views: Sequence[CameraView], config: PruneConfig,
                 scene_extent: float = 1.0, render_config: RenderConfig = DEFAULT_CONFIG,
                 backend=None, evaluate: bool = True, fps_frames: int = 0, deterministic: bool = False,
                 workers: int = 1) -> tuple[GaussianCloud, PruneReport]:
    """Apply every configured round; ``deterministic`` drops wall-clock fields from the report."""
    report = PruneReport(len(cloud), config.to_dict())
    has_images = all(cam.gt_image is not None for cam in views)
    evaluate = evaluate and has_images
    fps_frames = 0 if deterministic else fps_frames
    if evaluate and config.rounds:
        report.initial_metrics = measure(cloud, views, render_config, backend, fps_frames).to_dict()
    ids = np.arange(len(cloud))
    current = cloud
    for k, rnd in enumerate(config.rounds):
        try:
            t0 = time.perf_counter()
            scores = score_cloud(current, views, rnd.scorer, rnd.divisor, config.seed + k, config.epsilon,
                                 render_config, backend, workers)
            t1 = time.perf_counter()
            before = len(current)
            current, removed_local = prune_once(current, scores, rnd.percent)
            removed = ids[removed_local]
            ids = np.delete(ids, removed_local)
            t2 = time.perf_counter()
            rr = RoundReport(
                round=k, percent=rnd.percent, scorer=rnd.scorer, divisor=rnd.divisor,
                refine_iters=rnd.refine_iters, count_before=before, kept_count=len(current),
                removed_count=int(removed.size), removed_indices=[int(i) for i in np.sort(removed)],
                removed_digest=removed_digest(np.sort(removed)), score_summary=score_summary(scores.scores),
            )
            if evaluate:
                rr.post_prune = measure(current, views, render_config, backend, fps_frames).to_dict()
            t3 = time.perf_counter()
            if rnd.refine_iters:
                current = refine(current, views, rnd.refine_iters, config.optimizer, config.lambda_ssim,
                                 config.seed + k, scene_extent, render_config, backend)
                if evaluate:
                    rr.post_refine = measure(current, views, render_config, backend, fps_frames).to_dict()
            t4 = time.perf_counter()
            if not deterministic:
                rr.timings = {"score_s": t1 - t0, "prune_s": t2 - t1, "refine_s": t4 - t3}
            report.rounds.append(rr)
            log.info("round %d: kept %d of %d", k, len(current), before)
        except Exception as exc:
            report.error = f"round {k}: {type(exc).__name__}: {exc}"
            raise PipelineError(report.error, report) from exc
    return current, report


@dataclass
class SweepResult:
    first: list[float]
    second: list[float]
    psnr: np.ndarray
    ssim: np.ndarray
    fps: np.ndarray
    kept: np.ndarray

    def to_dict(self) -> dict:
        # NaN (no fps measured) becomes null so the JSON stays standard
        return {
            "first_round_percent": self.first,
            "second_round_percent": self.second,
            "psnr": self.psnr.tolist(),
            "ssim": self.ssim.tolist(),
            "fps": [[None if np.isnan(v) else v for v in row] for row in self.fps.tolist()],
            "kept": self.kept.tolist(),
        }

    def to_csv(self) -> str:
        lines = ["p1,p2,kept,psnr,ssim,fps"]
        for i, p1 in enumerate(self.first):
            for j, p2 in enumerate(self.second):
                lines.append(f"{p1!r},{p2!r},{int(self.kept[i, j])},{float(self.psnr[i, j])!r},"
                             f"{float(self.ssim[i, j])!r},{float(self.fps[i, j])!r}")
        return "\n".join(lines) + "\n"


def sweep_percentages(cloud: GaussianCloud, views: Sequence[CameraView], first: Sequence[float],
                      second: Sequence[float], refine_iters: int | Sequence[int] = 0,
                      base: PruneConfig | None = None, scene_extent: float = 1.0,
                      render_config: RenderConfig = DEFAULT_CONFIG, backend=None,
                      fps_frames: int = 0) -> SweepResult:
    """Run a two-round pipeline for every (p1, p2) cell and collect final metrics."""
    base = base or PruneConfig(rounds=[])
    iters = [refine_iters] * 2 if isinstance(refine_iters, int) else list(refine_iters)
    scorer = base.rounds[0].scorer if base.rounds else "mean_scale"
    divisor = base.rounds[0].divisor if base.rounds else 4
    shape = (len(first), len(second))
    psnr = np.zeros(shape)
    ssim = np.zeros(shape)
    fps = np.full(shape, np.nan)
    kept = np.zeros(shape, dtype=np.int64)
    for i, p1 in enumerate(first):
        for j, p2 in enumerate(second):
            cfg = PruneConfig(
                rounds=[RoundConfig(p1, iters[0], scorer, divisor), RoundConfig(p2, iters[1], scorer, divisor)],
                optimizer=base.optimizer, lambda_ssim=base.lambda_ssim, seed=base.seed, epsilon=base.epsilon,
            )
            out, _ = run_pipeline(cloud, views, cfg, scene_extent, render_config, backend, evaluate=False)
            rec = measure(out, views, render_config, backend, fps_frames)
            psnr[i, j], ssim[i, j], kept[i, j] = rec.psnr_db, rec.ssim, len(out)
            if rec.fps is not None:
                fps[i, j] = rec.fps
    return SweepResult(list(first), list(second), psnr, ssim, fps, kept)
