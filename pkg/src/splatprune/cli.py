"""Command-line entry point: ``splatprune <command> ...``.

Exit codes: 0 success, 1 runtime failure (JSON error on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .config import PipelineConfigFile
from .dataset import load_bundle, save_bundle
from .errors import ConfigError, SplatPruneError
from .metrics import bench_fps, residual_map, volume_histogram
from .pipeline import (
    SCORERS,
    OptimizerConfig,
    PipelineError,
    PruneConfig,
    RoundConfig,
    measure,
    prune_once,
    refine,
    run_pipeline,
    score_cloud,
    sweep_percentages,
)
from .plyio import atomic_write, save_ply
from .raster import RenderConfig, render_view, save_png
from .sensitivity import load_scores, save_scores

log = logging.getLogger("splatprune")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _write_json(path, data) -> None:
    atomic_write(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())


def _emit(data, path=None) -> None:
    if path:
        _write_json(path, data)
    else:
        print(json.dumps(data, indent=2, sort_keys=True))


def _load_scene(args):
    if not args.scene:
        raise UsageError("--scene is required")
    bundle = load_bundle(args.scene, gamma=args.gamma, ply_path=getattr(args, "ply", None))
    return bundle


def _render_config(bundle) -> RenderConfig:
    return RenderConfig(background=bundle.background)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .synthetic import ToySceneSpec, generate_toy_scene

    spec = ToySceneSpec(args.signal, args.clutter, args.views, args.resolution, _seed(args))
    bundle = generate_toy_scene(spec)
    save_bundle(bundle, args.out, gamma=args.gamma)
    print(f"wrote {len(bundle.cloud)} Gaussians and {len(bundle.views)} views to {args.out}")
    return 0


def cmd_score(args) -> int:
    bundle = _load_scene(args)
    scores = score_cloud(bundle.cloud, bundle.views, args.variant, args.divisor, _seed(args), args.epsilon,
                         _render_config(bundle), args.backend, args.workers)
    save_scores(args.out, scores)
    print(f"wrote {len(scores)} {scores.variant} scores to {args.out}")
    return 0


def cmd_prune(args) -> int:
    bundle = _load_scene(args)
    if args.scores:
        scores = load_scores(args.scores)
    else:
        scores = score_cloud(bundle.cloud, bundle.views, args.variant, args.divisor, _seed(args), args.epsilon,
                             _render_config(bundle), args.backend, args.workers)
    if not 0.0 <= args.percent < 1.0:
        raise UsageError("--percent must be in [0, 1)")
    kept, removed = prune_once(bundle.cloud, scores, args.percent)
    save_ply(kept, args.out)
    if args.removed:
        atomic_write(args.removed, ("\n".join(str(int(i)) for i in removed) + "\n").encode())
    print(f"kept {len(kept)} of {len(bundle.cloud)} Gaussians -> {args.out}")
    return 0


def cmd_refine(args) -> int:
    bundle = _load_scene(args)
    opt = OptimizerConfig()
    out = refine(bundle.cloud, bundle.views, args.iters, opt, args.lambda_ssim, _seed(args), bundle.scene_extent,
                 _render_config(bundle), args.backend)
    save_ply(out, args.out)
    print(f"refined {len(out)} Gaussians for {args.iters} iterations -> {args.out}")
    return 0


def _pipeline_config(args) -> PipelineConfigFile:
    base = PipelineConfigFile.load(args.config) if args.config else PipelineConfigFile()
    rounds = None
    if args.rounds is not None or args.refine_iters is not None:
        percents = args.rounds if args.rounds is not None else [r["percent"] for r in base.rounds]
        iters = args.refine_iters if args.refine_iters is not None else [r["refine_iters"] for r in base.rounds]
        if len(iters) == 1 and len(percents) > 1:
            iters = iters * len(percents)
        if len(iters) != len(percents):
            raise UsageError(f"--rounds has {len(percents)} entries but --refine-iters has {len(iters)}")
        rounds = [{"percent": p, "refine_iters": k} for p, k in zip(percents, iters)]
    return base.with_overrides(
        scene=args.scene, ply=args.ply, output=args.out, rounds=rounds, seed=args.seed,
        divisor=args.divisor, variant=args.variant, lambda_ssim=args.lambda_ssim,
        deterministic=True if args.deterministic else None, workers=args.workers,
        fps_frames=args.fps_frames, evaluate=False if args.no_eval else None,
    )


def cmd_pipeline(args) -> int:
    cfg = _pipeline_config(args)
    if args.dump_config:
        atomic_write(args.dump_config, cfg.to_json().encode())
    if not cfg.scene:
        raise UsageError("a scene directory is required (--scene or \"scene\" in the config)")
    bundle = load_bundle(cfg.scene, gamma=args.gamma, ply_path=cfg.ply)
    try:
        cloud, report = run_pipeline(bundle.cloud, bundle.views, cfg.prune_config(), bundle.scene_extent,
                                     _render_config(bundle), args.backend, cfg.metrics.evaluate,
                                     cfg.metrics.fps_frames, cfg.deterministic, cfg.workers)
    except PipelineError as exc:
        if args.report:
            _write_json(args.report, exc.report.to_dict())
        raise
    if cfg.output:
        save_ply(cloud, cfg.output)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(report.stage_table())
    print(f"cumulative prune {report.cumulative_percent:.2%}: {report.initial_count} -> {report.final_count}")
    return 0


def cmd_sweep(args) -> int:
    bundle = _load_scene(args)
    base = PruneConfig(rounds=[RoundConfig(0.0, 0, args.variant, args.divisor)], seed=_seed(args),
                       lambda_ssim=args.lambda_ssim)
    fps_frames = 0 if args.deterministic else args.fps_frames
    result = sweep_percentages(bundle.cloud, bundle.views, args.first, args.second, args.refine_iters, base,
                               bundle.scene_extent, _render_config(bundle), args.backend, fps_frames)
    atomic_write(args.out, result.to_csv().encode())
    if args.json:
        _write_json(args.json, result.to_dict())
    print(f"wrote {len(args.first)}x{len(args.second)} sweep to {args.out}")
    return 0


def cmd_render(args) -> int:
    bundle = _load_scene(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = range(len(bundle.views)) if args.view is None else [args.view]
    for k in indices:
        if not 0 <= k < len(bundle.views):
            raise UsageError(f"--view {k} out of range (scene has {len(bundle.views)} views)")
        img = render_view(bundle.cloud, bundle.views[k], args.divisor, _render_config(bundle), args.backend)
        save_png(img.rgb, out / f"{k:03d}.png", gamma=args.gamma)
    print(f"rendered {len(indices)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    bundle = _load_scene(args)
    config = _render_config(bundle)
    fps_frames = 0 if args.deterministic else args.fps_frames
    rec = measure(bundle.cloud, bundle.views, config, args.backend, fps_frames)
    if args.out:
        out = Path(args.out)
        (out / "residuals").mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", rec.to_dict())
        for k, cam in enumerate(bundle.views):
            img = render_view(bundle.cloud, cam, 1, config, args.backend).rgb
            save_png(residual_map(img, cam.gt_image), out / "residuals" / f"{k:03d}.png")
        counts, edges = volume_histogram(bundle.cloud, args.bins)
        rows = ["bin_lo,bin_hi,count"] + [f"{float(lo)!r},{float(hi)!r},{int(c)}"
                                          for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
        atomic_write(out / "volume_histogram.csv", ("\n".join(rows) + "\n").encode())
    print(json.dumps(rec.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    bundle = _load_scene(args)
    views = [cam.without_image() for cam in bundle.views]
    result = {"gaussians": len(bundle.cloud), "frames": args.frames, "warmup": args.warmup,
              "backend": args.backend or _kernels.BACKEND}
    # wall-clock numbers are inherently run-dependent
    result["fps"] = None if args.deterministic else bench_fps(
        bundle.cloud, views, args.frames, args.warmup, _render_config(bundle), args.backend)
    _emit(result, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    result = run_gradcheck(args.scenes, _seed(args), args.max_gaussians, args.resolution, step=args.step,
                           rtol=args.rtol, atol=args.atol, backend=args.backend)
    _emit(result.to_dict(), args.out)
    return 0 if result.passed else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatprune", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--backend", choices=_kernels.available_backends(), default=None,
                        help="kernel backend (default: compiled if available)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--deterministic", action="store_true",
                        help="omit wall-clock measurements so outputs are reproducible byte for byte")
    common.add_argument("--gamma", action="store_true", help="decode/encode PNGs with gamma 2.2")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scene", help="scene directory (point_cloud.ply, cameras.json, images/)")
    scene.add_argument("--ply", help="use this PLY instead of the scene's point_cloud.ply")

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument("--variant", default="mean_scale", type=lambda s: s.replace("-", "_"),
                         choices=SCORERS, help="sensitivity parameter set or baseline scorer")
    scoring.add_argument("--divisor", type=int, default=4, choices=[1, 2, 4, 8])
    scoring.add_argument("--epsilon", type=float, default=1e-12)
    scoring.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("synth", parents=[common], help="generate a toy scene bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--signal", type=int, default=64)
    p.add_argument("--clutter", type=int, default=64)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("score", parents=[common, scene, scoring], help="write per-Gaussian scores (CSV)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", parents=[common, scene, scoring], help="remove the lowest-scoring fraction")
    p.add_argument("--percent", type=float, required=True, help="fraction in [0, 1)")
    p.add_argument("--scores", help="precomputed score CSV (otherwise scores are computed)")
    p.add_argument("--removed", help="write removed indices here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("refine", parents=[common, scene], help="fine-tune without densification")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("pipeline", parents=[common, scene], help="multi-round prune-refine")
    p.add_argument("--config", help="JSON pipeline config; flags override its values")
    p.add_argument("--rounds", type=_floats, help="per-round percentages, e.g. 0.8,0.5")
    p.add_argument("--refine-iters", type=_ints, help="per-round refine iterations, e.g. 5000,5000")
    p.add_argument("--variant", type=lambda s: s.replace("-", "_"), choices=SCORERS)
    p.add_argument("--divisor", type=int, choices=[1, 2, 4, 8])
    p.add_argument("--lambda-ssim", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--fps-frames", type=int)
    p.add_argument("--no-eval", action="store_true", help="skip per-stage metrics")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--dump-config", help="write the resolved config here")
    p.add_argument("--out", help="pruned PLY output")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", parents=[common, scene], help="grid over two per-round percentages")
    p.add_argument("--first", type=_floats, required=True)
    p.add_argument("--second", type=_floats, required=True)
    p.add_argument("--refine-iters", type=int, default=0)
    p.add_argument("--variant", default="mean_scale", type=lambda s: s.replace("-", "_"), choices=SCORERS)
    p.add_argument("--divisor", type=int, default=4, choices=[1, 2, 4, 8])
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--fps-frames", type=int, default=0)
    p.add_argument("--json", help="also write the grids as JSON")
    p.add_argument("--out", required=True, help="CSV output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", parents=[common, scene], help="render views to PNG")
    p.add_argument("--view", type=int, help="single view index (default: all)")
    p.add_argument("--divisor", type=int, default=1, choices=[1, 2, 4, 8])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common, scene], help="metrics, residual maps, volume histogram")
    p.add_argument("--out", help="output directory for metrics.json, residuals/, volume_histogram.csv")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--fps-frames", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common, scene], help="rendering throughput")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", help="JSON output (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the analytic Jacobians")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--max-gaussians", type=int, default=10)
    p.add_argument("--resolution", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-6)
    p.add_argument("--out", help="JSON output (default: stdout)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(all="ignore"):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        return _fail(2, type(exc).__name__, str(exc))
    except (SplatPruneError, PipelineError, OSError, ValueError, RuntimeError) as exc:
        log.debug("command failed", exc_info=True)
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
