"""Compare the compiled and numpy compositing backends on the toy scene.

Usage: python3 benchmarks/bench_backends.py [--resolution 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from splatprune import _kernels
from splatprune.gradients import loss_and_gradients, render_with_param_jacobians
from splatprune.raster import render_view
from splatprune.sensitivity import accumulate_fisher
from splatprune.synthetic import generate_toy_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--resolution", type=int, default=64)
    parser.add_argument("--signal", type=int, default=64)
    parser.add_argument("--clutter", type=int, default=64)
    parser.add_argument("--views", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    bundle = generate_toy_scene(signal_count=args.signal, clutter_count=args.clutter, views=args.views,
                                resolution=args.resolution)
    cloud, views = bundle.cloud, bundle.views
    cam = views[0]
    tasks = {
        "render (1 view)": lambda be: render_view(cloud, cam, backend=be),
        "loss+grad (1 view)": lambda be: loss_and_gradients(cloud, cam, backend=be),
        "pixel jacobians (1 view)": lambda be: render_with_param_jacobians(cloud, cam, backend=be),
        f"fisher /4 ({len(views)} views)": lambda be: accumulate_fisher(cloud, views, divisor=4, backend=be),
    }
    backends = _kernels.available_backends()
    print(f"{len(cloud)} Gaussians, {args.resolution}x{args.resolution}, best of {args.repeat}")
    print(f"{'task':<28}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name, task in tasks.items():
        ms = {b: 1e3 * best_of(lambda: task(b), args.repeat) for b in backends}
        speedup = ms["python"] / ms["cython"] if "cython" in ms else float("nan")
        print(f"{name:<28}" + "".join(f"{ms[b]:>14.2f}" for b in backends) + f"{speedup:>9.1f}x")

    # the two backends must agree before their timings mean anything
    if "cython" in backends:
        a = render_view(cloud, cam, backend="cython").unclamped
        b = render_view(cloud, cam, backend="python").unclamped
        print(f"max |cython - python| on render: {np.abs(a - b).max():.3e}")


if __name__ == "__main__":
    main()
