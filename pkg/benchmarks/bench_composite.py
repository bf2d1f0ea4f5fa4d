"""Compiled vs pure-Python compositing: forward and backward time per view.

    python benchmarks/bench_composite.py --size 128 --repeat 5 --threads 1 4
"""
import argparse
import os
import time

import numpy as np

from fogsplat import raster
from fogsplat.fog import FogParams
from fogsplat.raster import render, render_backward
from fogsplat.toy import toy_cameras, toy_cloud


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(backend, threads, cloud, cam, fog, repeat):
    raster.set_backend(backend)
    os.environ["FOGSPLAT_THREADS"] = str(threads)
    out = render(cloud, cam, fog)
    rng = np.random.default_rng(0)
    gc = rng.normal(size=out.color.shape)
    gd = rng.normal(size=out.depth.shape)
    gt = rng.normal(size=out.transmission.shape)
    fwd = best_of(lambda: render(cloud, cam, fog), repeat)
    bwd = best_of(lambda: render_backward(out, gc, gd, gt), repeat)
    return fwd, bwd, out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=128, help="image width and height in pixels")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--threads", type=int, nargs="+", default=[1])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cloud = toy_cloud(args.seed)
    cam = toy_cameras(12, args.size)[6]
    fog = FogParams.initial(0.8, 0.8, use_sigmoid=False)
    backends = ["python"] + (["compiled"] if raster.compiled_available() else [])
    ref = None
    print(f"{len(cloud)} Gaussians, {args.size}x{args.size} px, best of {args.repeat}")
    print(f"{'backend':<10}{'threads':>8}{'forward ms':>12}{'backward ms':>13}{'speedup':>9}")
    base = None
    for backend in backends:
        for threads in (args.threads if backend == "compiled" else [1]):
            fwd, bwd, out = bench(backend, threads, cloud, cam, fog, args.repeat)
            if ref is None:
                ref = out.color
            diff = float(np.max(np.abs(out.color - ref)))
            base = base or fwd + bwd
            print(f"{backend:<10}{threads:>8}{1e3 * fwd:>12.1f}{1e3 * bwd:>13.1f}{base / (fwd + bwd):>8.1f}x"
                  f"   max |diff| {diff:.1e}")


if __name__ == "__main__":
    main()
