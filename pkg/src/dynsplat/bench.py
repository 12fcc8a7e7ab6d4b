"""Wall-clock benchmarks: view-MLP weight generation vs per-frame
refine+render, and compiled-vs-fallback kernel comparison. Medians over
`repeats` runs after `warmup` discarded iterations; absolute numbers are
machine-dependent and never gated, only orderings."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import backend as backend_mod
from .raster import RenderOptions, render_pipeline
from .splats import SplatScene
from .viewadapt import HyperNet, OffsetFlags, RefineConfig, generate_theta, refine_batch


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_weight_generation(hypernet: HyperNet, repeats: int = 20,
                            warmup: int = 3) -> float:
    """Median seconds to generate all per-Gaussian view MLP parameters."""
    params = hypernet.param_arrays()
    return _median_time(lambda: generate_theta(params), repeats, warmup)


def bench_refine_render(scene: SplatScene, hypernet: HyperNet | None, pose, cam,
                        opts: RenderOptions | None = None,
                        flags: OffsetFlags | None = None, pose_mode: str = "log",
                        repeats: int = 20, warmup: int = 3) -> float:
    """Median seconds for one frame: pose-conditioned refinement (if any)
    plus rendering. View-MLP weight generation is pose-independent, happens
    once per scene, and is timed separately (bench_weight_generation)."""
    opts = opts or RenderOptions()
    scene_arrays = scene.param_arrays()
    hyper_arrays = hypernet.param_arrays() if hypernet is not None else None
    rc = None
    theta = None
    if hypernet is not None:
        rc = RefineConfig.for_hypernet(hypernet, flags or OffsetFlags(), pose_mode)
        theta = generate_theta(hyper_arrays)

    def frame():
        params = scene_arrays
        if hyper_arrays is not None:
            params = refine_batch(scene_arrays, hyper_arrays, pose.R, pose.t,
                                  rc, theta=theta)
        render_pipeline(params, pose.R, pose.t, cam, opts)

    return _median_time(frame, repeats, warmup)


def bench_report(scene: SplatScene, hypernet: HyperNet | None, pose, cam,
                 opts: RenderOptions | None = None, repeats: int = 20,
                 warmup: int = 3, compare_backends: bool = False) -> dict:
    """Inference split (weight generation vs per-frame refine+render) and an
    optional compiled-vs-fallback comparison."""
    opts = opts or RenderOptions()
    report = {
        "n_gaussians": len(scene),
        "image": [cam.height, cam.width],
        "repeats": repeats,
        "warmup": warmup,
        "backend_default": backend_mod.default_backend_name(),
    }
    if hypernet is not None:
        report["weight_generation_s"] = bench_weight_generation(
            hypernet, repeats, warmup)
    backends = backend_mod.available_backends() if compare_backends \
        else [opts.backend]
    per_backend = {}
    for name in backends:
        b_opts = replace(opts, backend=name) if name != opts.backend else opts
        sec = bench_refine_render(scene, hypernet, pose, cam, b_opts,
                                  repeats=repeats, warmup=warmup)
        per_backend[backend_mod.get_kernels(b_opts.backend).BACKEND_NAME
                    if b_opts.backend == "auto" else name] = {
            "refine_render_s": sec,
            "fps": 1.0 / sec if sec > 0 else float("inf"),
        }
    report["backends"] = per_backend
    return report
