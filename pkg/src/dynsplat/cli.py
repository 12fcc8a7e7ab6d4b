"""Command-line surface tying the pipeline into reproducible experiments.

Every run writes a manifest (full flag set + seed + format version) into the
output directory. Exit codes: 0 success, 1 validation/usage error, 2 training
divergence.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import backend as backend_mod
from . import bench as bench_mod
from . import formats
from .losses import LossConfig
from .raster import RenderOptions, render_pipeline
from .splats import SplatScene
from .synth import (OrbitSpec, build_dataset, default_lambertian_spec,
                    default_specular_spec, pixel_anchored_scene, gt_render)
from .train import (Adam, Diverged, TrainConfig, TrainLog, Variant,
                    ablation_matrix, evaluate_scene, fit_joint, fit_static,
                    fit_view, hidden_dim_variants, init_static_scene,
                    pose_param_variants, perturb_pose, pose_errors,
                    offset_component_variants, recover_poses, sh_sweep_variants,
                    CSV_FIELDS)
from .viewadapt import OffsetFlags, RefineConfig, refine_batch


class CliError(SystemExit):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):         # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(sub: argparse.ArgumentParser):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--deterministic", action="store_true", default=True,
                     help="fixed seeds and reduction order (always on; flag "
                          "recorded in the manifest)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--backend", default="auto",
                     choices=["auto", "python", "cython"])


def _train_cfg(args, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        lr=getattr(args, "lr", 1e-4),
        steps=getattr(args, "steps", 1),
        sh_degree=getattr(args, "sh_degree", 4),
        hidden_dim=getattr(args, "hidden_dim", 16),
        pose_mode=getattr(args, "pose_mode", "log"),
        seed=args.seed,
        render=RenderOptions(backend=args.backend),
    )
    return replace(cfg, **overrides) if overrides else cfg


def _manifest(args, command: str):
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    formats.write_manifest(args.out, command, payload, args.seed)


def cmd_synth(args) -> int:
    spec_fn = {"specular": default_specular_spec,
               "lambertian": default_lambertian_spec}[args.scene]
    spec = spec_fn(args.seed)
    orbit = OrbitSpec(image_size=args.image_size)
    ds = build_dataset(spec, n_train=args.n_train, n_test=args.n_test,
                       orbit=orbit, seed=args.seed)
    formats.save_dataset(ds, args.out)
    _manifest(args, "synth")
    print(f"wrote dataset with {ds.n_views} views to {args.out}")
    return 0


def cmd_fit_static(args) -> int:
    ds = formats.load_dataset(args.data)
    cfg = _train_cfg(args)
    init = init_static_scene(ds, args.sh_degree)
    log = TrainLog()
    scene = fit_static(init, ds, cfg, log=log)
    formats.save_checkpoint(os.path.join(args.out, "checkpoint.npz"), scene,
                            header={"seed": args.seed, "pose_mode": cfg.pose_mode,
                                    "offsets": cfg.enabled_offsets.names()})
    m = evaluate_scene(scene.param_arrays(), None, ds.views("test"), cfg)
    formats.dump_json({"test": m, "final_loss": log.losses[-1] if log.losses else None},
                      os.path.join(args.out, "metrics.json"))
    _manifest(args, "fit-static")
    print(f"fit-static: test psnr {m['psnr']:.3f} dB")
    return 0


def cmd_fit_view(args) -> int:
    ds = formats.load_dataset(args.data)
    ck = formats.load_checkpoint(args.base)
    offsets = OffsetFlags.from_names(args.offsets.split(",")) if args.offsets \
        else OffsetFlags()
    cfg = _train_cfg(args, enabled_offsets=offsets,
                     sh_degree=ck.scene.sh_degree)
    log = TrainLog()
    net = fit_view(ck.scene, ds, cfg, log=log)
    formats.save_checkpoint(os.path.join(args.out, "checkpoint.npz"), ck.scene,
                            hypernet=net,
                            header={"seed": args.seed, "pose_mode": cfg.pose_mode,
                                    "offsets": offsets.names()})
    m = evaluate_scene(ck.scene.param_arrays(), net, ds.views("test"), cfg)
    formats.dump_json({"test": m}, os.path.join(args.out, "metrics.json"))
    _manifest(args, "fit-view")
    print(f"fit-view: test psnr {m['psnr']:.3f} dB")
    return 0


def cmd_fit_joint(args) -> int:
    ds = formats.load_dataset(args.data)
    ck = formats.load_checkpoint(args.ckpt)
    if ck.hypernet is None:
        print("error: checkpoint has no view head; run fit-view first",
              file=sys.stderr)
        return 1
    cfg = _train_cfg(args, freeze_base=False, sh_degree=ck.scene.sh_degree,
                     hidden_dim=ck.hypernet.hidden_dim)
    log = TrainLog()
    scene, net = fit_joint(ck.scene, ck.hypernet, ds, cfg, log=log)
    formats.save_checkpoint(os.path.join(args.out, "checkpoint.npz"), scene,
                            hypernet=net, header={"seed": args.seed,
                                                  "pose_mode": cfg.pose_mode})
    m = evaluate_scene(scene.param_arrays(), net, ds.views("test"), cfg)
    formats.dump_json({"test": m}, os.path.join(args.out, "metrics.json"))
    _manifest(args, "fit-joint")
    print(f"fit-joint: test psnr {m['psnr']:.3f} dB")
    return 0


def cmd_recover_poses(args) -> int:
    ds = formats.load_dataset(args.data)
    scene = pixel_anchored_scene(ds.spec, ds.rig, pixel_stride=args.pixel_stride)
    # self-consistent images: rendered from this very scene at the true poses
    opts = RenderOptions(backend=args.backend)
    images = []
    for pose, cam in zip(ds.rig.poses, ds.rig.cams):
        img, _ = render_pipeline(scene.param_arrays(), pose.R, pose.t, cam, opts)
        images.append(np.clip(img, 0.0, 1.0))
    ds.images = images

    rng = np.random.default_rng(args.seed)
    train_idx = ds.rig.indices("train")
    gt_poses = [ds.rig.poses[i] for i in train_idx]
    init = [perturb_pose(p, rng, args.max_rot_deg, args.max_trans)
            for p in gt_poses]
    cfg = _train_cfg(args, loss=LossConfig())
    recovered = recover_poses(scene, ds, cfg, init,
                              render_weight=args.render_weight)
    rows = []
    for gt, est, start in zip(gt_poses, recovered, init):
        r0, t0 = pose_errors(start, gt)
        r1, t1 = pose_errors(est, gt)
        rows.append({"rot_err_init_deg": r0, "trans_err_init": t0,
                     "rot_err_deg": r1, "trans_err": t1})
    formats.dump_json({"poses": rows}, os.path.join(args.out, "pose_errors.json"))
    _manifest(args, "recover-poses")
    worst_r = max(r["rot_err_deg"] for r in rows)
    worst_t = max(r["trans_err"] for r in rows)
    print(f"recover-poses: worst rotation {worst_r:.4f} deg, "
          f"worst translation {worst_t:.2e}")
    return 0


def cmd_render(args) -> int:
    ck = formats.load_checkpoint(args.ckpt)
    rig = formats.load_cameras(args.cameras)
    opts = RenderOptions(backend=args.backend)
    os.makedirs(args.out, exist_ok=True)
    scene_arrays = ck.scene.param_arrays()
    use_head = ck.hypernet is not None and not args.static_only
    for i, (pose, cam) in enumerate(zip(rig.poses, rig.cams)):
        params = scene_arrays
        if use_head:
            rc = RefineConfig.for_hypernet(ck.hypernet)
            params = refine_batch(scene_arrays, ck.hypernet.param_arrays(),
                                  pose.R, pose.t, rc)
        img, _ = render_pipeline(params, pose.R, pose.t, cam, opts)
        img = np.clip(img, 0.0, 1.0)
        formats.save_image_float(img, os.path.join(args.out, f"render_{i:03d}.npy"))
        formats.save_image_png(img, os.path.join(args.out, f"render_{i:03d}.png"))
    _manifest(args, "render")
    print(f"rendered {len(rig)} views to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ck = formats.load_checkpoint(args.ckpt)
    ds = formats.load_dataset(args.data)
    cfg = _train_cfg(args, sh_degree=ck.scene.sh_degree)
    rows = []
    for split in args.splits.split(","):
        m = evaluate_scene(ck.scene.param_arrays(), ck.hypernet,
                           ds.views(split), cfg)
        rows.append({"scene": os.path.basename(args.data.rstrip("/")),
                     "variant": "checkpoint",
                     "sh_degree": ck.scene.sh_degree,
                     "hidden_dim": ck.hypernet.hidden_dim if ck.hypernet else 0,
                     "pose_mode": ck.header.get("pose_mode", "log"),
                     "offsets": "+".join(ck.header.get("offsets", [])) or "none",
                     "split": split, **m, "fit_seconds": 0.0, "render_fps": 0.0,
                     "error": ""})
    _write_csv(os.path.join(args.out, "metrics.csv"), rows)
    _manifest(args, "eval")
    for r in rows:
        print(f"eval[{r['split']}]: psnr {r['psnr']:.3f} ssim {r['ssim']:.4f}")
    return 0


def _write_csv(path: str, rows: list[dict]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cmd_ablate(args) -> int:
    ds = formats.load_dataset(args.data)
    cfg = _train_cfg(args)
    variants: list[Variant] = []
    if args.offsets:
        flags = OffsetFlags.from_names(args.offsets.split(","))
        variants.append(Variant("offsets_" + args.offsets.replace(",", "+"),
                                offsets=flags))
    if args.offset_sweep:
        variants.extend(offset_component_variants())
    if args.sh_degree_sweep:
        degrees = tuple(int(d) for d in args.sh_degree_sweep.split(","))
        variants.extend(sh_sweep_variants(degrees))
    if args.pose_param:
        variants.extend([v for v in pose_param_variants()
                         if v.pose_mode in args.pose_param.split(",")])
    if args.hidden_dim_sweep:
        dims = tuple(int(d) for d in args.hidden_dim_sweep.split(","))
        variants.extend(hidden_dim_variants(dims))
    if not variants:
        print("error: no ablation selected (use --offsets/--offset-sweep/"
              "--sh-degree-sweep/--pose-param/--hidden-dim-sweep)",
              file=sys.stderr)
        return 1
    init = init_static_scene(ds, cfg.sh_degree)
    base = fit_static(init, ds, replace(cfg, steps=args.base_steps))
    rows = ablation_matrix(ds, base, variants, cfg,
                           init_scene_fn=lambda d: init_static_scene(ds, d))
    _write_csv(os.path.join(args.out, "ablation.csv"), rows)
    _manifest(args, "ablate")
    print(f"wrote {len(rows)} ablation rows")
    return 0


def cmd_bench(args) -> int:
    ck = formats.load_checkpoint(args.ckpt)
    rig = formats.load_cameras(args.cameras)
    pose, cam = rig.poses[0], rig.cams[0]
    report = bench_mod.bench_report(
        ck.scene, ck.hypernet, pose, cam,
        RenderOptions(backend=args.backend),
        repeats=args.repeats, warmup=args.warmup,
        compare_backends=args.compare_backends)
    formats.dump_json(report, os.path.join(args.out, "bench.json"))
    _manifest(args, "bench")
    for name, vals in report["backends"].items():
        print(f"bench[{name}]: {vals['fps']:.2f} fps "
              f"({vals['refine_render_s'] * 1e3:.2f} ms/frame)")
    if "weight_generation_s" in report:
        print(f"weight generation: {report['weight_generation_s'] * 1e3:.3f} ms")
    return 0


def build_parser() -> Parser:
    p = Parser(prog="dynsplat",
               description="View-adaptive dynamic Gaussian splatting engine")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(s)
    s.add_argument("--scene", choices=["specular", "lambertian"],
                   default="specular")
    s.add_argument("--n-train", type=int, default=10)
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--image-size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-static", help="fit the static base scene")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--lr", type=float, default=5e-3)
    s.add_argument("--sh-degree", type=int, default=4)
    s.set_defaults(func=cmd_fit_static)

    s = sub.add_parser("fit-view", help="fit the view head on a frozen base")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--base", required=True, help="fit-static checkpoint")
    s.add_argument("--steps", type=int, default=800)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--hidden-dim", type=int, default=16)
    s.add_argument("--pose-mode", choices=["log", "linear"], default="log")
    s.add_argument("--offsets", default="",
                   help="comma list of mu,alpha,rot,scale,sh (default all)")
    s.set_defaults(func=cmd_fit_view)

    s = sub.add_parser("fit-joint", help="unfreeze and fine-tune everything")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=2e-3,
                   help="base rate; scaled by 0.1 inside fit-joint")
    s.set_defaults(func=cmd_fit_joint)

    s = sub.add_parser("recover-poses",
                       help="recover perturbed camera poses on a pixel-anchored scene")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=1500)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--max-rot-deg", type=float, default=5.0)
    s.add_argument("--max-trans", type=float, default=0.15)
    s.add_argument("--pixel-stride", type=int, default=4)
    s.add_argument("--render-weight", type=float, default=1.0)
    s.set_defaults(func=cmd_recover_poses)

    s = sub.add_parser("render", help="render a checkpoint at given cameras")
    _common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--static-only", action="store_true",
                   help="bypass the view head")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="metrics over a dataset split")
    _common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--splits", default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run ablation rows, emit CSV")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=400)
    s.add_argument("--base-steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--sh-degree", type=int, default=4)
    s.add_argument("--offsets", default="")
    s.add_argument("--offset-sweep", action="store_true",
                   help="run all six offset-component combinations")
    s.add_argument("--sh-degree-sweep", default="")
    s.add_argument("--pose-param", default="")
    s.add_argument("--hidden-dim-sweep", default="")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", help="inference/render timing")
    _common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--compare-backends", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2
    except (formats.SchemaError, formats.MalformedPly, formats.UnsupportedLayout,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
