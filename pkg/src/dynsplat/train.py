"""Optimization loops: static base fit, frozen-base view-head fit, joint
fine-tuning (all rates scaled by 0.1), free-pose recovery, and the ablation
matrix. Deterministic by construction: fixed seeds, no wall-clock entropy,
single-threaded numpy updates in a fixed leaf order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .geometry import PoseW2C, rotation_from_6d, rotation_to_6d
from .losses import LossConfig, render_loss, reprojection_loss, metrics
from .raster import RenderOptions, render_pipeline, render_views
from .splats import SplatScene
from .synth import SyntheticDataset, blinn_phong, surfel_scene
from .geometry import camera_center
from .viewadapt import (HyperNet, OffsetFlags, RefineConfig, generate_theta,
                        refine_batch)


class Diverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_finetune_scale: float = 0.1
    steps: int = 1
    batch: int | None = None          # views per step; None = all train views
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_base: bool = True
    enabled_offsets: OffsetFlags = field(default_factory=OffsetFlags)
    pose_mode: str = "log"
    hidden_dim: int = 16
    sh_degree: int = 4
    seed: int = 0
    context_dim: int = 8      # desk-scale: small shared contexts generalize
    gen_hidden: int = 32
    sh_offset_mode: str = "full"
    offset_space: str = "preactivation"
    offset_reg: float = 1e-3      # L2 shrinkage on predicted offsets
    loss: LossConfig = field(default_factory=LossConfig)
    render: RenderOptions = field(default_factory=RenderOptions)
    eval_every: int = 50
    divergence_psnr_drop: float = 10.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)    # (step, held-out psnr)
    seconds: float = 0.0
    stopped_early: bool = False


class Adam:
    """Textbook Adam with bias correction, on ParamSet leaves."""

    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for name in self.m:
            out[f"m__{name}"] = self.m[name]
            out[f"v__{name}"] = self.v[name]
        return out


# ---------------------------------------------------------------------------
# Shared loop machinery
# ---------------------------------------------------------------------------

def _view_batches(n_views: int, batch: int | None, steps: int, seed: int):
    """Deterministic per-step view index lists."""
    if batch is None or batch >= n_views:
        idx = list(range(n_views))
        for _ in range(steps):
            yield idx
        return
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch:
            order.extend(rng.permutation(n_views).tolist())
        take, order = order[:batch], order[batch:]
        yield take


def _scene_paramset(scene: SplatScene) -> ParamSet:
    ps = ParamSet()
    for name, arr in scene.param_arrays().items():
        ps.add(name, Tensor(arr.copy()))
    return ps


def _hyper_paramset(net: HyperNet) -> ParamSet:
    ps = ParamSet()
    for name, arr in net.param_arrays().items():
        ps.add(name, Tensor(arr.copy()))
    return ps


def _scene_from_params(ps: ParamSet, template: SplatScene) -> SplatScene:
    return SplatScene(
        ps["mu"].data.copy(), ps["rot"].data.copy(), ps["log_scale"].data.copy(),
        ps["logit_opacity"].data.copy(), ps["sh"].data.copy(),
        context_features=None if template.context_features is None
        else template.context_features.copy(),
        provenance=None if template.provenance is None
        else template.provenance.copy())


def _hyper_from_params(ps: ParamSet, template: HyperNet) -> HyperNet:
    return HyperNet.from_arrays(template.config_dict(),
                                {name: ps[name].data.copy()
                                 for name in HyperNet.PARAM_NAMES})


def _view_stacks(views):
    """(R stack, t stack, shared camera, gt stack) for homogeneous views."""
    cams = [cam for _, cam, _ in views]
    if any(c != cams[0] for c in cams[1:]):
        raise ValueError("view batch requires identical camera intrinsics")
    r_all = np.stack([pose.R for pose, _, _ in views])
    t_all = np.stack([pose.t for pose, _, _ in views])
    gt = np.stack([g for _, _, g in views])
    return r_all, t_all, cams[0], gt


def render_refined_views(scene_params: dict, hyper_params: dict | None,
                         r_all, t_all, cam, render_opts: RenderOptions,
                         rc: RefineConfig | None, theta=None,
                         return_offsets=False):
    """Refine (optionally) and render a pose batch; returns (V, H, W, 3)."""
    params = scene_params
    offsets = None
    anchor = None
    if hyper_params is not None:
        params = refine_batch(scene_params, hyper_params, r_all, t_all, rc,
                              theta=theta, return_offsets=return_offsets)
        if return_offsets:
            params, offsets = params
        if render_opts.color_dir_anchor == "base":
            anchor = scene_params["mu"]
    images, _ = render_views(params, r_all, t_all, cam, render_opts,
                             dir_anchor_mu=anchor)
    return (images, offsets) if return_offsets else images


def evaluate_scene(scene_params: dict, hyper: HyperNet | None, views,
                   cfg: TrainConfig, flags: OffsetFlags | None = None) -> dict:
    """Mean metrics over (pose, cam, gt) views, optionally with refinement."""
    r_all, t_all, cam, gt = _view_stacks(views)
    rc = None
    hyper_params = None
    if hyper is not None:
        rc = RefineConfig.for_hypernet(
            hyper, flags if flags is not None else cfg.enabled_offsets,
            cfg.pose_mode, cfg.offset_space)
        hyper_params = hyper.param_arrays()
    images = render_refined_views(scene_params, hyper_params, r_all, t_all,
                                  cam, cfg.render, rc)
    rows = [metrics(np.clip(images[v], 0.0, 1.0), gt[v])
            for v in range(len(views))]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _run_loop(cfg: TrainConfig, steps: int, train_views, forward_fn, optimizer,
              params: ParamSet, eval_fn=None, log: TrainLog | None = None):
    """Generic minimize loop with divergence handling.

    forward_fn(view_indices) -> scalar loss Tensor for the selected views.
    eval_fn() -> held-out PSNR, called every cfg.eval_every steps.
    """
    best_psnr = -np.inf
    best_state = None
    t0 = time.perf_counter()
    for step, view_idx in enumerate(_view_batches(len(train_views), cfg.batch,
                                                  steps, cfg.seed)):
        loss = forward_fn(view_idx)
        loss_val = float(ad.asdata(loss))
        if log is not None:
            log.losses.append(loss_val)
        if not math.isfinite(loss_val):
            raise Diverged(f"non-finite loss at step {step}")
        ad.backward(loss, params)
        optimizer.step()
        if eval_fn is not None and cfg.eval_every > 0 \
                and (step + 1) % cfg.eval_every == 0:
            cur = eval_fn()
            if log is not None:
                log.evals.append((step + 1, cur))
            if cur > best_psnr:
                best_psnr = cur
                best_state = {name: p.data.copy() for name, p in params}
            elif cur < best_psnr - cfg.divergence_psnr_drop:
                if log is not None:
                    log.stopped_early = True
                break
    # the best held-out checkpoint is the result (also covers the collapse
    # early-stop above); score the final iterate too
    if eval_fn is not None and best_state is not None:
        cur = eval_fn()
        if log is not None:
            log.evals.append((steps, cur))
        if cur > best_psnr:
            best_state = None        # final iterate wins
    if best_state is not None:
        for name, p in params:
            p.data[...] = best_state[name]
    if log is not None:
        log.seconds = time.perf_counter() - t0
    return params


# ---------------------------------------------------------------------------
# Fit operations
# ---------------------------------------------------------------------------

def fit_static(init_scene: SplatScene, dataset: SyntheticDataset,
               cfg: TrainConfig, log: TrainLog | None = None) -> SplatScene:
    """Optimize the Gaussian attributes only (no view head)."""
    train = dataset.views("train")
    if len(train) < 2:
        raise ValueError("need at least 2 train views")
    if cfg.steps == 0:
        return init_scene.copy()
    ps = _scene_paramset(init_scene)
    params_t = {name: ps[name] for name in SplatScene.FIELDS}
    r_tr, t_tr, cam_tr, gt_tr = _view_stacks(train)

    def forward(view_idx):
        sel = np.asarray(view_idx)
        images, _ = render_views(params_t, r_tr[sel], t_tr[sel], cam_tr,
                                 cfg.render)
        return render_loss(images, gt_tr[sel], cfg.loss)

    held = dataset.views("test")

    def heldout_psnr():
        arrs = {name: ps[name].data for name in SplatScene.FIELDS}
        return evaluate_scene(arrs, None, held, cfg)["psnr"] if held else 0.0

    opt = Adam(ps, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    _run_loop(cfg, cfg.steps, train, forward, opt, ps,
              eval_fn=heldout_psnr if held else None, log=log)
    return _scene_from_params(ps, init_scene)


def make_hypernet(scene: SplatScene, cfg: TrainConfig) -> HyperNet:
    return HyperNet(len(scene), sh_degree=scene.sh_degree,
                    hidden_dim=cfg.hidden_dim, context_dim=cfg.context_dim,
                    gen_hidden=cfg.gen_hidden, sh_offset_mode=cfg.sh_offset_mode,
                    seed=cfg.seed, positions=scene.mu)


def fit_view(base: SplatScene, dataset: SyntheticDataset, cfg: TrainConfig,
             hypernet: HyperNet | None = None,
             log: TrainLog | None = None) -> HyperNet:
    """Optimize the view-adaptive head with the base scene frozen."""
    if not cfg.freeze_base:
        raise ValueError("fit_view requires freeze_base=True; use fit_joint")
    net = hypernet if hypernet is not None else make_hypernet(base, cfg)
    if cfg.steps == 0:
        return net.copy()
    train = dataset.views("train")
    scene_arrays = base.param_arrays()          # constants: base stays frozen
    ps = _hyper_paramset(net)
    hyper_t = {name: ps[name] for name in HyperNet.PARAM_NAMES}
    rc = RefineConfig.for_hypernet(net, cfg.enabled_offsets, cfg.pose_mode,
                                   cfg.offset_space)
    r_tr, t_tr, cam_tr, gt_tr = _view_stacks(train)

    def forward(view_idx):
        sel = np.asarray(view_idx)
        theta = generate_theta(hyper_t)      # pose-independent: once per step
        images, offsets = render_refined_views(
            scene_arrays, hyper_t, r_tr[sel], t_tr[sel], cam_tr, cfg.render,
            rc, theta=theta, return_offsets=True)
        loss = render_loss(images, gt_tr[sel], cfg.loss)
        if cfg.offset_reg > 0:
            loss = loss + cfg.offset_reg * ad.mean(offsets * offsets)
        return loss

    held = dataset.views("test")

    def heldout_psnr():
        cur = _hyper_from_params(ps, net)
        return evaluate_scene(scene_arrays, cur, held, cfg)["psnr"] if held else 0.0

    opt = Adam(ps, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    _run_loop(cfg, cfg.steps, train, forward, opt, ps,
              eval_fn=heldout_psnr if held else None, log=log)
    return _hyper_from_params(ps, net)


def fit_joint(base: SplatScene, hypernet: HyperNet, dataset: SyntheticDataset,
              cfg: TrainConfig, log: TrainLog | None = None):
    """Unfreeze everything; all learning rates scaled by lr_finetune_scale."""
    if cfg.steps == 0:
        return base.copy(), hypernet.copy()
    train = dataset.views("train")
    ps = ParamSet()
    for name, arr in base.param_arrays().items():
        ps.add(name, Tensor(arr.copy()))
    for name, arr in hypernet.param_arrays().items():
        ps.add(f"hyper.{name}", Tensor(arr.copy()))
    scene_t = {name: ps[name] for name in SplatScene.FIELDS}
    hyper_t = {name: ps[f"hyper.{name}"] for name in HyperNet.PARAM_NAMES}
    rc = RefineConfig.for_hypernet(hypernet, cfg.enabled_offsets, cfg.pose_mode,
                                   cfg.offset_space)
    r_tr, t_tr, cam_tr, gt_tr = _view_stacks(train)

    def forward(view_idx):
        sel = np.asarray(view_idx)
        theta = generate_theta(hyper_t)
        images, offsets = render_refined_views(
            scene_t, hyper_t, r_tr[sel], t_tr[sel], cam_tr, cfg.render, rc,
            theta=theta, return_offsets=True)
        loss = render_loss(images, gt_tr[sel], cfg.loss)
        if cfg.offset_reg > 0:
            loss = loss + cfg.offset_reg * ad.mean(offsets * offsets)
        return loss

    held = dataset.views("test")

    def heldout_psnr():
        if not held:
            return 0.0
        arrs = {name: scene_t[name].data for name in SplatScene.FIELDS}
        cur = HyperNet.from_arrays(hypernet.config_dict(),
                                   {n: hyper_t[n].data for n in HyperNet.PARAM_NAMES})
        return evaluate_scene(arrs, cur, held, cfg)["psnr"]

    opt = Adam(ps, cfg.lr * cfg.lr_finetune_scale, cfg.beta1, cfg.beta2, cfg.eps)
    _run_loop(cfg, cfg.steps, train, forward, opt, ps,
              eval_fn=heldout_psnr if held else None, log=log)
    scene = _scene_from_params(ps, base)
    net = HyperNet.from_arrays(hypernet.config_dict(),
                               {n: ps[f"hyper.{n}"].data.copy()
                                for n in HyperNet.PARAM_NAMES})
    return scene, net


# ---------------------------------------------------------------------------
# Pose recovery
# ---------------------------------------------------------------------------

def perturb_pose(pose: PoseW2C, rng: np.random.Generator,
                 max_rot_deg: float, max_trans: float) -> PoseW2C:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.2, 1.0) * max_rot_deg)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    r_delta = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
    dt = rng.normal(size=3)
    dt *= rng.uniform(0.2, 1.0) * max_trans / np.linalg.norm(dt)
    return PoseW2C(r_delta @ pose.R, pose.t + dt)


def pose_errors(est: PoseW2C, gt: PoseW2C) -> tuple[float, float]:
    """(rotation error in degrees, translation error in scene units)."""
    cosang = (np.trace(est.R @ gt.R.T) - 1.0) / 2.0
    rot_err = math.degrees(math.acos(min(1.0, max(-1.0, cosang))))
    return rot_err, float(np.linalg.norm(est.t - gt.t))


def recover_poses(scene: SplatScene, dataset: SyntheticDataset,
                  cfg: TrainConfig, poses_init: list[PoseW2C],
                  view_indices: list[int] | None = None,
                  render_weight: float = 1.0,
                  log: TrainLog | None = None) -> list[PoseW2C]:
    """Optimize the given poses (6D rotation latent + translation) against
    the frozen scene: render_weight * render_loss + lambda_reproj * reproj."""
    if view_indices is None:
        view_indices = dataset.rig.indices("train")
    if len(poses_init) != len(view_indices):
        raise ValueError("one initial pose per optimized view")
    cams = [dataset.rig.cams[i] for i in view_indices]
    if any(c != cams[0] for c in cams[1:]):
        raise ValueError("pose recovery batch requires identical intrinsics")
    gt_stack = np.stack([dataset.images[i] for i in view_indices])
    scene_arrays = scene.param_arrays()

    ps = ParamSet()
    lat = ps.add("rot6", Tensor(np.stack([rotation_to_6d(p.R) for p in poses_init])))
    tra = ps.add("t", Tensor(np.stack([p.t for p in poses_init])))

    use_reproj = cfg.loss.lambda_reproj > 0 and scene.provenance is not None

    def forward(_):
        r_all = rotation_from_6d(lat)
        total = None
        if render_weight > 0:
            images, _ = render_views(scene_arrays, r_all, tra, cams[0],
                                     cfg.render)
            total = render_weight * render_loss(images, gt_stack, cfg.loss)
        if use_reproj:
            pose_list = [(r_all[k], tra[k]) for k in range(len(view_indices))]
            # provenance view indices refer to positions in `view_indices`
            rp = reprojection_loss(scene, pose_list, cams)
            rp = cfg.loss.lambda_reproj * rp
            total = rp if total is None else total + rp
        if total is None:
            raise ValueError("both loss terms disabled")
        return total

    opt = Adam(ps, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    base_lr = cfg.lr
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        loss = forward(None)
        val = float(ad.asdata(loss))
        if log is not None:
            log.losses.append(val)
        if not math.isfinite(val):
            raise Diverged(f"non-finite pose loss at step {step}")
        ad.backward(loss, ps)
        # converged: Adam is scale-free, so float-noise gradients at an exact
        # optimum would otherwise keep producing lr-sized steps
        if max(np.abs(lat.grad).max(), np.abs(tra.grad).max()) < 1e-9:
            break
        opt.lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, cfg.steps)))
        opt.step()
    if log is not None:
        log.seconds = time.perf_counter() - t0
    r_final = ad.asdata(rotation_from_6d(lat))
    return [PoseW2C(r_final[k], tra.data[k]) for k in range(len(view_indices))]


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    kind: str = "dynamic"                  # "static" | "dynamic"
    offsets: OffsetFlags = field(default_factory=OffsetFlags)
    sh_degree: int | None = None
    pose_mode: str = "log"
    hidden_dim: int | None = None
    steps: int | None = None


def offset_component_variants() -> list[Variant]:
    """The six offset-component combinations, from none to full."""
    f = OffsetFlags
    return [
        Variant("baseline_static", kind="static", offsets=f.none()),
        Variant("mu_alpha_only", offsets=f(True, True, False, False, False)),
        Variant("rsc_only", offsets=f(False, False, True, True, True)),
        Variant("no_alpha", offsets=f(True, False, True, True, True)),
        Variant("no_mu", offsets=f(False, True, True, True, True)),
        Variant("full", offsets=f()),
    ]


def sh_sweep_variants(degrees=(0, 2, 4, 8), dynamic_degree: int = 4) -> list[Variant]:
    rows = [Variant(f"static_deg{d}", kind="static", sh_degree=d) for d in degrees]
    rows.append(Variant(f"dynamic_deg{dynamic_degree}", sh_degree=dynamic_degree))
    return rows


def pose_param_variants() -> list[Variant]:
    return [Variant("pose_log", pose_mode="log"),
            Variant("pose_linear", pose_mode="linear")]


def hidden_dim_variants(dims=(4, 8, 16)) -> list[Variant]:
    return [Variant(f"hidden_d{d}", hidden_dim=d) for d in dims]


def _bench_render_fps(scene_arrays, hyper: HyperNet | None, pose, cam,
                      cfg: TrainConfig, flags: OffsetFlags, reps: int = 5) -> float:
    times = []
    for _ in range(reps + 1):
        t0 = time.perf_counter()
        params = scene_arrays
        if hyper is not None:
            rc = RefineConfig.for_hypernet(hyper, flags, cfg.pose_mode,
                                           cfg.offset_space)
            params = refine_batch(scene_arrays, hyper.param_arrays(),
                                  pose.R, pose.t, rc)
        render_pipeline(params, pose.R, pose.t, cam, cfg.render)
        times.append(time.perf_counter() - t0)
    return 1.0 / float(np.median(times[1:]))


def ablation_matrix(dataset: SyntheticDataset, base: SplatScene,
                    variants: list[Variant], cfg: TrainConfig,
                    init_scene_fn=None) -> list[dict]:
    """Fit each variant (reusing `base` whenever its degree matches) and emit
    one row per variant and split. A Diverged row is recorded, not raised."""
    rows = []
    scene_name = f"seed{dataset.spec.seed}"
    for var in variants:
        steps = var.steps if var.steps is not None else cfg.steps
        vcfg = replace(
            cfg, steps=steps, enabled_offsets=var.offsets,
            pose_mode=var.pose_mode,
            hidden_dim=cfg.hidden_dim if var.hidden_dim is None else var.hidden_dim,
            sh_degree=cfg.sh_degree if var.sh_degree is None else var.sh_degree)
        log = TrainLog()
        err = ""
        hyper = None
        scene = base
        try:
            if var.kind == "static":
                if var.sh_degree is not None and var.sh_degree != base.sh_degree:
                    if init_scene_fn is None:
                        raise ValueError("sh sweep needs init_scene_fn")
                    scene = fit_static(init_scene_fn(var.sh_degree), dataset,
                                       vcfg, log=log)
                # static at the base degree: reuse the shared base as-is
            else:
                hyper = fit_view(scene, dataset, vcfg, log=log)
        except Diverged as exc:
            err = str(exc)
        scene_arrays = scene.param_arrays()
        test_pose, test_cam, _ = dataset.views("test")[0]
        fps = _bench_render_fps(scene_arrays, hyper, test_pose, test_cam,
                                vcfg, var.offsets) if not err else 0.0
        for split in ("train", "test"):
            if err:
                m = {"psnr": float("nan"), "ssim": float("nan"),
                     "mse": float("nan")}
            else:
                m = evaluate_scene(scene_arrays, hyper, dataset.views(split),
                                   vcfg, var.offsets)
            rows.append({
                "scene": scene_name,
                "variant": var.name,
                "sh_degree": vcfg.sh_degree,
                "hidden_dim": vcfg.hidden_dim if var.kind == "dynamic" else 0,
                "pose_mode": var.pose_mode,
                "offsets": "+".join(var.offsets.names()) or "none",
                "split": split,
                "psnr": m["psnr"],
                "ssim": m["ssim"],
                "mse": m["mse"],
                "fit_seconds": log.seconds,
                "render_fps": fps,
                "error": err,
            })
    return rows


CSV_FIELDS = ["scene", "variant", "sh_degree", "hidden_dim", "pose_mode",
              "offsets", "split", "psnr", "ssim", "mse", "fit_seconds",
              "render_fps", "error"]


# ---------------------------------------------------------------------------
# Static initialization from surfels
# ---------------------------------------------------------------------------

def init_static_scene(dataset: SyntheticDataset, sh_degree: int) -> SplatScene:
    """Surfel-anchored starting scene: DC color = mean shaded color over the
    train views (the static least-squares optimum for band 0)."""
    spec = dataset.spec
    train = dataset.rig.views("train")
    colors = np.mean([
        blinn_phong(dataset.surfels, dataset.light, camera_center(pose),
                    spec.specular_exponent, spec.specular_strength, spec.ambient)
        for pose, _ in train], axis=0)
    return surfel_scene(dataset.surfels, colors, sh_degree)
