"""View-adaptive refinement: a shared hypernetwork generates one tiny MLP per
Gaussian from a learned per-Gaussian context feature; given a target pose the
MLP maps the 4D view feature (unit direction + log distance) to residual
offsets on every Gaussian attribute, applied before rasterization.

The generator's last layer is zero-initialized, so a fresh model refines
nothing: rendering the refined scene equals rendering the base scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .geometry import PoseW2C, pose_features
from .splats import SplatScene, GaussianPrimitive, num_sh_coeffs

ROT_FALLBACK_NORM = 1e-8


class SizeMismatch(ValueError):
    """Scene and hypernetwork disagree on the primitive count."""


@dataclass(frozen=True)
class OffsetFlags:
    """Which offset components the refinement applies (ablation switches)."""

    mu: bool = True
    alpha: bool = True
    rot: bool = True
    scale: bool = True
    sh: bool = True

    @staticmethod
    def none() -> "OffsetFlags":
        return OffsetFlags(False, False, False, False, False)

    @staticmethod
    def from_names(names) -> "OffsetFlags":
        valid = {"mu", "alpha", "rot", "scale", "sh"}
        names = set(names)
        unknown = names - valid
        if unknown:
            raise ValueError(f"unknown offset component(s): {sorted(unknown)}")
        return OffsetFlags(**{k: k in names for k in valid})

    def names(self) -> list[str]:
        return [k for k in ("mu", "alpha", "rot", "scale", "sh") if getattr(self, k)]


@dataclass
class ViewMlpWeights:
    """Parameters of one per-Gaussian view MLP (single hidden layer)."""

    W1: np.ndarray   # (D, 4)
    b1: np.ndarray   # (D,)
    W2: np.ndarray   # (M, D)
    b2: np.ndarray   # (M,)

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]


@dataclass
class OffsetVector:
    """Residual offsets for one Gaussian at one target view."""

    d_mu: np.ndarray        # (3,)
    d_alpha: float          # logit space
    d_rot: np.ndarray       # (4,)
    d_scale: np.ndarray     # (3,) log space
    d_sh: np.ndarray        # (3, K_off)


def mlp_out_dim(sh_coeffs: int) -> int:
    """M = 3 (mu) + 1 (alpha) + 4 (rot) + 3 (scale) + 3*K (sh)."""
    return 11 + 3 * sh_coeffs


def theta_size(hidden_dim: int, out_dim: int) -> int:
    return hidden_dim * 4 + hidden_dim + out_dim * hidden_dim + out_dim


class HyperNet:
    """Learned per-Gaussian context features + the shared weight generator.

    generator: context (F) -> hidden (H, ReLU) -> flat view-MLP parameters.
    The generator's last layer is zero, so the generated theta starts exactly
    at zero for every Gaussian. The view MLP's first layer additionally
    carries a shared trainable template (random init) that the generated
    residuals modulate; without it an exact-zero ReLU MLP blocks every
    gradient path except the constant bias and view dependence can never
    emerge. The output layer has no template, so initial offsets are exactly
    zero and a fresh model renders identically to the base scene.

    `sh_offset_mode` is "full" (offsets span all K SH coefficients) or "dc"
    (DC band only, M = 14), which keeps theta small for large sweeps.
    """

    def __init__(self, n_gaussians: int, sh_degree: int, hidden_dim: int = 16,
                 context_dim: int = 32, gen_hidden: int = 64,
                 sh_offset_mode: str = "full", seed: int = 0,
                 positions: np.ndarray | None = None):
        if sh_offset_mode not in ("full", "dc"):
            raise ValueError(f"unknown sh_offset_mode {sh_offset_mode!r}")
        self.n_gaussians = n_gaussians
        self.sh_degree = sh_degree
        self.hidden_dim = hidden_dim
        self.context_dim = context_dim
        self.gen_hidden = gen_hidden
        self.sh_offset_mode = sh_offset_mode
        self.sh_offset_coeffs = num_sh_coeffs(sh_degree) if sh_offset_mode == "full" else 1
        self.out_dim = mlp_out_dim(self.sh_offset_coeffs)
        self.theta_dim = theta_size(hidden_dim, self.out_dim)

        rng = np.random.default_rng(seed)
        if positions is not None:
            # spatially smooth context init: nearby Gaussians start with
            # similar features, so the generator shares view responses across
            # a surface patch instead of memorizing splats independently
            pos = np.asarray(positions, dtype=np.float64)
            scale = pos.std(axis=0).mean() + 1e-9
            proj = rng.normal(0.0, 1.0 / scale, (3, context_dim))
            phase = rng.uniform(0.0, 2.0 * np.pi, context_dim)
            self.context_features = np.sin(pos @ proj + phase)
        else:
            self.context_features = rng.normal(0.0, 1.0, (n_gaussians, context_dim))
        self.gen_W1 = rng.normal(0.0, 1.0 / np.sqrt(context_dim),
                                 (gen_hidden, context_dim))
        self.gen_b1 = np.full(gen_hidden, 0.1)
        # zero last layer: generated view MLPs start exactly at zero
        self.gen_W2 = np.zeros((self.theta_dim, gen_hidden))
        self.gen_b2 = np.zeros(self.theta_dim)
        # shared first-layer template of the view MLPs
        self.tpl_W1 = rng.normal(0.0, 0.8, (hidden_dim, 4))
        self.tpl_b1 = rng.normal(0.0, 0.4, hidden_dim) + 0.2

    PARAM_NAMES = ("context_features", "gen_W1", "gen_b1", "gen_W2", "gen_b2",
                   "tpl_W1", "tpl_b1")

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def config_dict(self) -> dict:
        return {
            "n_gaussians": self.n_gaussians,
            "sh_degree": self.sh_degree,
            "hidden_dim": self.hidden_dim,
            "context_dim": self.context_dim,
            "gen_hidden": self.gen_hidden,
            "sh_offset_mode": self.sh_offset_mode,
        }

    @staticmethod
    def from_arrays(config: dict, arrays: dict) -> "HyperNet":
        net = HyperNet(**config)
        for name in HyperNet.PARAM_NAMES:
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != getattr(net, name).shape:
                raise ValueError(f"hypernet array {name} has shape {value.shape}, "
                                 f"expected {getattr(net, name).shape}")
            setattr(net, name, value)
        return net

    def copy(self) -> "HyperNet":
        return HyperNet.from_arrays(self.config_dict(),
                                    {k: v.copy() for k, v in self.param_arrays().items()})


# ---------------------------------------------------------------------------
# Weight generation and the view MLP forward pass (batched, autodiff-capable)
# ---------------------------------------------------------------------------

def generate_theta(params: dict, indices=None):
    """Flat view-MLP parameter vectors for the selected Gaussians.

    `params` maps HyperNet.PARAM_NAMES to arrays or Tensors. Returns (N, P).
    """
    ctx = params["context_features"]
    if indices is not None:
        ctx = ctx[np.asarray(indices, dtype=np.intp)]
    w1t = params["gen_W1"].swapaxes(0, 1) if ad.is_tensor(params["gen_W1"]) \
        else params["gen_W1"].T
    hidden = ad.relu(ad.matmul(ctx, w1t) + params["gen_b1"])
    w2t = params["gen_W2"].swapaxes(0, 1) if ad.is_tensor(params["gen_W2"]) \
        else params["gen_W2"].T
    return ad.matmul(hidden, w2t) + params["gen_b2"]


def generate_weights(hypernet: HyperNet, indices) -> list[ViewMlpWeights]:
    """Effective per-Gaussian view MLP weights (template + generated residual)."""
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= hypernet.n_gaussians):
        raise IndexError("gaussian index out of range")
    theta = generate_theta(hypernet.param_arrays(), indices)
    d, m = hypernet.hidden_dim, hypernet.out_dim
    out = []
    for row in theta:
        w = unpack_theta(row.copy(), d, m)
        w.W1 = w.W1 + hypernet.tpl_W1
        w.b1 = w.b1 + hypernet.tpl_b1
        out.append(w)
    return out


def unpack_theta(theta: np.ndarray, hidden_dim: int, out_dim: int) -> ViewMlpWeights:
    d, m = hidden_dim, out_dim
    o1 = 4 * d
    o2 = o1 + d
    o3 = o2 + m * d
    return ViewMlpWeights(
        W1=theta[:o1].reshape(d, 4),
        b1=theta[o1:o2],
        W2=theta[o2:o3].reshape(m, d),
        b2=theta[o3:],
    )


def pack_weights(w: ViewMlpWeights) -> np.ndarray:
    return np.concatenate([w.W1.ravel(), w.b1, w.W2.ravel(), w.b2])


def mlp_forward_batch(theta, feats, hidden_dim: int, out_dim: int,
                      tpl_w1=None, tpl_b1=None):
    """Run every per-Gaussian MLP on its 4D view feature.

    theta: (N, P); feats: (N, 4) or (V, N, 4) for a pose batch. Hidden
    activation is ReLU; the optional first-layer template adds to the
    generated weights. Returns (N, M) or (V, N, M).
    """
    d, m = hidden_dim, out_dim
    o1, o2, o3 = 4 * d, 5 * d, 5 * d + m * d
    n = ad.asdata(theta).shape[0]
    w1 = ad.reshape(theta[:, :o1], (n, d, 4))
    b1 = theta[:, o1:o2]
    if tpl_w1 is not None:
        w1 = w1 + tpl_w1
        b1 = b1 + tpl_b1
    w2 = ad.reshape(theta[:, o2:o3], (n, m, d))
    b2 = theta[:, o3:]
    hidden = ad.relu(ad.bmv(w1, feats) + b1)
    return ad.bmv(w2, hidden) + b2


# raw MLP outputs are O(1); these fixed factors put each residual on its
# attribute's natural step scale (positions react far more violently than
# colors, as in the usual per-attribute splat learning rates)
DEFAULT_OFFSET_GAINS = {"mu": 0.02, "alpha": 0.5, "rot": 0.05,
                        "scale": 0.05, "sh": 0.5}


def offset_mask(flags: OffsetFlags, sh_coeffs: int,
                gains: dict | None = None) -> np.ndarray:
    """(M,) per-component scale vector; disabled components are zero."""
    gains = DEFAULT_OFFSET_GAINS if gains is None else gains
    mask = np.zeros(mlp_out_dim(sh_coeffs))
    if flags.mu:
        mask[0:3] = gains["mu"]
    if flags.alpha:
        mask[3] = gains["alpha"]
    if flags.rot:
        mask[4:8] = gains["rot"]
    if flags.scale:
        mask[8:11] = gains["scale"]
    if flags.sh:
        mask[11:] = gains["sh"]
    return mask


def split_offsets(out, sh_coeffs: int):
    """Slice the MLP output (..., M) into named offset blocks."""
    lead = ad.asdata(out).shape[:-1]
    return {
        "d_mu": out[..., 0:3],
        "d_alpha": out[..., 3],
        "d_rot": out[..., 4:8],
        "d_scale": out[..., 8:11],
        "d_sh": ad.reshape(out[..., 11:], lead + (3, sh_coeffs)),
    }


def view_mlp_forward(theta: ViewMlpWeights, feat) -> OffsetVector:
    """Offsets for a single Gaussian; `feat` is a ViewFeature4D."""
    flat = pack_weights(theta)
    x = feat.vec4() if hasattr(feat, "vec4") else np.asarray(feat, dtype=np.float64)
    out = mlp_forward_batch(flat[None, :], x[None, :],
                            theta.hidden_dim, theta.out_dim)
    parts = split_offsets(out, (theta.out_dim - 11) // 3)
    return OffsetVector(
        d_mu=parts["d_mu"][0],
        d_alpha=float(parts["d_alpha"][0]),
        d_rot=parts["d_rot"][0],
        d_scale=parts["d_scale"][0],
        d_sh=parts["d_sh"][0],
    )


# ---------------------------------------------------------------------------
# Residual application
# ---------------------------------------------------------------------------

def apply_offsets_batch(params: dict, offsets: dict, offset_space: str = "preactivation"):
    """Element-wise residual addition on (N, ...) attribute groups.

    `params` needs keys mu, rot, log_scale, logit_opacity, sh. Offsets for
    opacity and scale are added in logit/log space ("preactivation") so the
    refined values stay valid; "raw-clamped" adds in activated space and
    clamps, kept for comparison runs.
    """
    mu = params["mu"] + offsets["d_mu"]
    rot_cand = params["rot"] + offsets["d_rot"]
    cand_norm = np.linalg.norm(ad.asdata(rot_cand), axis=-1)
    bad = cand_norm < ROT_FALLBACK_NORM
    if np.any(bad):
        rot_cand = ad.where(bad[..., None], params["rot"], rot_cand)
    rot = rot_cand / ad.norm(rot_cand, axis=-1, keepdims=True)

    if offset_space == "preactivation":
        logit_opacity = params["logit_opacity"] + offsets["d_alpha"]
        log_scale = params["log_scale"] + offsets["d_scale"]
    elif offset_space == "raw-clamped":
        op = ad.clip(ad.sigmoid(params["logit_opacity"]) + offsets["d_alpha"],
                     1e-6, 1.0 - 1e-6)
        logit_opacity = ad.log(op / (1.0 - op))
        sc = ad.clip(ad.exp(params["log_scale"]) + offsets["d_scale"], 1e-9, np.inf)
        log_scale = ad.log(sc)
    else:
        raise ValueError(f"unknown offset_space {offset_space!r}")

    k_off = ad.asdata(offsets["d_sh"]).shape[-1]
    k = ad.asdata(params["sh"]).shape[-1]
    if k_off == k:
        sh = params["sh"] + offsets["d_sh"]
    else:   # dc-only offsets touch just the first coefficient band
        dc = params["sh"][..., :k_off] + offsets["d_sh"]
        rest = params["sh"][..., k_off:]
        extra = ad.asdata(dc).ndim - ad.asdata(rest).ndim
        if extra > 0:   # pose-batched offsets: broadcast the untouched bands
            rest = rest * np.ones((ad.asdata(dc).shape[0],) + (1,) * ad.asdata(rest).ndim)
        sh = ad.concatenate([dc, rest], axis=-1)
    return {"mu": mu, "rot": rot, "log_scale": log_scale,
            "logit_opacity": logit_opacity, "sh": sh}


def apply_offsets(g: GaussianPrimitive, o: OffsetVector,
                  offset_space: str = "preactivation") -> GaussianPrimitive:
    """Refine one Gaussian; total for any finite offsets."""
    params = {"mu": g.mu[None], "rot": g.rot[None], "log_scale": g.log_scale[None],
              "logit_opacity": np.array([g.logit_opacity]), "sh": g.sh[None]}
    offs = {"d_mu": np.asarray(o.d_mu)[None], "d_alpha": np.array([o.d_alpha]),
            "d_rot": np.asarray(o.d_rot)[None], "d_scale": np.asarray(o.d_scale)[None],
            "d_sh": np.asarray(o.d_sh)[None]}
    out = apply_offsets_batch(params, offs, offset_space)
    return GaussianPrimitive(out["mu"][0], out["rot"][0], out["log_scale"][0],
                             float(out["logit_opacity"][0]), out["sh"][0])


# ---------------------------------------------------------------------------
# Scene-level refinement
# ---------------------------------------------------------------------------

def refine_batch(scene_params: dict, hyper_params: dict, pose_r, pose_t,
                 cfg: "RefineConfig", theta=None, return_offsets=False):
    """Pose-conditioned refinement of all Gaussians (arrays or Tensors).

    The 4D pose feature is computed from the *base* centers; refinement is
    single-shot (no iteration on refined centers). `theta` can carry
    pre-generated view-MLP parameters: they are pose-independent, so one
    generator pass serves every view of a training step. With
    `return_offsets` the scaled offset matrix comes back too (regularizers).
    """
    u, l = pose_features(scene_params["mu"], pose_r, pose_t, cfg.pose_mode)
    shp = ad.asdata(l).shape + (1,)
    feats = ad.concatenate([u, ad.reshape(l, shp)], axis=-1)
    if theta is None:
        theta = generate_theta(hyper_params)
    out = mlp_forward_batch(theta, feats, cfg.hidden_dim, cfg.out_dim,
                            tpl_w1=hyper_params.get("tpl_W1"),
                            tpl_b1=hyper_params.get("tpl_b1"))
    out = out * offset_mask(cfg.flags, cfg.sh_offset_coeffs, cfg.offset_gains)
    offsets = split_offsets(out, cfg.sh_offset_coeffs)
    refined = apply_offsets_batch(scene_params, offsets, cfg.offset_space)
    return (refined, out) if return_offsets else refined


@dataclass(frozen=True)
class RefineConfig:
    hidden_dim: int
    out_dim: int
    sh_offset_coeffs: int
    flags: OffsetFlags = field(default_factory=OffsetFlags)
    pose_mode: str = "log"
    offset_space: str = "preactivation"
    offset_gains: dict | None = None      # None: DEFAULT_OFFSET_GAINS

    @staticmethod
    def for_hypernet(net: HyperNet, flags: OffsetFlags | None = None,
                     pose_mode: str = "log",
                     offset_space: str = "preactivation",
                     offset_gains: dict | None = None) -> "RefineConfig":
        return RefineConfig(hidden_dim=net.hidden_dim, out_dim=net.out_dim,
                            sh_offset_coeffs=net.sh_offset_coeffs,
                            flags=flags if flags is not None else OffsetFlags(),
                            pose_mode=pose_mode, offset_space=offset_space,
                            offset_gains=offset_gains)


def refine_scene(scene: SplatScene, hypernet: HyperNet, target_pose: PoseW2C,
                 flags: OffsetFlags | None = None, pose_mode: str = "log",
                 offset_space: str = "preactivation") -> SplatScene:
    """Refined copy of `scene` for one target pose."""
    if hypernet.n_gaussians != len(scene):
        raise SizeMismatch(f"hypernet built for {hypernet.n_gaussians} Gaussians, "
                           f"scene has {len(scene)}")
    cfg = RefineConfig.for_hypernet(hypernet, flags, pose_mode, offset_space)
    refined = refine_batch(scene.param_arrays(), hypernet.param_arrays(),
                           target_pose.R, target_pose.t, cfg)
    return SplatScene(refined["mu"], refined["rot"], refined["log_scale"],
                      refined["logit_opacity"], refined["sh"],
                      context_features=scene.context_features,
                      provenance=scene.provenance)
