"""Training objectives and image-quality metrics.

The render loss pairs MSE with a perceptual term weighted 0.05. The
perceptual slot defaults to (1 - SSIM)/2 (a pretrained perceptual network is
deliberately out of scope); "none" disables it. The reprojection loss ties
each Gaussian to the pixel it originated from, projected under the current
pose estimate, weighted 0.001 in the total objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel, PoseW2C, project_points
from .splats import SplatScene

PSNR_CAP_DB = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class ShapeMismatch(ValueError):
    """Prediction and ground truth differ in shape."""


class MissingProvenance(ValueError):
    """Scene lacks the per-primitive (view, pixel) origin records."""


class PrimBehindCamera(ValueError):
    """A primitive projects behind its provenance camera."""


@dataclass(frozen=True)
class LossConfig:
    lambda_perceptual: float = 0.05
    lambda_reproj: float = 0.001
    perceptual_kind: str = "ssim_based"   # or "none"

    def __post_init__(self):
        if self.lambda_perceptual < 0 or self.lambda_reproj < 0:
            raise ValueError("loss weights must be non-negative")
        if self.perceptual_kind not in ("ssim_based", "none"):
            raise ValueError(f"unknown perceptual kind {self.perceptual_kind!r}")


def _check_shapes(pred, gt):
    ps, gs = ad.asdata(pred).shape, ad.asdata(gt).shape
    if ps != gs:
        raise ShapeMismatch(f"prediction {ps} vs ground truth {gs}")


def mse(pred, gt):
    _check_shapes(pred, gt)
    diff = pred - gt
    return ad.mean(diff * diff)


def _blur_matrix(n: int, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """Banded matrix applying a 1D Gaussian blur with zero padding ('same')."""
    half = window // 2
    taps = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * sigma * sigma))
    taps /= taps.sum()
    mat = np.zeros((n, n))
    for off, tap in zip(range(-half, half + 1), taps):
        mat += tap * np.eye(n, k=off)
    return mat


_BLUR_CACHE: dict[int, np.ndarray] = {}


def _blur(img2d, n_rows: int, n_cols: int):
    for n in (n_rows, n_cols):
        if n not in _BLUR_CACHE:
            _BLUR_CACHE[n] = _blur_matrix(n)
    return ad.matmul(ad.matmul(_BLUR_CACHE[n_rows], img2d), _BLUR_CACHE[n_cols].T)


def _channels_first(img):
    """(..., H, W, C) -> (..., C, H, W) for batched blur matmuls."""
    x = img.swapaxes(-1, -3) if ad.is_tensor(img) else np.swapaxes(img, -1, -3)
    return x.swapaxes(-1, -2) if ad.is_tensor(x) else np.swapaxes(x, -1, -2)


def ssim(pred, gt):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01/K2=0.03, per
    channel); differentiable when inputs are Tensors. Accepts one image
    (H, W, C) or a stack (V, H, W, C); the mean runs over everything."""
    _check_shapes(pred, gt)
    shape = ad.asdata(pred).shape
    h, w = shape[-3], shape[-2]
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    a = _channels_first(pred)
    b = _channels_first(gt)
    mu_a = _blur(a, h, w)
    mu_b = _blur(b, h, w)
    var_a = _blur(a * a, h, w) - mu_a * mu_a
    var_b = _blur(b * b, h, w) - mu_b * mu_b
    cov = _blur(a * b, h, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return ad.mean(num / den)


def render_loss(pred, gt, cfg: LossConfig | None = None):
    """MSE plus the weighted perceptual term."""
    cfg = cfg or LossConfig()
    loss = mse(pred, gt)
    if cfg.perceptual_kind == "ssim_based" and cfg.lambda_perceptual > 0:
        loss = loss + cfg.lambda_perceptual * ((1.0 - ssim(pred, gt)) * 0.5)
    return loss


NORM_GRAD_FLOOR = 1e-3    # px; caps the unit-gradient singularity of ||r|| at 0
                          # (well below any pose error that matters, far above
                          # ray-cast float noise)


def _row_norms(resid):
    """Exact Euclidean row norms; the gradient r/max(||r||, floor) stays
    finite and vanishes at zero residual (instead of being unit-length noise
    that a scale-free optimizer would amplify at an exact optimum)."""
    data = ad.asdata(resid)
    norms = np.linalg.norm(data, axis=-1)
    if not ad.is_tensor(resid):
        return norms
    safe = np.maximum(norms, NORM_GRAD_FLOOR)

    def vjp(g):
        return ((g / safe)[..., None] * data,)

    return ad.Tensor(norms, parents=(resid,), vjp=vjp)


def provenance_pixels(provenance: np.ndarray, cams: list[CameraModel]):
    """Pixel centers (col + 0.5, row + 0.5) of each primitive's origin."""
    view = provenance[:, 0]
    flat = provenance[:, 1]
    widths = np.array([c.width for c in cams])
    cols = flat % widths[view]
    rows = flat // widths[view]
    return np.stack([cols + 0.5, rows + 0.5], axis=-1)


def reprojection_loss(scene: SplatScene, poses, cams: list[CameraModel],
                      mu=None, reduce: str = "mean", squared: bool = False):
    """Pixel distance between origins and reprojected centers (Euclidean by
    default; `squared` uses the squared norm). `poses` holds one PoseW2C or
    (R, t) pair per view; Tensor poses/mu make the loss differentiable."""
    if scene.provenance is None:
        raise MissingProvenance("scene has no provenance records")
    prov = scene.provenance
    n_views = len(cams)
    if prov[:, 0].max(initial=-1) >= n_views:
        raise MissingProvenance("provenance view index out of range")
    for v, (flat, cam) in enumerate(zip(np.bincount(prov[:, 0], minlength=n_views),
                                        cams)):
        sel = prov[prov[:, 0] == v, 1]
        if sel.size and sel.max() >= cam.width * cam.height:
            raise MissingProvenance(f"pixel index out of range in view {v}")
    mu = scene.mu if mu is None else mu
    targets = provenance_pixels(prov, cams)

    terms = []
    count = 0
    for v in range(n_views):
        sel = np.flatnonzero(prov[:, 0] == v)
        if sel.size == 0:
            continue
        pose = poses[v]
        r_v, t_v = (pose.R, pose.t) if isinstance(pose, PoseW2C) else pose
        pix, z = project_points(cams[v], r_v, t_v, mu[sel])
        z_data = ad.asdata(z)
        if np.any(z_data <= 1e-9):
            raise PrimBehindCamera(
                f"{int(np.sum(z_data <= 1e-9))} primitive(s) behind camera {v}")
        resid = pix - targets[sel]
        if squared:
            terms.append(ad.sum_(resid * resid))
        else:
            terms.append(ad.sum_(_row_norms(resid)))
        count += sel.size
    if count == 0:
        raise MissingProvenance("no primitives carry provenance")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / count if reduce == "mean" else total


def total_loss(pred, gt, cfg: LossConfig | None = None, scene=None, poses=None,
               cams=None, reproj_kwargs=None):
    """render_loss + lambda_reproj * reprojection_loss (when provenance given)."""
    cfg = cfg or LossConfig()
    loss = render_loss(pred, gt, cfg)
    if cfg.lambda_reproj > 0 and scene is not None and scene.provenance is not None:
        loss = loss + cfg.lambda_reproj * reprojection_loss(
            scene, poses, cams, **(reproj_kwargs or {}))
    return loss


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    err = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if err < 1e-10:
        return PSNR_CAP_DB
    return min(-10.0 * math.log10(err), PSNR_CAP_DB)


def metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """{mse, psnr, ssim} on float images in [0, 1]."""
    _check_shapes(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = float(np.mean((pred - gt) ** 2))
    return {"mse": err, "psnr": psnr(pred, gt), "ssim": float(ssim(pred, gt))}
