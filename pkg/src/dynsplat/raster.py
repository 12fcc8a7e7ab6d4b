"""Forward splatting: EWA projection of 3D Gaussians to screen space, image
culling, depth sorting, and front-to-back alpha compositing.

Two compositing paths share the projection stage:
  * `composite_reference` - the brute-force oracle; every projected Gaussian
    evaluated at every pixel, plain numpy, forward only.
  * `render` - the tiled fast path (16x16 tiles, per-tile binning by the
    exact w >= 1/255 support box), backed by the compiled or fallback kernel
    and differentiable through the fused compositing op.

Binning uses the support radius at which a splat's weight crosses the 1/255
skip threshold (about 3.3 sigma at full opacity), so a splat binned out of a
tile provably contributes nothing there and the tiled image matches the
reference to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backend as backend_mod
from .geometry import CameraModel, PoseW2C, camera_center_rt
from .splats import SplatScene, GaussianPrimitive, covariance3d_batch, sh_eval_batch

NEAR_PLANE = 0.01
COV_DILATION = 0.3
W_MIN = 1.0 / 255.0
MIN_DET = 1e-12


class SingularCovariance(ValueError):
    """2D covariance determinant below 1e-12 (upstream bug: dilation missing)."""


@dataclass
class ProjectedGaussian:
    """One splat after EWA projection to screen space."""

    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) pixels^2, low-pass dilated
    depth: float          # camera-space z
    rgb: np.ndarray       # (3,) clamped [0, 1]
    alpha: float          # (0, 1)


@dataclass
class RenderedImage:
    """Float image in [0, 1] plus the per-pixel background transmittance."""

    pixels: np.ndarray            # (H, W, 3)
    transmittance: np.ndarray     # (H, W)

    @property
    def alpha_map(self) -> np.ndarray:
        return 1.0 - self.transmittance


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int | None = None          # None: use the scene's stored degree
    tile_size: int = 16
    backend: str = "auto"
    color_dir_anchor: str = "refined"     # SH view direction from refined centers

    def bg(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_gaussians_views(params: dict, R_all, t_all, cam: CameraModel,
                            sh_degree: int, dir_anchor_mu=None):
    """EWA-project under V poses at once; no culling (callers mask on data).

    Scene attribute leaves are (N, ...) when shared across views or
    (V, N, ...) when already per-view (refined). Returns mean2d (V,N,2),
    cov2d (V,N,2,2), rgb (V,N,3), alpha (V,N) and plain depth (V,N).
    """
    n_views = ad.asdata(R_all).shape[0]
    r_b = ad.reshape(R_all, (n_views, 1, 3, 3))
    t_b = ad.reshape(t_all, (n_views, 1, 3))
    mu = params["mu"]
    xc = ad.bmv(r_b, mu) + t_b                                # (V, N, 3)
    x, y, z = xc[..., 0], xc[..., 1], xc[..., 2]
    z_data = ad.asdata(z)
    bad_z = np.abs(z_data) < 1e-12
    if np.any(bad_z):           # culled later; keep the division defined
        z = ad.where(bad_z, 1.0, z)
    inv_z = 1.0 / z
    px = cam.fx * (x * inv_z) + cam.cx
    py = cam.fy * (y * inv_z) + cam.cy
    mean2d = ad.stack([px, py], axis=-1)

    cov3d = covariance3d_batch(params["rot"], params["log_scale"])
    rt_b = r_b.swapaxes(-1, -2) if ad.is_tensor(r_b) else np.swapaxes(r_b, -1, -2)
    cov_cam = ad.matmul(ad.matmul(r_b, cov3d), rt_b)          # (V, N, 3, 3)

    zeros = np.zeros(z_data.shape)
    inv_z2 = inv_z * inv_z
    row0 = ad.stack([cam.fx * inv_z, zeros, -cam.fx * (x * inv_z2)], axis=-1)
    row1 = ad.stack([zeros, cam.fy * inv_z, -cam.fy * (y * inv_z2)], axis=-1)
    jac = ad.stack([row0, row1], axis=-2)                     # (V, N, 2, 3)
    jt = jac.swapaxes(-1, -2) if ad.is_tensor(jac) else np.swapaxes(jac, -1, -2)
    cov2d = ad.matmul(ad.matmul(jac, cov_cam), jt) + COV_DILATION * np.eye(2)

    anchor = params["mu"] if dir_anchor_mu is None else dir_anchor_mu
    cam_pos = ad.reshape(camera_center_rt(R_all, t_all), (n_views, 1, 3))
    d = anchor - cam_pos
    dist = ad.norm(d, axis=-1, keepdims=True, eps=1e-24)
    rgb = ad.clip(sh_eval_batch(params["sh"], d / dist, sh_degree), 0.0, 1.0)
    alpha = ad.sigmoid(params["logit_opacity"])
    if ad.asdata(alpha).ndim == 1:                            # shared opacity
        alpha = alpha * np.ones((n_views, 1))
    return {"mean2d": mean2d, "cov2d": cov2d, "rgb": rgb, "alpha": alpha,
            "depth": z_data}


def project_gaussians(params: dict, R, t, cam: CameraModel,
                      sh_degree: int, dir_anchor_mu=None):
    """Single-view wrapper: (N, ...) outputs for one pose."""
    r1 = ad.reshape(R, (1, 3, 3))
    t1 = ad.reshape(t, (1, 3))
    proj = project_gaussians_views(params, r1, t1, cam, sh_degree, dir_anchor_mu)
    return {k: v[0] for k, v in proj.items()}


def support_bounds(mean2d: np.ndarray, cov2d: np.ndarray, alpha: np.ndarray):
    """Pixel-index bounding box of each splat's w >= 1/255 region.

    Returns (c0, c1, r0, r1, active); inactive splats can never pass the
    compositing skip threshold anywhere.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        thr = 2.0 * np.log(np.maximum(alpha, 1e-300) / W_MIN)
        active = ((thr > 0.0) & np.isfinite(mean2d).all(axis=-1)
                  & np.isfinite(cov2d).all(axis=(-2, -1)))
        thr = np.where(active, thr, 0.0)
        rx = np.sqrt(thr * np.clip(np.nan_to_num(cov2d[:, 0, 0]), 0.0, None)) + 1e-9
        ry = np.sqrt(thr * np.clip(np.nan_to_num(cov2d[:, 1, 1]), 0.0, None)) + 1e-9
        mx = np.nan_to_num(mean2d[:, 0])
        my = np.nan_to_num(mean2d[:, 1])
        c0 = np.floor(mx - rx - 0.5).astype(np.int64)
        c1 = np.ceil(mx + rx - 0.5).astype(np.int64)
        r0 = np.floor(my - ry - 0.5).astype(np.int64)
        r1 = np.ceil(my + ry - 0.5).astype(np.int64)
    return c0, c1, r0, r1, active


def ewa_project(g: GaussianPrimitive, pose: PoseW2C, cam: CameraModel,
                sh_degree: int | None = None) -> ProjectedGaussian | None:
    """Project one Gaussian; returns None when culled (behind the near plane
    at depth 0.01 or its screen-space support missing the image)."""
    degree = g.sh_degree if sh_degree is None else sh_degree
    params = {"mu": g.mu[None], "rot": g.rot[None], "log_scale": g.log_scale[None],
              "logit_opacity": np.array([g.logit_opacity]), "sh": g.sh[None]}
    proj = project_gaussians(params, pose.R, pose.t, cam, degree)
    if proj["depth"][0] <= NEAR_PLANE:
        return None
    c0, c1, r0, r1, active = support_bounds(proj["mean2d"], proj["cov2d"],
                                            proj["alpha"])
    if not active[0] or c1[0] < 0 or c0[0] > cam.width - 1 \
            or r1[0] < 0 or r0[0] > cam.height - 1:
        return None
    return ProjectedGaussian(mean2d=proj["mean2d"][0], cov2d=proj["cov2d"][0],
                             depth=float(proj["depth"][0]), rgb=proj["rgb"][0],
                             alpha=float(proj["alpha"][0]))


# ---------------------------------------------------------------------------
# Conics, binning, and the fused compositing op
# ---------------------------------------------------------------------------

def conic_from_cov(cov2d: np.ndarray):
    """Inverse 2x2 covariances packed as (a, b, c); raises on tiny determinants."""
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if np.any(det < MIN_DET):
        worst = int(np.argmin(det))
        raise SingularCovariance(
            f"cov2d determinant {det[worst]:.3e} < {MIN_DET:g} at index {worst}")
    conic = np.empty((len(cov2d), 3))
    conic[:, 0] = cov2d[:, 1, 1] / det
    conic[:, 1] = -cov2d[:, 0, 1] / det
    conic[:, 2] = cov2d[:, 0, 0] / det
    return conic, det


def bin_tiles(mean2d: np.ndarray, cov2d: np.ndarray, alpha: np.ndarray,
              height: int, width: int, tile_size: int):
    """Assign depth-sorted splats to the 16x16 tiles their support touches."""
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    n_tiles = ntx * nty
    rects = np.zeros((n_tiles, 4), dtype=np.int32)
    for ty in range(nty):
        for tx in range(ntx):
            i = ty * ntx + tx
            rects[i] = (ty * tile_size, tx * tile_size,
                        min(tile_size, height - ty * tile_size),
                        min(tile_size, width - tx * tile_size))

    n = len(mean2d)
    starts = np.zeros(n_tiles + 1, dtype=np.int64)
    if n == 0:
        return starts, np.zeros(0, dtype=np.int32), rects

    c0, c1, r0, r1, active = support_bounds(mean2d, cov2d, alpha)
    c0 = np.clip(c0, 0, width - 1)
    c1 = np.clip(c1, 0, width - 1)
    r0 = np.clip(r0, 0, height - 1)
    r1 = np.clip(r1, 0, height - 1)
    tx0 = c0 // tile_size
    tx1 = c1 // tile_size
    ty0 = r0 // tile_size
    ty1 = r1 // tile_size
    nx = np.where(active, tx1 - tx0 + 1, 0)
    ny = np.where(active, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return starts, np.zeros(0, dtype=np.int32), rects

    owner = np.repeat(np.arange(n), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offsets, counts)
    nx_o = nx[owner]
    lx = local % nx_o
    ly = local // nx_o
    tid = (ty0[owner] + ly) * ntx + (tx0[owner] + lx)
    # sort by tile, then depth rank (splats arrive depth-sorted, so the
    # running index is the rank); stable and deterministic
    order = np.argsort(tid * np.int64(n) + owner, kind="stable")
    tid_sorted = tid[order]
    tile_ids = owner[order].astype(np.int32)
    starts = np.searchsorted(tid_sorted, np.arange(n_tiles + 1)).astype(np.int64)
    return starts, tile_ids, rects


def composite_views_fused(mean2d, cov2d, rgb, alpha, seg_bounds, all_tiles,
                          n_views, height, width, background: np.ndarray,
                          kernels):
    """Tiled compositing of V views as one autodiff op.

    The gathered inputs hold the depth-sorted splats of every view back to
    back; `seg_bounds` delimits each view's segment and `all_tiles` carries
    the per-view tile structure. One hand-written VJP covers the stack.
    """
    m_d = np.ascontiguousarray(ad.asdata(mean2d))
    c_d = np.ascontiguousarray(ad.asdata(cov2d))
    r_d = np.ascontiguousarray(ad.asdata(rgb))
    a_d = np.ascontiguousarray(ad.asdata(alpha))
    conic_all, _ = conic_from_cov(c_d) if len(c_d) else (np.zeros((0, 3)), None)
    conic_all = np.ascontiguousarray(conic_all)

    images = np.empty((n_views, height, width, 3))
    trans = np.empty((n_views, height, width))
    for v in range(n_views):
        lo, hi = seg_bounds[v], seg_bounds[v + 1]
        starts, tile_ids, rects = all_tiles[v]
        images[v], trans[v] = kernels.forward_tiled(
            m_d[lo:hi], conic_all[lo:hi], r_d[lo:hi], a_d[lo:hi],
            starts, tile_ids, rects, height, width, background)
    if not any(ad.is_tensor(x) for x in (mean2d, cov2d, rgb, alpha)):
        return images, trans

    parents = tuple(ad.Tensor._lift(x) for x in (mean2d, cov2d, rgb, alpha))

    def vjp(g):
        g = np.ascontiguousarray(g)
        g_mean = np.zeros_like(m_d)
        g_conic = np.zeros((len(m_d), 3))
        g_rgb = np.zeros_like(r_d)
        g_alpha = np.zeros_like(a_d)
        for v in range(n_views):
            lo, hi = seg_bounds[v], seg_bounds[v + 1]
            starts, tile_ids, rects = all_tiles[v]
            gm, gc, gr, ga = kernels.backward_tiled(
                m_d[lo:hi], conic_all[lo:hi], r_d[lo:hi], a_d[lo:hi],
                starts, tile_ids, rects, height, width, background, g[v])
            g_mean[lo:hi] = gm
            g_conic[lo:hi] = gc
            g_rgb[lo:hi] = gr
            g_alpha[lo:hi] = ga
        # chain through the matrix inverse: dL/dCov = -A dL/dA A
        g_a = np.empty_like(c_d)
        g_a[:, 0, 0] = g_conic[:, 0]
        g_a[:, 0, 1] = g_conic[:, 1]
        g_a[:, 1, 0] = g_conic[:, 1]
        g_a[:, 1, 1] = g_conic[:, 2]
        a_full = np.empty_like(c_d)
        a_full[:, 0, 0] = conic_all[:, 0]
        a_full[:, 0, 1] = conic_all[:, 1]
        a_full[:, 1, 0] = conic_all[:, 1]
        a_full[:, 1, 1] = conic_all[:, 2]
        g_cov = -a_full @ g_a @ a_full
        return g_mean, g_cov, g_rgb, g_alpha

    out = ad.Tensor(images, parents=parents, vjp=vjp)
    return out, trans


# ---------------------------------------------------------------------------
# The oracle and the fast path
# ---------------------------------------------------------------------------

def _composite_dense(mean2d, cov2d, rgb, alpha, height, width, background,
                     chunk_pixels: int = 8192):
    """Brute force: every splat at every pixel, pure numpy, forward only."""
    conic, _ = conic_from_cov(cov2d)
    n = len(mean2d)
    image = np.empty((height * width, 3))
    trans = np.empty(height * width)
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    px = np.tile(cols, height)
    py = np.repeat(rows, width)
    for lo in range(0, height * width, chunk_pixels):
        hi = min(lo + chunk_pixels, height * width)
        if n == 0:
            image[lo:hi] = background
            trans[lo:hi] = 1.0
            continue
        dx = px[lo:hi][None, :] - mean2d[:, 0:1]
        dy = py[lo:hi][None, :] - mean2d[:, 1:2]
        q = (conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy
             + conic[:, 2:3] * dy * dy)
        w_raw = alpha[:, None] * np.exp(-0.5 * q)
        w = np.minimum(w_raw, 0.99)
        w[w_raw < W_MIN] = 0.0
        t_in = np.cumprod(1.0 - w, axis=0)
        t_excl = np.vstack([np.ones((1, w.shape[1])), t_in[:-1]])
        image[lo:hi] = (w * t_excl).T @ rgb + t_in[-1][:, None] * background
        trans[lo:hi] = t_in[-1]
    return image.reshape(height, width, 3), trans.reshape(height, width)


def _sorted_arrays_from_projected(projected):
    """Depth-sorted arrays (ties broken by list index) from ProjectedGaussians."""
    if len(projected) == 0:
        z = np.zeros(0)
        return (np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), z, z)
    mean2d = np.stack([p.mean2d for p in projected])
    cov2d = np.stack([p.cov2d for p in projected])
    rgb = np.stack([p.rgb for p in projected])
    alpha = np.array([p.alpha for p in projected])
    depth = np.array([p.depth for p in projected])
    order = np.argsort(depth, kind="stable")
    return mean2d[order], cov2d[order], rgb[order], alpha[order], depth[order]


def composite_reference(projected: list, cam: CameraModel,
                        background=(0.0, 0.0, 0.0)) -> RenderedImage:
    """Reference compositor over already-projected Gaussians."""
    bg = np.asarray(background, dtype=np.float64)
    mean2d, cov2d, rgb, alpha, _ = _sorted_arrays_from_projected(projected)
    image, trans = _composite_dense(mean2d, cov2d, rgb, alpha,
                                    cam.height, cam.width, bg)
    return RenderedImage(np.clip(image, 0.0, 1.0), trans)


def render_views(params: dict, R_all, t_all, cam: CameraModel,
                 opts: RenderOptions, dir_anchor_mu=None):
    """Project, cull, sort, bin, composite a batch of V views in one graph.

    Returns (images (V, H, W, 3), transmittance (V, H, W)); images is a
    Tensor when any input is. One fused compositing node serves all views,
    which keeps the per-step op count independent of the batch size.
    """
    degree = opts.sh_degree
    if degree is None:
        from .splats import sh_degree_from_coeffs
        degree = sh_degree_from_coeffs(ad.asdata(params["sh"]).shape[-1])
    proj = project_gaussians_views(params, R_all, t_all, cam, degree,
                                   dir_anchor_mu)
    n_views, n = proj["depth"].shape
    mean_d = ad.asdata(proj["mean2d"])
    cov_d = ad.asdata(proj["cov2d"])
    alpha_d = ad.asdata(proj["alpha"])
    depth = proj["depth"]

    flat_idx = []
    seg_bounds = [0]
    all_tiles = []
    for v in range(n_views):
        c0, c1, r0, r1, active = support_bounds(mean_d[v], cov_d[v], alpha_d[v])
        keep = ((depth[v] > NEAR_PLANE) & active
                & (c1 >= 0) & (c0 <= cam.width - 1)
                & (r1 >= 0) & (r0 <= cam.height - 1))
        idx = np.flatnonzero(keep)
        idx = idx[np.argsort(depth[v][idx], kind="stable")]
        flat_idx.append(v * n + idx)
        seg_bounds.append(seg_bounds[-1] + len(idx))
        all_tiles.append(bin_tiles(mean_d[v][idx], cov_d[v][idx],
                                   alpha_d[v][idx], cam.height, cam.width,
                                   opts.tile_size))
    flat_idx = np.concatenate(flat_idx) if flat_idx else np.zeros(0, np.intp)

    # indices are unique across views, so the fast scatter-gather applies
    mean2d = ad.gather_rows(ad.reshape(proj["mean2d"], (n_views * n, 2)), flat_idx)
    cov2d = ad.gather_rows(ad.reshape(proj["cov2d"], (n_views * n, 2, 2)), flat_idx)
    rgb = ad.gather_rows(ad.reshape(proj["rgb"], (n_views * n, 3)), flat_idx)
    alpha = ad.gather_rows(ad.reshape(proj["alpha"], (n_views * n,)), flat_idx)

    kernels = backend_mod.get_kernels(opts.backend)
    return composite_views_fused(mean2d, cov2d, rgb, alpha, seg_bounds,
                                 all_tiles, n_views, cam.height, cam.width,
                                 opts.bg(), kernels)


def render_pipeline(params: dict, R, t, cam: CameraModel, opts: RenderOptions,
                    dir_anchor_mu=None):
    """Single-view render: (image (H, W, 3), transmittance (H, W))."""
    r1 = ad.reshape(R, (1, 3, 3))
    t1 = ad.reshape(t, (1, 3))
    images, trans = render_views(params, r1, t1, cam, opts, dir_anchor_mu)
    return images[0], trans[0]


def render(scene_refined, pose: PoseW2C, cam: CameraModel,
           opts: RenderOptions | None = None) -> RenderedImage:
    """Tiled fast-path rendering of a (refined) scene or primitive list."""
    opts = opts or RenderOptions()
    if isinstance(scene_refined, SplatScene):
        params = scene_refined.param_arrays()
    else:
        prims = list(scene_refined)
        if not prims:
            k = 1 if opts.sh_degree is None else (opts.sh_degree + 1) ** 2
            params = {"mu": np.zeros((0, 3)), "rot": np.zeros((0, 4)),
                      "log_scale": np.zeros((0, 3)),
                      "logit_opacity": np.zeros(0), "sh": np.zeros((0, 3, k))}
        else:
            params = SplatScene.from_primitives(prims).param_arrays()
    image, trans = render_pipeline(params, pose.R, pose.t, cam, opts)
    return RenderedImage(np.clip(image, 0.0, 1.0), trans)


def project_scene(scene, pose: PoseW2C, cam: CameraModel,
                  sh_degree: int | None = None) -> list[ProjectedGaussian]:
    """ewa_project over a whole scene, dropping culled splats."""
    out = []
    prims = scene.primitives if isinstance(scene, SplatScene) else scene
    for g in prims:
        p = ewa_project(g, pose, cam, sh_degree)
        if p is not None:
            out.append(p)
    return out
