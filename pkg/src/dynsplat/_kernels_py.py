"""Pure-numpy compositing kernels (fallback backend).

Same contract as the compiled `_kernels_cy` extension: front-to-back alpha
compositing of depth-sorted 2D Gaussians over pixel tiles, forward and
backward. Per-pixel weights are w = alpha * exp(-0.5 d^T A d), clamped to
0.99 and skipped below 1/255; skipped pairs contribute nothing and carry
zero gradient (matching the forward gate).
"""

from __future__ import annotations

import numpy as np

W_MAX = 0.99
W_MIN = 1.0 / 255.0
# compositing stops once transmittance is negligible (see _kernels_cy)
T_EPS = 1e-7

BACKEND_NAME = "python"


def _tile_weights(mean2d, conic, alpha, ids, y0, x0, th, tw):
    """Clamped weights (G, P) of the listed splats at the tile's pixel centers."""
    px = x0 + np.arange(tw) + 0.5
    py = y0 + np.arange(th) + 0.5
    gx = np.repeat(px[None, :], th, axis=0).ravel()
    gy = np.repeat(py[:, None], tw, axis=1).ravel()
    dx = gx[None, :] - mean2d[ids, 0:1]
    dy = gy[None, :] - mean2d[ids, 1:2]
    a = conic[ids, 0:1]
    b = conic[ids, 1:2]
    c = conic[ids, 2:3]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    w_raw = alpha[ids, None] * np.exp(-0.5 * q)
    w = np.minimum(w_raw, W_MAX)
    w[w_raw < W_MIN] = 0.0
    # early-termination gate: splats behind a T < T_EPS prefix are not applied
    # (transmittance is monotone, so the full-product test picks the same set
    # the sequential break would)
    t_probe = np.cumprod(1.0 - w, axis=0)
    dead = np.vstack([np.zeros((1, w.shape[1]), dtype=bool),
                      t_probe[:-1] < T_EPS])
    w[dead] = 0.0
    return w, w_raw, dx, dy


def forward_tiled(mean2d, conic, rgb, alpha, tile_starts, tile_ids, tile_rects,
                  height, width, background):
    image = np.empty((height, width, 3))
    image[:] = background
    trans = np.ones((height, width))
    for t in range(len(tile_rects)):
        ids = tile_ids[tile_starts[t]:tile_starts[t + 1]]
        y0, x0, th, tw = tile_rects[t]
        if len(ids) == 0:
            continue
        w, _, _, _ = _tile_weights(mean2d, conic, alpha, ids, y0, x0, th, tw)
        t_in = np.cumprod(1.0 - w, axis=0)
        t_excl = np.vstack([np.ones((1, w.shape[1])), t_in[:-1]])
        wt = w * t_excl
        tile_img = wt.T @ rgb[ids] + t_in[-1][:, None] * background[None, :]
        image[y0:y0 + th, x0:x0 + tw] = tile_img.reshape(th, tw, 3)
        trans[y0:y0 + th, x0:x0 + tw] = t_in[-1].reshape(th, tw)
    return image, trans


def backward_tiled(mean2d, conic, rgb, alpha, tile_starts, tile_ids, tile_rects,
                   height, width, background, g_image):
    n = len(mean2d)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_rgb = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    for t in range(len(tile_rects)):
        ids = tile_ids[tile_starts[t]:tile_starts[t + 1]]
        y0, x0, th, tw = tile_rects[t]
        if len(ids) == 0:
            continue
        w, w_raw, dx, dy = _tile_weights(mean2d, conic, alpha, ids, y0, x0, th, tw)
        t_in = np.cumprod(1.0 - w, axis=0)
        t_excl = np.vstack([np.ones((1, w.shape[1])), t_in[:-1]])
        wt = w * t_excl                                     # (G, P)
        gc = g_image[y0:y0 + th, x0:x0 + tw].reshape(-1, 3)  # (P, 3)

        g_rgb[ids] += wt @ gc

        # suffix color behind each splat: S_k = sum_{j>k} wt_j rgb_j + bg T_final
        contrib_dot = wt * (rgb[ids] @ gc.T)                 # (G, P): wt_k (rgb_k . gc)
        bg_dot = t_in[-1] * (background @ gc.T)              # (P,)
        csum = np.cumsum(contrib_dot, axis=0)
        suffix_dot = (csum[-1] - csum) + bg_dot[None, :]     # (G, P): (S_k . gc)
        dw = (rgb[ids] @ gc.T) * t_excl - suffix_dot / (1.0 - w)
        live = (w > 0.0) & (w_raw <= W_MAX)   # applied (not skipped/terminated)
        dwr = np.where(live, dw, 0.0)         # and not clamped


        g_alpha[ids] += np.sum(dwr * w_raw, axis=1) / alpha[ids]
        common = dwr * w_raw * (-0.5)
        g_conic[ids, 0] += np.sum(common * dx * dx, axis=1)
        g_conic[ids, 1] += np.sum(common * dx * dy, axis=1)
        g_conic[ids, 2] += np.sum(common * dy * dy, axis=1)
        a = conic[ids, 0:1]
        b = conic[ids, 1:2]
        c = conic[ids, 2:3]
        g_mean2d[ids, 0] += np.sum(dwr * w_raw * (a * dx + b * dy), axis=1)
        g_mean2d[ids, 1] += np.sum(dwr * w_raw * (b * dx + c * dy), axis=1)
    return g_mean2d, g_conic, g_rgb, g_alpha
