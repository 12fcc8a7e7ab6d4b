"""Gaussian primitive storage, real spherical harmonics, 3D covariance.

Scenes are struct-of-arrays (one float64 array per attribute) because every
hot path is vectorized over primitives; `GaussianPrimitive` is the
single-splat view used by the per-primitive operations and tests.

Storage spaces: scales are kept in log space and opacity in logit space so
that residual offsets added pre-activation always yield valid parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

QUAT_EPS = 1e-12
SH_DC = 0.28209479177387814   # Y_00 = 1 / (2 sqrt(pi))


class BadDegree(ValueError):
    """Requested SH degree exceeds the stored coefficients."""


class DegenerateQuaternion(ValueError):
    """Quaternion norm is (near) zero."""


def num_sh_coeffs(degree: int) -> int:
    """K = (degree + 1)^2 coefficients per color channel."""
    return (degree + 1) ** 2


def sh_degree_from_coeffs(k: int) -> int:
    degree = int(round(math.sqrt(k))) - 1
    if num_sh_coeffs(degree) != k:
        raise ValueError(f"{k} is not a square coefficient count")
    return degree


# ---------------------------------------------------------------------------
# Real spherical harmonics (Condon-Shortley phase, bands ordered m=-l..l).
# The first bands reproduce the constants hardcoded across splatting codebases
# (0.28209479, 0.48860251, 1.09254843, ...).
# ---------------------------------------------------------------------------

def _sh_norm(l: int, m: int) -> float:
    n = math.sqrt((2 * l + 1) / (4.0 * math.pi)
                  * math.factorial(l - m) / math.factorial(l + m))
    return n * math.sqrt(2.0) if m > 0 else n


def sh_basis(dirs, degree: int):
    """Evaluate the (degree+1)^2 real SH basis functions at unit directions.

    `dirs` has shape (..., 3); returns (..., K). Works on numpy arrays and
    autodiff Tensors (the Legendre recurrence is built from recorded ops).
    """
    if degree < 0:
        raise BadDegree("degree must be >= 0")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    base_shape = ad.asdata(x).shape
    one = np.ones(base_shape)

    # cos/sin multiples of azimuth scaled by sin(theta)^m, as polynomials
    cos_m = [one]
    sin_m = [np.zeros(base_shape)]
    for m in range(1, degree + 1):
        cos_m.append(x * cos_m[m - 1] - y * sin_m[m - 1])
        sin_m.append(x * sin_m[m - 1] + y * cos_m[m - 1])

    # associated Legendre with the sin(theta)^m factor divided out
    leg = {(0, 0): one}
    for m in range(1, degree + 1):
        leg[(m, m)] = (1.0 - 2.0 * m) * leg[(m - 1, m - 1)]
    for m in range(0, degree):
        leg[(m + 1, m)] = (2.0 * m + 1.0) * (z * leg[(m, m)])
    for m in range(0, degree + 1):
        for l in range(m + 2, degree + 1):
            leg[(l, m)] = ((2.0 * l - 1.0) * (z * leg[(l - 1, m)])
                           - (l + m - 1.0) * leg[(l - 2, m)]) / (l - m)

    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            n = _sh_norm(l, abs(m))
            if m == 0:
                col = leg[(l, 0)] * n if l > 0 else one * n
            elif m > 0:
                col = n * (cos_m[m] * leg[(l, m)])
            else:
                col = n * (sin_m[-m] * leg[(l, -m)])
            cols.append(col)
    return ad.stack(cols, axis=-1)


def sh_eval_batch(sh, dirs, degree: int):
    """Batched SH color: 0.5 + sum_k Y_k(dir) sh[..., :, k].

    `sh` is (..., 3, K_stored), `dirs` is (..., 3); uses the first
    (degree+1)^2 coefficients. No clamping (that happens at compositing).
    """
    k_stored = ad.asdata(sh).shape[-1]
    k_used = num_sh_coeffs(degree)
    if k_used > k_stored:
        raise BadDegree(f"degree {degree} needs {k_used} coefficients, "
                        f"stored {k_stored}")
    basis = sh_basis(dirs, degree)
    coeff = sh[..., :k_used] if k_used != k_stored else sh
    return 0.5 + ad.bmv(coeff, basis)


def sh_eval(sh: np.ndarray, direction: np.ndarray, degree: int) -> np.ndarray:
    """Single-primitive SH color for a unit view direction."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    return sh_eval_batch(np.asarray(sh, dtype=np.float64), direction, degree)


# ---------------------------------------------------------------------------
# Quaternions and covariance
# ---------------------------------------------------------------------------

def normalize_quat(q):
    """Normalize (..., 4) quaternions; raises on (near-)zero norm."""
    n_plain = np.linalg.norm(ad.asdata(q), axis=-1)
    if np.any(n_plain <= QUAT_EPS):
        raise DegenerateQuaternion("quaternion norm below 1e-12")
    return q / ad.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Unit (w, x, y, z) quaternions (..., 4) -> rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = ad.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = ad.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = ad.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return ad.stack([row0, row1, row2], axis=-2)


def covariance3d_batch(rot, log_scale):
    """Sigma = R diag(exp(ls))^2 R^T for (..., 4) quats and (..., 3) log scales."""
    R = quat_to_rotmat(normalize_quat(rot))
    s = ad.exp(log_scale)
    M = R * ad.reshape(s, ad.asdata(s).shape[:-1] + (1, 3))   # scale columns
    return ad.matmul(M, M.swapaxes(-1, -2) if ad.is_tensor(M) else np.swapaxes(M, -1, -2))


def covariance3d(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Symmetric positive semidefinite 3x3 covariance of one Gaussian."""
    return covariance3d_batch(np.asarray(rot, dtype=np.float64),
                              np.asarray(log_scale, dtype=np.float64))


# ---------------------------------------------------------------------------
# Primitive and scene containers
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    """One splat. `sh` is (3, K) with K = (degree+1)^2."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    logit_opacity: float
    sh: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.logit_opacity = float(self.logit_opacity)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 2 or self.sh.shape[0] != 3:
            raise ValueError(f"sh must be (3, K), got {self.sh.shape}")
        if np.linalg.norm(self.rot) <= QUAT_EPS:
            raise DegenerateQuaternion("stored quaternion norm below 1e-12")

    @property
    def opacity(self) -> float:
        return float(ad.sigmoid(self.logit_opacity))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[1])


class SplatScene:
    """A collection of Gaussians, stored as arrays.

    Optional per-primitive state: `context_features` (N, F) drive the
    hypernetwork; `provenance` (N, 2) records the (view index, pixel index)
    a primitive originated from, used by the reprojection loss.
    """

    FIELDS = ("mu", "rot", "log_scale", "logit_opacity", "sh")

    def __init__(self, mu, rot, log_scale, logit_opacity, sh,
                 context_features=None, provenance=None):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.rot = np.asarray(rot, dtype=np.float64)
        self.log_scale = np.asarray(log_scale, dtype=np.float64)
        self.logit_opacity = np.asarray(logit_opacity, dtype=np.float64)
        self.sh = np.asarray(sh, dtype=np.float64)
        n = len(self.mu)
        if (self.mu.shape != (n, 3) or self.rot.shape != (n, 4)
                or self.log_scale.shape != (n, 3)
                or self.logit_opacity.shape != (n,)
                or self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3)):
            raise ValueError("inconsistent scene array shapes")
        if n and np.any(np.linalg.norm(self.rot, axis=-1) <= QUAT_EPS):
            raise DegenerateQuaternion("scene contains a zero quaternion")
        self.context_features = None
        if context_features is not None:
            self.context_features = np.asarray(context_features, dtype=np.float64)
            if len(self.context_features) != n:
                raise ValueError("context feature count != primitive count")
        self.provenance = None
        if provenance is not None:
            self.provenance = np.asarray(provenance, dtype=np.int64)
            if self.provenance.shape != (n, 2):
                raise ValueError("provenance must be (N, 2)")
            if n and self.provenance.min() < 0:
                raise ValueError("provenance indices must be non-negative")

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[2])

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.rot[i], self.log_scale[i],
                                 self.logit_opacity[i], self.sh[i])

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def copy(self) -> "SplatScene":
        return SplatScene(
            self.mu.copy(), self.rot.copy(), self.log_scale.copy(),
            self.logit_opacity.copy(), self.sh.copy(),
            None if self.context_features is None else self.context_features.copy(),
            None if self.provenance is None else self.provenance.copy())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    @staticmethod
    def from_primitives(prims: list[GaussianPrimitive], **kw) -> "SplatScene":
        return SplatScene(
            np.stack([p.mu for p in prims]),
            np.stack([p.rot for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.logit_opacity for p in prims]),
            np.stack([p.sh for p in prims]), **kw)


def pad_sh_degree(sh: np.ndarray, degree: int) -> np.ndarray:
    """Zero-pad (..., 3, K) SH coefficients up to the given degree."""
    k_target = num_sh_coeffs(degree)
    k = sh.shape[-1]
    if k > k_target:
        raise BadDegree("cannot pad down; stored degree already higher")
    if k == k_target:
        return sh
    pad = [(0, 0)] * (sh.ndim - 1) + [(0, k_target - k)]
    return np.pad(sh, pad)
