"""Rigid poses, 6D rotation decoding, camera centers, pinhole projection,
and the 4D view feature (unit direction + log distance) fed to the view MLPs.

Everything is float64. The batched helpers (`rotation_from_6d`,
`pose_features`, `project_points`) run on plain numpy arrays or on autodiff
Tensors, so the same code serves rendering and pose optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ORTHO_TOL = 1e-9
DIST_EPS = 1e-6          # epsilon inside log(||d|| + eps)
DEGENERATE_NORM = 1e-12
NEAR_PLANE_Z = 1e-9      # minimum camera-space depth for point projection
FALLBACK_DIR = np.array([0.0, 0.0, 1.0])


class DegenerateInput(ValueError):
    """6D rotation input collapses under Gram-Schmidt."""


class BehindCamera(ValueError):
    """Point has non-positive camera-space depth."""


@dataclass(frozen=True)
class PoseW2C:
    """World-to-camera rigid transform: X_cam = R @ X_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {R.shape}, {t.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "PoseW2C":
        return PoseW2C(np.eye(3), np.zeros(3))

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix4(m: np.ndarray) -> "PoseW2C":
        m = np.asarray(m, dtype=np.float64)
        return PoseW2C(m[:3, :3], m[:3, 3])

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World -> camera coordinates for points of shape (..., 3)."""
        return points @ self.R.T + self.t


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")


@dataclass(frozen=True)
class ViewFeature4D:
    """Per-Gaussian view conditioning: unit direction + (log) distance."""

    u: np.ndarray
    l: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("direction is not unit length")
        object.__setattr__(self, "u", u)

    def vec4(self) -> np.ndarray:
        return np.concatenate([self.u, [self.l]])


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def rotation_from_6d(v6):
    """Decode a 6D rotation (two 3-vectors) into an orthonormal R, det +1.

    Gram-Schmidt: b1 = normalize(a1), b2 = normalize(a2 - (a2.b1) b1),
    b3 = b1 x b2; the decoded vectors become the *columns* of R. Accepts
    (..., 6) arrays or Tensors; raises DegenerateInput when a normalization
    collapses.
    """
    data = ad.asdata(v6)
    if data.shape[-1] != 6:
        raise ValueError("expected shape (..., 6)")
    a1 = data[..., :3]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 <= DEGENERATE_NORM):
        raise DegenerateInput("first 3-vector has (near-)zero norm")
    b1_plain = a1 / n1[..., None]
    a2 = data[..., 3:]
    resid = a2 - np.sum(a2 * b1_plain, axis=-1, keepdims=True) * b1_plain
    if np.any(np.linalg.norm(resid, axis=-1) <= DEGENERATE_NORM):
        raise DegenerateInput("second vector is parallel to the first")

    x1 = v6[..., :3] if ad.is_tensor(v6) else a1
    x2 = v6[..., 3:] if ad.is_tensor(v6) else a2
    b1 = x1 / ad.norm(x1, axis=-1, keepdims=True)
    y2 = x2 - ad.dot(x2, b1, keepdims=True) * b1
    b2 = y2 / ad.norm(y2, axis=-1, keepdims=True)
    b3 = ad.cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1)   # basis vectors as columns


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    """Inverse of rotation_from_6d: first two columns, flattened."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def camera_center(pose: PoseW2C) -> np.ndarray:
    """Camera position in world coordinates: C = -R^T t."""
    return -pose.R.T @ pose.t


def camera_center_rt(R, t):
    """camera_center on raw (possibly Tensor) R, t."""
    Rt = R.swapaxes(-1, -2) if ad.is_tensor(R) else np.swapaxes(R, -1, -2)
    return -ad.bmv(Rt, t)


def pose_features(mu, R, t, mode: str = "log"):
    """Batched 4D view features for centers `mu` of shape (..., 3).

    d = C - mu; u = d/||d||; l = log(||d|| + 1e-6) in "log" mode or ||d||
    in "linear" mode. Zero-length d falls back to u=(0,0,1), l per mode.
    A pose batch R (V, 3, 3) against centers (N, 3) yields (V, N) features.
    """
    if mode not in ("log", "linear"):
        raise ValueError(f"unknown pose feature mode {mode!r}")
    C = camera_center_rt(R, t)
    if ad.asdata(R).ndim == 3 and ad.asdata(mu).ndim >= 2:
        C = ad.reshape(C, (ad.asdata(R).shape[0], 1, 3))
    d = C - mu
    dist_plain = np.linalg.norm(ad.asdata(d), axis=-1)
    degenerate = dist_plain < DEGENERATE_NORM
    if np.any(degenerate):
        # keep the division well-defined on degenerate lanes
        safe = ad.norm(d, axis=-1, keepdims=True) + degenerate[..., None] * 1.0
        u = ad.where(degenerate[..., None],
                     np.broadcast_to(FALLBACK_DIR, ad.asdata(d).shape), d / safe)
        dist = ad.norm(d, axis=-1)
        if mode == "log":
            l = ad.where(degenerate, np.log(DIST_EPS), ad.log(dist + DIST_EPS))
        else:
            l = ad.where(degenerate, 0.0, dist)
    else:
        dist = ad.norm(d, axis=-1)
        u = d / ad.reshape(dist, dist_plain.shape + (1,))
        l = ad.log(dist + DIST_EPS) if mode == "log" else dist
    return u, l


def pose_feature_4d(mu: np.ndarray, pose: PoseW2C, mode: str = "log") -> ViewFeature4D:
    """Single-center wrapper around `pose_features`."""
    u, l = pose_features(np.asarray(mu, dtype=np.float64), pose.R, pose.t, mode)
    return ViewFeature4D(u, float(l))


def project_points(cam: CameraModel, R, t, points):
    """Batched pinhole projection. Returns (pixels (..., 2), depth (...,)).

    No culling here; callers decide what to do with non-positive depths.
    """
    Xc = ad.bmv(R, points) if ad.is_tensor(points) or ad.is_tensor(R) or ad.is_tensor(t) \
        else points @ np.swapaxes(R, -1, -2)
    Xc = Xc + t
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    px = cam.fx * (x / z) + cam.cx
    py = cam.fy * (y / z) + cam.cy
    return ad.stack([px, py], axis=-1), z


def project(cam: CameraModel, pose: PoseW2C, point: np.ndarray) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises BehindCamera when the camera-space depth is <= 1e-9.
    """
    point = np.asarray(point, dtype=np.float64)
    z = float(pose.R[2] @ point + pose.t[2])
    if z <= NEAR_PLANE_Z:
        raise BehindCamera(f"depth {z:.3e} <= {NEAR_PLANE_Z:.0e}")
    pix, _ = project_points(cam, pose.R, pose.t, point)
    return pix


def look_at_pose(eye: np.ndarray, target: np.ndarray,
                 up: np.ndarray = (0.0, 0.0, 1.0)) -> PoseW2C:
    """World-to-camera pose for a camera at `eye` looking at `target`.

    OpenCV convention: +x right, +y down, +z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:                 # looking straight along up
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    return PoseW2C(R, -R @ eye)
