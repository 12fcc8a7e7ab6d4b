"""Synthetic desk-scale scenes with genuinely view-dependent ground truth.

Surfaces (bounded planes, spheres) are sampled into surfels; each view's
ground-truth colors come from a Blinn-Phong point light, so specular
highlights move with the camera and a static low-degree SH fit provably
underfits them. Ground-truth images run through the same reference
compositor as the engine, which keeps the static-vs-dynamic quality gap
about view dependence rather than representation mismatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraModel, PoseW2C, camera_center, look_at_pose, project
from .splats import SplatScene, num_sh_coeffs, SH_DC
from .raster import ProjectedGaussian, composite_reference, project_scene, RenderedImage


class EmptySpec(ValueError):
    """Scene spec has no surfaces or zero sample counts."""


@dataclass(frozen=True)
class PlaneSpec:
    center: tuple
    normal: tuple
    extent: tuple          # half-sizes along the two in-plane axes
    albedo: tuple
    count: int = 256


@dataclass(frozen=True)
class SphereSpec:
    center: tuple
    radius: float
    albedo: tuple
    count: int = 256


@dataclass(frozen=True)
class LightSpec:
    position: tuple = (2.0, -2.5, 3.0)
    intensity: float = 1.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    surfaces: tuple = ()
    light: LightSpec = field(default_factory=LightSpec)
    specular_exponent: float = 128.0
    specular_strength: float = 0.9
    ambient: float = 0.0

    def __post_init__(self):
        if self.specular_exponent <= 0:
            raise ValueError("specular exponent must be positive")


@dataclass
class SurfelSet:
    """Sampled surface points with outward normals and per-point footprint."""

    position: np.ndarray   # (N, 3)
    normal: np.ndarray     # (N, 3)
    albedo: np.ndarray     # (N, 3)
    radius: np.ndarray     # (N,)

    def __len__(self):
        return len(self.position)


def _plane_axes(normal: np.ndarray):
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(n @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def make_scene(spec: SceneSpec) -> tuple[SurfelSet, LightSpec]:
    """Deterministically sample all surfaces of the spec into surfels."""
    if not spec.surfaces or all(s.count < 1 for s in spec.surfaces):
        raise EmptySpec("no surfaces (or zero counts) in the scene spec")
    rng = np.random.default_rng(spec.seed)
    pos, nrm, alb, rad = [], [], [], []
    for surf in spec.surfaces:
        if surf.count < 1:
            raise EmptySpec("surface sample count must be >= 1")
        if isinstance(surf, PlaneSpec):
            n = np.asarray(surf.normal, dtype=np.float64)
            n = n / np.linalg.norm(n)
            u, v = _plane_axes(n)
            eu, ev = surf.extent
            uv = rng.uniform(-1.0, 1.0, (surf.count, 2)) * (eu, ev)
            p = np.asarray(surf.center) + uv[:, 0:1] * u + uv[:, 1:2] * v
            area = 4.0 * eu * ev
            normals = np.broadcast_to(n, p.shape).copy()
        elif isinstance(surf, SphereSpec):
            z = rng.uniform(-1.0, 1.0, surf.count)
            phi = rng.uniform(0.0, 2.0 * math.pi, surf.count)
            s = np.sqrt(1.0 - z * z)
            dirs = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
            p = np.asarray(surf.center) + surf.radius * dirs
            area = 4.0 * math.pi * surf.radius ** 2
            normals = dirs
        else:
            raise TypeError(f"unknown surface type {type(surf).__name__}")
        pos.append(p)
        nrm.append(normals)
        alb.append(np.broadcast_to(np.asarray(surf.albedo, dtype=np.float64),
                                   p.shape).copy())
        rad.append(np.full(surf.count, 0.7 * math.sqrt(area / surf.count)))
    return (SurfelSet(np.concatenate(pos), np.concatenate(nrm),
                      np.concatenate(alb), np.concatenate(rad)),
            spec.light)


def blinn_phong(surfels: SurfelSet, light: LightSpec, cam_pos: np.ndarray,
                exponent: float, strength: float, ambient: float = 0.0) -> np.ndarray:
    """Per-surfel RGB seen from `cam_pos`: diffuse + specular, clamped [0, 1]."""
    to_light = np.asarray(light.position) - surfels.position
    lhat = to_light / np.linalg.norm(to_light, axis=-1, keepdims=True)
    ndl = np.maximum(np.sum(surfels.normal * lhat, axis=-1), 0.0)
    color = surfels.albedo * (light.intensity * ndl + ambient)[:, None]
    if strength > 0.0:
        to_cam = cam_pos - surfels.position
        vhat = to_cam / np.linalg.norm(to_cam, axis=-1, keepdims=True)
        half = lhat + vhat
        hhat = half / np.linalg.norm(half, axis=-1, keepdims=True)
        ndh = np.maximum(np.sum(surfels.normal * hhat, axis=-1), 0.0)
        color = color + (strength * ndh ** exponent)[:, None]
    return np.clip(color, 0.0, 1.0)


SURFEL_OPACITY_LOGIT = 3.0   # sigmoid(3) ~ 0.953


def surfel_scene(surfels: SurfelSet, colors: np.ndarray | None = None,
                 sh_degree: int = 0, provenance=None) -> SplatScene:
    """Isotropic one-Gaussian-per-surfel scene; DC band carries `colors`."""
    n = len(surfels)
    sh = np.zeros((n, 3, num_sh_coeffs(sh_degree)))
    if colors is not None:
        sh[:, :, 0] = (colors - 0.5) / SH_DC
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return SplatScene(
        mu=surfels.position.copy(),
        rot=rot,
        log_scale=np.log(np.repeat(surfels.radius[:, None], 3, axis=1)),
        logit_opacity=np.full(n, SURFEL_OPACITY_LOGIT),
        sh=sh,
        provenance=provenance,
    )


def gt_render(surfels: SurfelSet, light: LightSpec, pose: PoseW2C,
              cam: CameraModel, exponent: float = 128.0, strength: float = 0.9,
              ambient: float = 0.0) -> np.ndarray:
    """Oracle ground truth: view-dependent surfel colors through the
    reference compositor."""
    colors = blinn_phong(surfels, light, camera_center(pose),
                         exponent, strength, ambient)
    scene = surfel_scene(surfels, colors)
    projected = project_scene(scene, pose, cam, sh_degree=0)
    return composite_reference(projected, cam).pixels


# ---------------------------------------------------------------------------
# Camera rigs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrbitSpec:
    radius: float = 3.0
    elevation_deg: float = 30.0
    target: tuple = (0.0, 0.0, 0.5)
    image_size: int = 64
    fov_deg: float = 55.0


@dataclass
class CameraRig:
    poses: list
    cams: list
    splits: list              # "train" | "test" per camera

    def __len__(self):
        return len(self.poses)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def views(self, split: str):
        return [(self.poses[i], self.cams[i]) for i in self.indices(split)]


def _orbit_camera(azimuth: float, orbit: OrbitSpec) -> tuple[PoseW2C, CameraModel]:
    el = math.radians(orbit.elevation_deg)
    target = np.asarray(orbit.target)
    eye = target + orbit.radius * np.array([
        math.cos(el) * math.cos(azimuth),
        math.cos(el) * math.sin(azimuth),
        math.sin(el),
    ])
    pose = look_at_pose(eye, target)
    size = orbit.image_size
    f = 0.5 * size / math.tan(0.5 * math.radians(orbit.fov_deg))
    cam = CameraModel(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                      width=size, height=size)
    return pose, cam


def make_rig(n_train: int, n_test: int, orbit: OrbitSpec | None = None,
             seed: int = 0) -> CameraRig:
    """Orbit rig looking at the scene target: train azimuths evenly spaced,
    test azimuths interleaved at the midpoints."""
    if n_train < 2:
        raise ValueError("need at least 2 train views")
    orbit = orbit or OrbitSpec()
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    poses, cams, splits = [], [], []
    train_az = phase + np.arange(n_train) * (2.0 * math.pi / n_train)
    for az in train_az:
        pose, cam = _orbit_camera(az, orbit)
        poses.append(pose)
        cams.append(cam)
        splits.append("train")
    if n_test > 0:
        step = max(1, n_train // n_test)
        mids = [train_az[(i * step) % n_train] + math.pi / n_train
                for i in range(n_test)]
        for az in mids:
            pose, cam = _orbit_camera(az, orbit)
            poses.append(pose)
            cams.append(cam)
            splits.append("test")
    return CameraRig(poses, cams, splits)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    """Rig + ground-truth images (+ the generating spec and surfels)."""

    spec: SceneSpec
    surfels: SurfelSet
    light: LightSpec
    rig: CameraRig
    images: list

    def views(self, split: str):
        idx = self.rig.indices(split)
        return [(self.rig.poses[i], self.rig.cams[i], self.images[i]) for i in idx]

    @property
    def n_views(self):
        return len(self.rig)


def build_dataset(spec: SceneSpec, n_train: int = 10, n_test: int = 4,
                  orbit: OrbitSpec | None = None, seed: int | None = None) -> SyntheticDataset:
    seed = spec.seed if seed is None else seed
    surfels, light = make_scene(spec)
    rig = make_rig(n_train, n_test, orbit, seed=seed)
    images = [gt_render(surfels, light, pose, cam, spec.specular_exponent,
                        spec.specular_strength, spec.ambient)
              for pose, cam in zip(rig.poses, rig.cams)]
    return SyntheticDataset(spec, surfels, light, rig, images)


def default_specular_spec(seed: int = 0) -> SceneSpec:
    """Benchmark scene: glossy sphere on a plane. Exponent 64 keeps the
    highlight lobe wider than the orbit's view spacing (so held-out views are
    interpolatable) yet sharper than a low-degree SH fit can track."""
    return SceneSpec(
        seed=seed,
        surfaces=(
            PlaneSpec(center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0),
                      extent=(2.0, 2.0), albedo=(0.42, 0.45, 0.50), count=420),
            SphereSpec(center=(0.0, 0.0, 0.85), radius=0.85,
                       albedo=(0.55, 0.22, 0.18), count=420),
        ),
        specular_exponent=64.0,
    )


def default_lambertian_spec(seed: int = 0) -> SceneSpec:
    return replace(default_specular_spec(seed), specular_strength=0.0)


# ---------------------------------------------------------------------------
# Analytic ray casting (pixel-anchored scenes for pose experiments)
# ---------------------------------------------------------------------------

def _ray_plane(origin, dirs, surf: PlaneSpec):
    n = np.asarray(surf.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    u, v = _plane_axes(n)
    center = np.asarray(surf.center)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((center - origin) @ n) / denom
    rel = origin + t[:, None] * dirs - center
    inside = (np.abs(rel @ u) <= surf.extent[0]) & (np.abs(rel @ v) <= surf.extent[1])
    t = np.where((np.abs(denom) > 1e-12) & (t > 1e-6) & inside, t, np.inf)
    return t


def _ray_sphere(origin, dirs, surf: SphereSpec):
    oc = origin - np.asarray(surf.center)
    b = dirs @ oc
    c = oc @ oc - surf.radius ** 2
    disc = b * b - c
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    cand = np.where(t_near > 1e-6, t_near, t_far)
    t[ok & (cand > 1e-6)] = cand[ok & (cand > 1e-6)]
    return t


def raycast_scene(spec: SceneSpec, pose: PoseW2C, cam: CameraModel,
                  pixel_stride: int = 4):
    """Cast rays through a pixel-center grid and return surface hits.

    Returns (positions, pixel flat indices) for rays that hit a surface.
    """
    cols = np.arange(0, cam.width, pixel_stride)
    rows = np.arange(0, cam.height, pixel_stride)
    cc, rr = np.meshgrid(cols, rows)
    cc, rr = cc.ravel(), rr.ravel()
    x = (cc + 0.5 - cam.cx) / cam.fx
    y = (rr + 0.5 - cam.cy) / cam.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ pose.R           # R^T applied row-wise
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = camera_center(pose)

    t_best = np.full(len(dirs), np.inf)
    for surf in spec.surfaces:
        if isinstance(surf, PlaneSpec):
            t_s = _ray_plane(origin, dirs, surf)
        else:
            t_s = _ray_sphere(origin, dirs, surf)
        t_best = np.minimum(t_best, t_s)
    hit = np.isfinite(t_best)
    positions = origin + t_best[hit, None] * dirs[hit]
    flat = rr[hit] * cam.width + cc[hit]
    return positions, flat


def pixel_anchored_scene(spec: SceneSpec, rig: CameraRig,
                         pixel_stride: int = 4, sh_degree: int = 0,
                         base_color: float = 0.6) -> SplatScene:
    """Scene whose Gaussians sit exactly on the surface points seen through
    pixel centers of the train views, with matching provenance records.

    By construction the reprojection loss is zero at the rig's poses.
    """
    positions, prov = [], []
    train = rig.indices("train")
    for v in train:
        pts, flat = raycast_scene(spec, rig.poses[v], rig.cams[v], pixel_stride)
        positions.append(pts)
        prov.append(np.stack([np.full(len(flat), v), flat], axis=-1))
    pos = np.concatenate(positions)
    prov = np.concatenate(prov)
    n = len(pos)
    # smooth positional colors: rays from different views hitting the same
    # surface point get identical colors, so depth-sort ties between such
    # near-coincident splats cannot jitter the rendering
    phase = np.array([0.0, 1.3, 2.6]) + spec.seed
    waves = 0.3 * np.sin(2.1 * pos[:, [0, 1, 2]] + phase)
    colors = np.clip(base_color - 0.2 + waves, 0.05, 0.95)
    sh = np.zeros((n, 3, num_sh_coeffs(sh_degree)))
    sh[:, :, 0] = (colors - 0.5) / SH_DC
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    # footprint ~ the world-space spacing of the ray grid at each hit's depth
    radii = []
    for v, pts in zip(train, positions):
        depth = np.linalg.norm(pts - camera_center(rig.poses[v]), axis=-1)
        radii.append(0.9 * pixel_stride * depth / rig.cams[v].fx)
    radius = np.concatenate(radii)
    return SplatScene(
        mu=pos, rot=rot,
        log_scale=np.log(np.repeat(radius[:, None], 3, axis=1)),
        logit_opacity=np.full(n, SURFEL_OPACITY_LOGIT),
        sh=sh, provenance=prov)


def static_sh_residual(surfels: SurfelSet, light: LightSpec, spec: SceneSpec,
                       rig: CameraRig) -> float:
    """Mean absolute residual of the best per-surfel constant (degree-0)
    color fit across train views, measured on the specular highlight region."""
    train = rig.views("train")
    colors = np.stack([
        blinn_phong(surfels, light, camera_center(pose),
                    spec.specular_exponent, spec.specular_strength, spec.ambient)
        for pose, _ in train])                         # (V, N, 3)
    best_fit = colors.mean(axis=0, keepdims=True)
    resid = np.abs(colors - best_fit)
    spec_term = colors.max(axis=0) - colors.min(axis=0)   # view-varying region
    highlight = np.any(spec_term > 0.05, axis=-1)
    if not np.any(highlight):
        return 0.0
    return float(resid[:, highlight, :].mean())
