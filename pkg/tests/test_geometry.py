import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsplat.geometry import (BehindCamera, CameraModel, DegenerateInput,
                               PoseW2C, ViewFeature4D, camera_center,
                               look_at_pose, pose_feature_4d, pose_features,
                               project, rotation_from_6d, rotation_to_6d)

unit_interval = st.floats(-1.0, 1.0)


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0.0],
                     [math.sin(a), math.cos(a), 0.0],
                     [0.0, 0.0, 1.0]])


# -- rotation_from_6d --------------------------------------------------------

def test_rotation_identity_case():
    np.testing.assert_allclose(rotation_from_6d(np.array([1., 0, 0, 0, 1, 0])),
                               np.eye(3), atol=1e-12)


def test_rotation_scale_invariance():
    np.testing.assert_allclose(rotation_from_6d(np.array([2., 0, 0, 0, 3, 0])),
                               np.eye(3), atol=1e-12)


def test_rotation_hand_gram_schmidt():
    R = rotation_from_6d(np.array([0., 1, 0, 1, 0, 0]))
    np.testing.assert_allclose(R[:, 0], [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(R[:, 1], [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(R[:, 2], [0, 0, -1], atol=1e-12)


def test_rotation_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        rotation_from_6d(np.zeros(6))
    with pytest.raises(DegenerateInput):
        rotation_from_6d(np.array([1., 0, 0, 2., 0, 0]))   # parallel


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_rotation_orthonormal_det_one(v):
    v = np.asarray(v)
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= 1e-6:
        return
    resid = a2 - (a2 @ a1 / n1**2) * a1
    if np.linalg.norm(resid) <= 1e-6:
        return
    R = rotation_from_6d(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) <= 1e-9


def test_rotation_roundtrip_6d():
    rng = np.random.default_rng(0)
    for _ in range(20):
        R = rotation_from_6d(rng.normal(size=6))
        np.testing.assert_allclose(rotation_from_6d(rotation_to_6d(R)), R,
                                   atol=1e-12)


def test_rotation_batched_matches_single():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(5, 6))
    batched = rotation_from_6d(v)
    for i in range(5):
        np.testing.assert_allclose(batched[i], rotation_from_6d(v[i]), atol=1e-14)


# -- camera_center ------------------------------------------------------------

def test_camera_center_identity():
    assert np.allclose(camera_center(PoseW2C.identity()), 0.0)


def test_camera_center_identity_rotation_translation():
    pose = PoseW2C(np.eye(3), np.array([1., 2, 3]))
    np.testing.assert_allclose(camera_center(pose), [-1, -2, -3])


def test_camera_center_rot90():
    pose = PoseW2C(rot_z(90), np.array([1., 0, 0]))
    np.testing.assert_allclose(camera_center(pose), [0, 1, 0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_camera_center_roundtrip(v):
    v = np.asarray(v)
    a1, a2 = v[:3], v[3:6]
    if np.linalg.norm(a1) <= 1e-3:
        return
    resid = a2 - (a2 @ a1 / max(np.linalg.norm(a1)**2, 1e-12)) * a1
    if np.linalg.norm(resid) <= 1e-3:
        return
    pose = PoseW2C(rotation_from_6d(v[:6]), v[6:])
    C = camera_center(pose)
    np.testing.assert_allclose(pose.R @ C + pose.t, 0.0, atol=1e-9)


# -- pose_feature_4d ----------------------------------------------------------

def test_pose_feature_direct_evaluation():
    # camera at (3, 0, 4): d = C - mu has norm 5
    pose = PoseW2C(np.eye(3), -np.array([3., 0, 4]))
    feat = pose_feature_4d(np.zeros(3), pose)
    np.testing.assert_allclose(feat.u, [0.6, 0, 0.8], atol=1e-12)
    assert feat.l == pytest.approx(math.log(5.0 + 1e-6), abs=1e-12)
    assert feat.l == pytest.approx(1.6094379, abs=1e-5)


def test_pose_feature_degenerate_fallback():
    pose = PoseW2C(np.eye(3), -np.array([1., 1, 1]))
    feat = pose_feature_4d(np.array([1., 1, 1]), pose)
    np.testing.assert_allclose(feat.u, [0, 0, 1])
    assert feat.l == pytest.approx(math.log(1e-6), abs=1e-9)
    assert feat.l == pytest.approx(-13.8155, abs=1e-3)


def test_pose_feature_linear_unit_case():
    pose = PoseW2C(np.eye(3), -np.array([0., 0, 1]))
    feat = pose_feature_4d(np.zeros(3), pose, mode="linear")
    np.testing.assert_allclose(feat.u, [0, 0, 1], atol=1e-12)
    assert feat.l == pytest.approx(1.0, abs=1e-12)


def test_pose_feature_rejects_unknown_mode():
    with pytest.raises(ValueError):
        pose_feature_4d(np.zeros(3), PoseW2C.identity(), mode="cubic")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.floats(0.05, 10.0))
def test_pose_feature_unit_norm_and_monotone(mu, dist_scale):
    mu = np.asarray(mu)
    pose = look_at_pose(mu + np.array([0.3, -1.7, 0.9]) * dist_scale, mu)
    feat = pose_feature_4d(mu, pose)
    assert abs(np.linalg.norm(feat.u) - 1.0) <= 1e-9
    # l increases with camera distance
    pose_far = look_at_pose(mu + np.array([0.3, -1.7, 0.9]) * dist_scale * 2, mu)
    assert pose_feature_4d(mu, pose_far).l > feat.l


def test_log_and_linear_agree_on_nearest_gaussian():
    rng = np.random.default_rng(7)
    mu = rng.normal(size=(50, 3))
    pose = look_at_pose(np.array([0.0, -4.0, 1.0]), np.zeros(3))
    _, l_log = pose_features(mu, pose.R, pose.t, "log")
    _, l_lin = pose_features(mu, pose.R, pose.t, "linear")
    assert np.argmin(l_log) == np.argmin(l_lin)


def test_view_feature_validates_unit_norm():
    with pytest.raises(ValueError):
        ViewFeature4D(np.array([1.0, 1.0, 0.0]), 0.0)


# -- project ------------------------------------------------------------------

def test_project_principal_point():
    cam = CameraModel(fx=100., fy=100., cx=32., cy=32., width=64, height=64)
    pix = project(cam, PoseW2C.identity(), np.array([0., 0, 2.5]))
    np.testing.assert_allclose(pix, [32, 32], atol=1e-12)


def test_project_hand_value():
    cam = CameraModel(fx=100., fy=100., cx=32., cy=32., width=64, height=64)
    pix = project(cam, PoseW2C.identity(), np.array([1., 0, 2]))
    np.testing.assert_allclose(pix, [82, 32], atol=1e-12)


def test_project_behind_camera():
    cam = CameraModel(fx=100., fy=100., cx=32., cy=32., width=64, height=64)
    with pytest.raises(BehindCamera):
        project(cam, PoseW2C.identity(), np.array([0., 0, -1]))


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.2, 5.0),
       st.floats(0.1, 10.0))
def test_project_depth_scale_invariance(x, y, z, k):
    cam = CameraModel(fx=75., fy=60., cx=31.5, cy=30.5, width=64, height=60)
    p1 = project(cam, PoseW2C.identity(), np.array([x, y, z]))
    p2 = project(cam, PoseW2C.identity(), np.array([x * k, y * k, z * k]))
    np.testing.assert_allclose(p1, p2, atol=1e-9)


def test_camera_model_validation():
    with pytest.raises(ValueError):
        CameraModel(fx=-1., fy=1., cx=0., cy=0., width=4, height=4)
    with pytest.raises(ValueError):
        CameraModel(fx=1., fy=1., cx=0., cy=0., width=0, height=4)


def test_pose_validation_rejects_non_rotation():
    with pytest.raises(ValueError):
        PoseW2C(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        PoseW2C(-np.eye(3), np.zeros(3))   # det -1
