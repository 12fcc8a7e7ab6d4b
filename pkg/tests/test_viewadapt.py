import numpy as np
import pytest

from conftest import random_scene
from dynsplat.geometry import PoseW2C, ViewFeature4D, look_at_pose
from dynsplat.raster import RenderOptions, render
from dynsplat.splats import GaussianPrimitive
from dynsplat.viewadapt import (HyperNet, OffsetFlags, OffsetVector,
                                RefineConfig, SizeMismatch, ViewMlpWeights,
                                apply_offsets, generate_theta, generate_weights,
                                mlp_out_dim, refine_batch, refine_scene,
                                theta_size, view_mlp_forward)


def make_net(n=6, degree=1, hidden=4, seed=0, **kw):
    return HyperNet(n, sh_degree=degree, hidden_dim=hidden, context_dim=8,
                    gen_hidden=12, seed=seed, **kw)


# -- weight generation ----------------------------------------------------------

def test_zero_init_generates_zero_output_layer_and_theta():
    net = make_net()
    theta = generate_theta(net.param_arrays())
    assert not theta.any()                       # generated residuals all zero
    for w in generate_weights(net, range(6)):
        assert not w.W2.any() and not w.b2.any()  # offsets exactly zero
        np.testing.assert_array_equal(w.W1, net.tpl_W1)
        np.testing.assert_array_equal(w.b1, net.tpl_b1)


def test_theta_size_shape_arithmetic():
    # hidden 16, degree 4 (K=25): M = 11 + 75 = 86, theta = 64+16+1376+86
    assert mlp_out_dim(25) == 86
    assert theta_size(16, 86) == 1542
    net = HyperNet(3, sh_degree=4, hidden_dim=16)
    assert net.theta_dim == 1542
    w = generate_weights(net, [0])[0]
    assert w.W1.shape == (16, 4)
    assert w.W2.shape == (86, 16)


def test_identical_context_features_give_identical_theta():
    net = make_net()
    rng = np.random.default_rng(1)
    net.gen_W2 = rng.normal(size=net.gen_W2.shape)
    net.context_features[3] = net.context_features[1]
    theta = generate_theta(net.param_arrays())
    np.testing.assert_array_equal(theta[3], theta[1])


def test_generate_weights_index_bounds():
    net = make_net()
    with pytest.raises(IndexError):
        generate_weights(net, [7])


def test_dc_only_mode_shrinks_theta():
    net = make_net(sh_offset_mode="dc")
    assert net.out_dim == mlp_out_dim(1) == 14
    assert net.theta_dim == theta_size(4, 14)


# -- view MLP forward ------------------------------------------------------------

def test_zero_theta_zero_offsets():
    w = ViewMlpWeights(np.zeros((4, 4)), np.zeros(4), np.zeros((23, 4)),
                       np.zeros(23))
    out = view_mlp_forward(w, ViewFeature4D(np.array([0.0, 0, 1.0]), 1.3))
    assert not out.d_mu.any() and out.d_alpha == 0.0
    assert not out.d_rot.any() and not out.d_scale.any() and not out.d_sh.any()


def test_hand_computed_alpha_offset():
    # single hidden unit reading u_x; output row 3 (d_alpha) weighted 2
    k = 4
    m = mlp_out_dim(k)
    w2 = np.zeros((m, 1))
    w2[3, 0] = 2.0
    w = ViewMlpWeights(np.array([[1.0, 0, 0, 0]]), np.zeros(1), w2, np.zeros(m))
    feat = ViewFeature4D(np.array([0.6, 0.0, 0.8]), 1.6094)
    out = view_mlp_forward(w, feat)
    assert out.d_alpha == pytest.approx(1.2)
    assert not out.d_mu.any() and not out.d_rot.any()
    assert not out.d_scale.any() and not out.d_sh.any()


def test_relu_gates_negative_preactivation():
    k = 4
    m = mlp_out_dim(k)
    w2 = np.zeros((m, 1))
    w2[3, 0] = 2.0
    w = ViewMlpWeights(np.array([[-1.0, 0, 0, 0]]), np.zeros(1), w2, np.zeros(m))
    out = view_mlp_forward(w, ViewFeature4D(np.array([0.6, 0.0, 0.8]), 1.6094))
    assert out.d_alpha == 0.0


# -- apply_offsets ----------------------------------------------------------------

def _zero_offset(k):
    return OffsetVector(np.zeros(3), 0.0, np.zeros(4), np.zeros(3),
                        np.zeros((3, k)))


def test_zero_offsets_identity_up_to_quat_normalization():
    g = GaussianPrimitive([1, 2, 3], [2, 0, 0, 0], [0.1, 0.2, 0.3], 0.7,
                          np.ones((3, 4)))
    out = apply_offsets(g, _zero_offset(4))
    np.testing.assert_allclose(out.mu, g.mu)
    np.testing.assert_allclose(out.rot, [1, 0, 0, 0])   # normalized
    np.testing.assert_allclose(out.log_scale, g.log_scale)
    assert out.logit_opacity == g.logit_opacity
    np.testing.assert_allclose(out.sh, g.sh)


def test_rotation_offset_normalized_sum():
    g = GaussianPrimitive([0, 0, 0], [1, 0, 0, 0], [0, 0, 0], 0.0,
                          np.zeros((3, 1)))
    o = OffsetVector(np.zeros(3), 0.0, np.array([0.0, 1.0, 0, 0]), np.zeros(3),
                     np.zeros((3, 1)))
    out = apply_offsets(g, o)
    np.testing.assert_allclose(out.rot, [0.70710678, 0.70710678, 0, 0])


def test_rotation_cancel_falls_back_to_base():
    g = GaussianPrimitive([0, 0, 0], [1, 0, 0, 0], [0, 0, 0], 0.0,
                          np.zeros((3, 1)))
    o = OffsetVector(np.zeros(3), 0.0, np.array([-1.0, 0, 0, 0]), np.zeros(3),
                     np.zeros((3, 1)))
    out = apply_offsets(g, o)
    np.testing.assert_allclose(out.rot, [1, 0, 0, 0])


def test_opacity_stays_valid_for_any_alpha_offset():
    # beyond |logit| ~ 36 the sigmoid saturates to exactly 0/1 in float64;
    # the open-interval property is checked over the representable range
    g = GaussianPrimitive([0, 0, 0], [1, 0, 0, 0], [0, 0, 0], 0.0,
                          np.zeros((3, 1)))
    for d in (-30.0, -1.0, 0.0, 3.0, 30.0):
        o = OffsetVector(np.zeros(3), d, np.zeros(4), np.zeros(3),
                         np.zeros((3, 1)))
        out = apply_offsets(g, o)
        assert 0.0 < out.opacity < 1.0


def test_raw_clamped_space_keeps_validity():
    g = GaussianPrimitive([0, 0, 0], [1, 0, 0, 0], [0, 0, 0], 0.0,
                          np.zeros((3, 1)))
    o = OffsetVector(np.zeros(3), 5.0, np.zeros(4), np.array([-10.0, 0, 0]),
                     np.zeros((3, 1)))
    out = apply_offsets(g, o, offset_space="raw-clamped")
    assert 0.0 < out.opacity < 1.0
    assert np.all(out.scales > 0)


# -- refine_scene -----------------------------------------------------------------

@pytest.fixture
def scene_and_pose():
    rng = np.random.default_rng(3)
    scene = random_scene(rng, 6, sh_degree=1)
    pose = look_at_pose(np.array([0.0, -3.0, 1.0]), np.zeros(3))
    return scene, pose


def test_zero_init_refinement_is_identity(scene_and_pose):
    scene, pose = scene_and_pose
    net = make_net()
    refined = refine_scene(scene, net, pose)
    np.testing.assert_array_equal(refined.mu, scene.mu)
    np.testing.assert_allclose(
        refined.rot, scene.rot / np.linalg.norm(scene.rot, axis=1, keepdims=True))
    np.testing.assert_array_equal(refined.sh, scene.sh)


def test_disabled_flags_ignore_trained_head(scene_and_pose):
    scene, pose = scene_and_pose
    net = make_net()
    rng = np.random.default_rng(5)
    net.gen_W2 = rng.normal(size=net.gen_W2.shape)
    net.gen_b2 = rng.normal(size=net.gen_b2.shape)
    refined = refine_scene(scene, net, pose, flags=OffsetFlags.none())
    np.testing.assert_array_equal(refined.mu, scene.mu)
    np.testing.assert_array_equal(refined.sh, scene.sh)
    np.testing.assert_array_equal(refined.logit_opacity, scene.logit_opacity)


def test_masked_component_invariant_to_theta_rows(scene_and_pose):
    scene, pose = scene_and_pose
    net = make_net()
    rng = np.random.default_rng(6)
    net.gen_W2 = rng.normal(size=net.gen_W2.shape) * 0.1
    flags = OffsetFlags(mu=False, alpha=True, rot=True, scale=True, sh=True)
    a = refine_scene(scene, net, pose, flags=flags)
    # perturb generator rows that feed d_mu only
    d, m = net.hidden_dim, net.out_dim
    theta_mu_rows = list(range(5 * d, 5 * d + 3 * d)) + [5 * d + m * d + 0,
                                                         5 * d + m * d + 1,
                                                         5 * d + m * d + 2]
    net.gen_W2[theta_mu_rows] += rng.normal(size=(len(theta_mu_rows),
                                                  net.gen_hidden))
    b = refine_scene(scene, net, pose, flags=flags)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.logit_opacity, b.logit_opacity)


def test_refine_differs_across_poses_with_trained_head(scene_and_pose):
    scene, pose = scene_and_pose
    net = make_net()
    rng = np.random.default_rng(7)
    net.gen_W2 = rng.normal(size=net.gen_W2.shape) * 0.3
    net.gen_b2 = rng.normal(size=net.gen_b2.shape) * 0.3
    other = look_at_pose(np.array([2.5, 1.5, 0.5]), np.zeros(3))
    a = refine_scene(scene, net, pose)
    b = refine_scene(scene, net, other)
    assert np.abs(a.logit_opacity - b.logit_opacity).max() > 1e-8
    assert np.abs(a.sh - b.sh).max() > 1e-8


def test_size_mismatch(scene_and_pose):
    scene, pose = scene_and_pose
    with pytest.raises(SizeMismatch):
        refine_scene(scene, make_net(n=5), pose)


def test_zero_init_render_equivalence(scene_and_pose, small_cam):
    scene, pose = scene_and_pose
    net = make_net()
    base_img = render(scene, pose, small_cam)
    ref_img = render(refine_scene(scene, net, pose), pose, small_cam)
    assert np.abs(base_img.pixels - ref_img.pixels).max() <= 1e-6


def test_pose_batched_refine_matches_per_view(scene_and_pose):
    scene, pose = scene_and_pose
    other = look_at_pose(np.array([2.0, -2.0, 1.5]), np.zeros(3))
    net = make_net()
    rng = np.random.default_rng(8)
    net.gen_W2 = rng.normal(size=net.gen_W2.shape) * 0.2
    rc = RefineConfig.for_hypernet(net)
    r_all = np.stack([pose.R, other.R])
    t_all = np.stack([pose.t, other.t])
    batched = refine_batch(scene.param_arrays(), net.param_arrays(),
                           r_all, t_all, rc)
    for v, p in enumerate([pose, other]):
        single = refine_batch(scene.param_arrays(), net.param_arrays(),
                              p.R, p.t, rc)
        for key in single:
            np.testing.assert_allclose(batched[key][v], single[key], atol=1e-12)
