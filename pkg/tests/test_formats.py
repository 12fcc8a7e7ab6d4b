import json
import os

import numpy as np
import pytest

from conftest import random_scene
from dynsplat import formats
from dynsplat.formats import (Checkpoint, IoError, MalformedPly, SchemaError,
                              UnsupportedLayout, load_cameras, load_checkpoint,
                              load_dataset, load_image_float, load_image_png,
                              read_ply, rig_to_json, save_cameras,
                              save_checkpoint, save_dataset, save_image_float,
                              save_image_png, write_ply, write_manifest)
from dynsplat.splats import SplatScene
from dynsplat.synth import OrbitSpec, build_dataset, default_specular_spec, make_rig
from dynsplat.viewadapt import HyperNet


@pytest.fixture
def scene():
    rng = np.random.default_rng(0)
    s = random_scene(rng, 7, sh_degree=2)
    s.rot /= np.linalg.norm(s.rot, axis=1, keepdims=True)
    return s


# -- PLY ---------------------------------------------------------------------------

def test_ply_roundtrip_exact_as_float32(tmp_path, scene):
    path = str(tmp_path / "scene.ply")
    write_ply(scene, path)
    back = read_ply(path)
    for name in ("mu", "log_scale", "logit_opacity", "sh"):
        np.testing.assert_array_equal(getattr(back, name),
                                      getattr(scene, name).astype(np.float32)
                                      .astype(np.float64))
    # quaternions are normalized on read (documented exception)
    q32 = scene.rot.astype(np.float32).astype(np.float64)
    np.testing.assert_allclose(back.rot,
                               q32 / np.linalg.norm(q32, axis=1, keepdims=True),
                               atol=1e-15)


def test_ply_read_normalizes_quaternions(tmp_path, scene):
    scene.rot *= 3.0
    path = str(tmp_path / "scene.ply")
    write_ply(scene, path)
    back = read_ply(path)
    np.testing.assert_allclose(np.linalg.norm(back.rot, axis=1), 1.0, atol=1e-6)


def test_ply_loads_lower_degree_with_padding(tmp_path):
    rng = np.random.default_rng(1)
    low = random_scene(rng, 4, sh_degree=3)     # K = 16
    path = str(tmp_path / "deg3.ply")
    write_ply(low, path)
    up = read_ply(path, sh_degree=4)            # K = 25
    assert up.sh.shape[2] == 25
    np.testing.assert_array_equal(
        up.sh[:, :, :16], low.sh.astype(np.float32).astype(np.float64))
    assert not up.sh[:, :, 16:].any()
    with pytest.raises(UnsupportedLayout):
        read_ply(path, sh_degree=2)             # no silent truncation


def test_ply_truncated_file_reports_offset(tmp_path, scene):
    path = str(tmp_path / "scene.ply")
    write_ply(scene, path)
    blob = open(path, "rb").read()
    cut = len(blob) - 10
    open(path, "wb").write(blob[:cut])
    with pytest.raises(MalformedPly) as exc:
        read_ply(path)
    assert exc.value.offset == cut


def test_ply_missing_property_unsupported(tmp_path):
    header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
              b"property float x\nproperty float y\nproperty float z\n"
              b"end_header\n")
    path = str(tmp_path / "bad.ply")
    open(path, "wb").write(header + np.zeros(3, "<f4").tobytes())
    with pytest.raises(UnsupportedLayout):
        read_ply(path)


def test_ply_not_a_ply(tmp_path):
    path = str(tmp_path / "nope.ply")
    open(path, "wb").write(b"not a ply at all")
    with pytest.raises(MalformedPly) as exc:
        read_ply(path)
    assert exc.value.offset == 0


def test_ply_field_order_matches_community_layout(tmp_path, scene):
    path = str(tmp_path / "scene.ply")
    write_ply(scene, path)
    text = open(path, "rb").read().split(b"end_header")[0].decode()
    props = [l.split()[-1] for l in text.splitlines() if l.startswith("property")]
    k = scene.sh.shape[2]
    assert props[:9] == ["x", "y", "z", "nx", "ny", "nz",
                         "f_dc_0", "f_dc_1", "f_dc_2"]
    assert props[9:9 + 3 * (k - 1)] == [f"f_rest_{i}" for i in range(3 * (k - 1))]
    assert props[9 + 3 * (k - 1):] == ["opacity", "scale_0", "scale_1",
                                       "scale_2", "rot_0", "rot_1", "rot_2",
                                       "rot_3"]


# -- cameras ------------------------------------------------------------------------

def test_camera_roundtrip_exact(tmp_path):
    rig = make_rig(4, 2, OrbitSpec(), seed=3)
    path = str(tmp_path / "cameras.json")
    save_cameras(rig, path)
    back = load_cameras(path)
    assert back.splits == rig.splits
    for pa, pb in zip(rig.poses, back.poses):
        assert np.abs(pa.matrix4() - pb.matrix4()).max() <= 1e-15
    for ca, cb in zip(rig.cams, back.cams):
        assert ca == cb


def test_camera_identity_serialization(tmp_path):
    from dynsplat.geometry import CameraModel, PoseW2C
    from dynsplat.synth import CameraRig
    rig = CameraRig([PoseW2C.identity()],
                    [CameraModel(10.0, 10.0, 2.0, 2.0, 4, 4)], ["train"])
    doc = rig_to_json(rig)
    assert doc["cameras"][0]["w2c"] == np.eye(4).tolist()


def test_camera_schema_error_names_field(tmp_path):
    rig = make_rig(2, 0, seed=0)
    path = str(tmp_path / "cameras.json")
    save_cameras(rig, path)
    doc = json.load(open(path))
    del doc["cameras"][0]["fx"]
    json.dump(doc, open(path, "w"))
    with pytest.raises(SchemaError, match=r"cameras\[0\]\.fx"):
        load_cameras(path)


def test_camera_schema_error_on_bad_type(tmp_path):
    rig = make_rig(2, 0, seed=0)
    path = str(tmp_path / "cameras.json")
    save_cameras(rig, path)
    doc = json.load(open(path))
    doc["cameras"][1]["width"] = "wide"
    json.dump(doc, open(path, "w"))
    with pytest.raises(SchemaError, match=r"cameras\[1\]\.width"):
        load_cameras(path)


# -- images -------------------------------------------------------------------------

def test_float_image_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (9, 7, 3))
    path = str(tmp_path / "img.npy")
    save_image_float(img, path)
    np.testing.assert_array_equal(load_image_float(path), img)


def test_png_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (8, 8, 3))
    path = str(tmp_path / "img.png")
    save_image_png(img, path)
    back = load_image_png(path)
    assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-12


def test_png_clamps_and_warns(tmp_path):
    img = np.full((4, 4, 3), 1.5)
    path = str(tmp_path / "hot.png")
    with pytest.warns(UserWarning):
        save_image_png(img, path)
    np.testing.assert_allclose(load_image_png(path), 1.0)


def test_image_io_error():
    with pytest.raises(IoError):
        load_image_float("/nonexistent/img.npy")


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, scene):
    net = HyperNet(len(scene), sh_degree=scene.sh_degree, hidden_dim=4,
                   context_dim=8, gen_hidden=12, seed=1)
    rng = np.random.default_rng(4)
    net.gen_W2 = rng.normal(size=net.gen_W2.shape)
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, scene, hypernet=net,
                    header={"seed": 11, "pose_mode": "log"},
                    optimizer_state={"m__x": np.arange(3.0)})
    ck = load_checkpoint(path)
    assert ck.header["seed"] == 11
    for name in SplatScene.FIELDS:
        np.testing.assert_array_equal(getattr(ck.scene, name),
                                      getattr(scene, name))
    for name in HyperNet.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(ck.hypernet, name),
                                      getattr(net, name))
    np.testing.assert_array_equal(ck.optimizer_state["m__x"], np.arange(3.0))


def test_checkpoint_degree_mismatch_fails_fast(tmp_path, scene):
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, scene)
    with pytest.raises(ValueError, match="sh_degree"):
        load_checkpoint(path, expect_sh_degree=scene.sh_degree + 1)
    ck = load_checkpoint(path, expect_sh_degree=scene.sh_degree)
    assert ck.hypernet is None


# -- dataset layout -------------------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    ds = build_dataset(default_specular_spec(3), n_train=3, n_test=1,
                       orbit=OrbitSpec(image_size=24))
    root = str(tmp_path / "data")
    save_dataset(ds, root)
    back = load_dataset(root)
    assert back.spec == ds.spec
    assert len(back.images) == len(ds.images)
    for a, b in zip(ds.images, back.images):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.surfels.position, ds.surfels.position)
    for pa, pb in zip(ds.rig.poses, back.rig.poses):
        assert np.abs(pa.matrix4() - pb.matrix4()).max() <= 1e-15


def test_dataset_missing_image_raises(tmp_path):
    ds = build_dataset(default_specular_spec(3), n_train=3, n_test=1,
                       orbit=OrbitSpec(image_size=24))
    root = str(tmp_path / "data")
    save_dataset(ds, root)
    os.unlink(os.path.join(root, "images", "view_001.npy"))
    with pytest.raises(IoError, match="matching image"):
        load_dataset(root)


def test_manifest_written(tmp_path):
    out = str(tmp_path / "run")
    write_manifest(out, "synth", {"seed": 5, "scene": "specular"}, 5)
    doc = json.load(open(os.path.join(out, "manifest.json")))
    assert doc["command"] == "synth"
    assert doc["seed"] == 5
    assert doc["args"]["scene"] == "specular"
    assert doc["format_version"] == 1
