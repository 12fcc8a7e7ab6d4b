import csv
import json
import os

import numpy as np
import pytest

from dynsplat.cli import main
from dynsplat.formats import load_checkpoint, load_image_float


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli") / "data")
    code = run(["synth", "--scene", "specular", "--seed", "3", "--n-train", "4",
                "--n-test", "2", "--image-size", "24", "--out", root])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def static_ckpt(dataset_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "static")
    code = run(["fit-static", "--data", dataset_dir, "--out", out,
                "--steps", "10", "--lr", "3e-3", "--sh-degree", "1",
                "--seed", "3"])
    assert code == 0
    return os.path.join(out, "checkpoint.npz")


@pytest.fixture(scope="module")
def view_ckpt(dataset_dir, static_ckpt, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "view")
    code = run(["fit-view", "--data", dataset_dir, "--base", static_ckpt,
                "--out", out, "--steps", "8", "--lr", "1e-3",
                "--hidden-dim", "8", "--seed", "3"])
    assert code == 0
    return os.path.join(out, "checkpoint.npz")


def test_synth_writes_layout_and_manifest(dataset_dir):
    for name in ("scene.json", "cameras.json", "splits.json", "manifest.json"):
        assert os.path.exists(os.path.join(dataset_dir, name))
    for i in range(6):
        assert os.path.exists(os.path.join(dataset_dir, "images",
                                           f"view_{i:03d}.npy"))
        assert os.path.exists(os.path.join(dataset_dir, "images",
                                           f"view_{i:03d}.png"))
    manifest = json.load(open(os.path.join(dataset_dir, "manifest.json")))
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3


def test_synth_deterministic_byte_identical(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    for out in (a, b):
        assert run(["synth", "--seed", "7", "--n-train", "3", "--n-test", "1",
                    "--image-size", "16", "--out", out]) == 0
    for name in ("scene.json", "cameras.json", "splits.json"):
        assert open(os.path.join(a, name), "rb").read() == \
            open(os.path.join(b, name), "rb").read()
    for i in range(4):
        fa = os.path.join(a, "images", f"view_{i:03d}.npy")
        fb = os.path.join(b, "images", f"view_{i:03d}.npy")
        assert open(fa, "rb").read() == open(fb, "rb").read()


def test_fit_static_checkpoint_loads(static_ckpt):
    ck = load_checkpoint(static_ckpt)
    assert ck.hypernet is None
    assert ck.scene.sh_degree == 1
    assert np.isfinite(ck.scene.mu).all()


def test_fit_view_checkpoint_has_hypernet(view_ckpt):
    ck = load_checkpoint(view_ckpt)
    assert ck.hypernet is not None
    assert ck.hypernet.hidden_dim == 8


def test_render_static_only_equals_zero_init_head(dataset_dir, static_ckpt,
                                                  view_ckpt, tmp_path):
    # a zero-step head equals zero-init; rendering with --static-only must
    # match rendering through the (zero-init) head exactly
    zero_out = str(tmp_path / "zero")
    assert run(["fit-view", "--data", dataset_dir, "--base", static_ckpt,
                "--out", zero_out, "--steps", "0", "--seed", "3"]) == 0
    zero_ckpt = os.path.join(zero_out, "checkpoint.npz")
    cams = os.path.join(dataset_dir, "cameras.json")
    r1 = str(tmp_path / "r1")
    r2 = str(tmp_path / "r2")
    assert run(["render", "--ckpt", zero_ckpt, "--cameras", cams,
                "--out", r1]) == 0
    assert run(["render", "--ckpt", zero_ckpt, "--cameras", cams,
                "--static-only", "--out", r2]) == 0
    for i in range(6):
        a = load_image_float(os.path.join(r1, f"render_{i:03d}.npy"))
        b = load_image_float(os.path.join(r2, f"render_{i:03d}.npy"))
        assert np.abs(a - b).max() <= 1e-6


def test_eval_writes_metrics_csv(dataset_dir, view_ckpt, tmp_path):
    out = str(tmp_path / "eval")
    assert run(["eval", "--ckpt", view_ckpt, "--data", dataset_dir,
                "--splits", "train,test", "--out", out]) == 0
    rows = list(csv.DictReader(open(os.path.join(out, "metrics.csv"))))
    assert {r["split"] for r in rows} == {"train", "test"}
    for r in rows:
        assert float(r["psnr"]) > 0


def test_ablate_offsets_csv_header(dataset_dir, tmp_path):
    out = str(tmp_path / "ab")
    assert run(["ablate", "--data", dataset_dir, "--out", out,
                "--offsets", "mu,alpha", "--steps", "2", "--base-steps", "2",
                "--sh-degree", "1", "--seed", "3"]) == 0
    with open(os.path.join(out, "ablation.csv")) as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames[:7] == ["scene", "variant", "sh_degree",
                                         "hidden_dim", "pose_mode", "offsets",
                                         "split"]
        rows = list(reader)
    assert all(r["offsets"] == "mu+alpha" for r in rows)
    assert len(rows) == 2       # train + test


def test_ablate_without_selection_fails(dataset_dir, tmp_path):
    out = str(tmp_path / "none")
    assert run(["ablate", "--data", dataset_dir, "--out", out]) == 1


def test_bench_reports_backends(view_ckpt, dataset_dir, tmp_path):
    out = str(tmp_path / "bench")
    cams = os.path.join(dataset_dir, "cameras.json")
    assert run(["bench", "--ckpt", view_ckpt, "--cameras", cams,
                "--repeats", "3", "--warmup", "1", "--compare-backends",
                "--out", out]) == 0
    doc = json.load(open(os.path.join(out, "bench.json")))
    assert "weight_generation_s" in doc
    assert all(v["fps"] > 0 for v in doc["backends"].values())


def test_recover_poses_command(dataset_dir, tmp_path):
    out = str(tmp_path / "poses")
    assert run(["recover-poses", "--data", dataset_dir, "--out", out,
                "--steps", "60", "--lr", "5e-3", "--max-rot-deg", "2",
                "--max-trans", "0.05", "--pixel-stride", "6",
                "--seed", "3"]) == 0
    doc = json.load(open(os.path.join(out, "pose_errors.json")))
    for row in doc["poses"]:
        assert row["rot_err_deg"] < row["rot_err_init_deg"]
        assert row["trans_err"] < row["trans_err_init"]


def test_usage_error_exits_one(capsys):
    assert run(["fit-static", "--out", "/tmp/x"]) == 1      # missing --data
    err = capsys.readouterr().err
    assert "--data" in err


def test_unknown_subcommand_exits_one():
    assert run(["explode"]) == 1


def test_missing_file_validation_error(tmp_path):
    out = str(tmp_path / "e")
    code = run(["eval", "--ckpt", "/nonexistent.npz", "--data", "/nope",
                "--out", out])
    assert code == 1


def test_fit_joint_command(dataset_dir, view_ckpt, tmp_path):
    out = str(tmp_path / "joint")
    assert run(["fit-joint", "--data", dataset_dir, "--ckpt", view_ckpt,
                "--out", out, "--steps", "2", "--lr", "1e-3",
                "--seed", "3"]) == 0
    ck = load_checkpoint(os.path.join(out, "checkpoint.npz"))
    assert ck.hypernet is not None


def test_fit_joint_requires_view_head(dataset_dir, static_ckpt, tmp_path):
    out = str(tmp_path / "joint_bad")
    assert run(["fit-joint", "--data", dataset_dir, "--ckpt", static_ckpt,
                "--out", out, "--steps", "1"]) == 1
