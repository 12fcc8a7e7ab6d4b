"""On-disk formats: splat PLY interop, camera JSON, images, checkpoints,
dataset layout, and run manifests. All writes are atomic
(temp-file-then-rename); floats in JSON carry 17 significant digits so
round trips are exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
import warnings

import numpy as np

from .geometry import CameraModel, PoseW2C
from .splats import SplatScene, num_sh_coeffs, sh_degree_from_coeffs, pad_sh_degree
from .synth import (CameraRig, LightSpec, PlaneSpec, SceneSpec, SphereSpec,
                    SyntheticDataset, make_scene)
from .viewadapt import HyperNet

FORMAT_VERSION = 1


class MalformedPly(ValueError):
    """Unparseable PLY; `offset` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedLayout(ValueError):
    """PLY parses but lacks required properties."""


class SchemaError(ValueError):
    """Camera JSON is missing or mistypes a field; names the field path."""


class IoError(OSError):
    """Filesystem-level failure while reading or writing an artifact."""


def atomic_write_bytes(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"failed writing {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# JSON with exact floats
# ---------------------------------------------------------------------------

def _encode_json(obj, indent: int = 0) -> str:
    """JSON text with floats at 17 significant digits (exact round trip)."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(f'{inner}{json.dumps(str(k))}: '
                           f'{_encode_json(v, indent + 1)}'
                           for k, v in obj.items())
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = ",\n".join(f"{inner}{_encode_json(v, indent + 1)}" for v in obj)
        return "[\n" + items + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, np.integer)):
        return json.dumps(None if obj is None else
                          bool(obj) if isinstance(obj, bool) else int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            return json.dumps(None)
        text = format(value, ".17g")
        return text if ("." in text or "e" in text or "n" in text) \
            else text + ".0"
    return json.dumps(obj)


def dump_json(obj, path: str):
    atomic_write_bytes(path, (_encode_json(obj) + "\n").encode())


def load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Splat PLY
# ---------------------------------------------------------------------------

def _ply_property_names(k: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def write_ply(scene: SplatScene, path: str):
    """Binary little-endian splat PLY, community field layout.

    f_rest is channel-major (all red coefficients, then green, then blue);
    opacity stays in logit space, scales in log space, quaternions as stored.
    """
    n = len(scene)
    k = scene.sh.shape[2]
    names = _ply_property_names(k)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header.append("end_header")
    data = np.zeros((n, len(names)), dtype="<f4")
    data[:, 0:3] = scene.mu
    data[:, 6:9] = scene.sh[:, :, 0]
    rest = scene.sh[:, :, 1:].reshape(n, -1)           # (N, 3*(K-1)) channel-major
    data[:, 9:9 + 3 * (k - 1)] = rest
    o = 9 + 3 * (k - 1)
    data[:, o] = scene.logit_opacity
    data[:, o + 1:o + 4] = scene.log_scale
    data[:, o + 4:o + 8] = scene.rot
    atomic_write_bytes(path, "\n".join(header).encode() + b"\n" + data.tobytes())


def read_ply(path: str, sh_degree: int | None = None) -> SplatScene:
    """Load a splat PLY. If `sh_degree` exceeds the stored degree the high
    bands are zero-padded; a lower request fails (no silent truncation).
    Quaternions are normalized on read."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc

    end_tag = b"end_header\n"
    end = blob.find(end_tag)
    if not blob.startswith(b"ply\n") or end < 0:
        raise MalformedPly("missing PLY header", 0)
    header_lines = blob[:end].decode("ascii", "replace").splitlines()
    data_start = end + len(end_tag)

    n = None
    props = []
    fmt_ok = False
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property" and len(parts) == 3:
            if parts[1] not in ("float", "float32"):
                raise UnsupportedLayout(f"property {parts[2]} is {parts[1]}, "
                                        "expected float")
            props.append(parts[2])
    if not fmt_ok:
        raise UnsupportedLayout("only binary_little_endian PLY is supported")
    if n is None:
        raise MalformedPly("no vertex element", data_start)

    rest_count = sum(p.startswith("f_rest_") for p in props)
    if rest_count % 3 != 0:
        raise UnsupportedLayout(f"f_rest count {rest_count} not divisible by 3")
    k = rest_count // 3 + 1
    try:
        stored_degree = sh_degree_from_coeffs(k)
    except ValueError as exc:
        raise UnsupportedLayout(str(exc)) from exc
    required = _ply_property_names(k)
    missing = [p for p in required if p not in props]
    if missing:
        raise UnsupportedLayout(f"missing properties: {missing[:4]}")

    expected = n * len(props) * 4
    if len(blob) - data_start < expected:
        raise MalformedPly(
            f"vertex data truncated: need {expected} bytes, have "
            f"{len(blob) - data_start}", len(blob))
    raw = np.frombuffer(blob, dtype="<f4", count=n * len(props),
                        offset=data_start).reshape(n, len(props))
    col = {p: i for i, p in enumerate(props)}

    mu = raw[:, [col["x"], col["y"], col["z"]]].astype(np.float64)
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = raw[:, [col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]]]
    if k > 1:
        rest_cols = [col[f"f_rest_{i}"] for i in range(3 * (k - 1))]
        sh[:, :, 1:] = raw[:, rest_cols].reshape(n, 3, k - 1)
    logit_opacity = raw[:, col["opacity"]].astype(np.float64)
    log_scale = raw[:, [col["scale_0"], col["scale_1"], col["scale_2"]]].astype(np.float64)
    rot = raw[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]].astype(np.float64)
    norms = np.linalg.norm(rot, axis=-1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise MalformedPly("zero-norm quaternion in vertex data", data_start)
    rot = rot / norms

    if sh_degree is not None:
        if sh_degree < stored_degree:
            raise UnsupportedLayout(
                f"file stores degree {stored_degree}, refusing to truncate "
                f"to {sh_degree}")
        sh = pad_sh_degree(sh, sh_degree)
    return SplatScene(mu, rot, log_scale, logit_opacity, sh)


# ---------------------------------------------------------------------------
# Camera JSON
# ---------------------------------------------------------------------------

def rig_to_json(rig: CameraRig) -> dict:
    cameras = []
    for pose, cam, split in zip(rig.poses, rig.cams, rig.splits):
        cameras.append({
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "w2c": pose.matrix4().tolist(),
            "split": split,
        })
    return {"cameras": cameras}


def save_cameras(rig: CameraRig, path: str):
    dump_json(rig_to_json(rig), path)


def _require(entry: dict, i: int, key: str, kinds):
    if key not in entry:
        raise SchemaError(f"cameras[{i}].{key}")
    value = entry[key]
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise SchemaError(f"cameras[{i}].{key}")
    return value


def load_cameras(path: str) -> CameraRig:
    doc = load_json(path)
    if not isinstance(doc, dict) or "cameras" not in doc:
        raise SchemaError("cameras")
    poses, cams, splits = [], [], []
    for i, entry in enumerate(doc["cameras"]):
        fx = _require(entry, i, "fx", (int, float))
        fy = _require(entry, i, "fy", (int, float))
        cx = _require(entry, i, "cx", (int, float))
        cy = _require(entry, i, "cy", (int, float))
        width = _require(entry, i, "width", int)
        height = _require(entry, i, "height", int)
        w2c = _require(entry, i, "w2c", list)
        split = _require(entry, i, "split", str)
        if split not in ("train", "test"):
            raise SchemaError(f"cameras[{i}].split")
        m = np.asarray(w2c, dtype=np.float64)
        if m.shape != (4, 4):
            raise SchemaError(f"cameras[{i}].w2c")
        try:
            poses.append(PoseW2C.from_matrix4(m))
            cams.append(CameraModel(fx, fy, cx, cy, width, height))
        except ValueError as exc:
            raise SchemaError(f"cameras[{i}]: {exc}") from exc
        splits.append(split)
    return CameraRig(poses, cams, splits)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def save_image_png(image: np.ndarray, path: str):
    """8-bit PNG with clamping; emits a warning for out-of-range inputs."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    if image.min() < -1e-9 or image.max() > 1.0 + 1e-9:
        warnings.warn(f"image values outside [0, 1] clamped for {path}")
    q = np.clip(np.round(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    buf = Image.fromarray(q, mode="RGB")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        buf.save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"failed writing {path}: {exc}") from exc


def load_image_png(path: str) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise IoError(str(exc)) from exc


def save_image_float(image: np.ndarray, path: str):
    """Lossless float64 image (metrics always run on these)."""
    import io as _io

    buf = _io.BytesIO()
    np.save(buf, np.asarray(image, dtype=np.float64))
    atomic_write_bytes(path, buf.getvalue())


def load_image_float(path: str) -> np.ndarray:
    try:
        return np.load(path)
    except OSError as exc:
        raise IoError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, scene: SplatScene, hypernet: HyperNet | None = None,
                    header: dict | None = None, optimizer_state: dict | None = None):
    """Single-file checkpoint: JSON header + float64 arrays, bit-exact."""
    hdr = {"format_version": FORMAT_VERSION, "sh_degree": scene.sh_degree}
    if header:
        hdr.update(header)
    if hypernet is not None:
        hdr["hypernet"] = hypernet.config_dict()
    arrays = {f"scene__{k}": v for k, v in scene.param_arrays().items()}
    if scene.context_features is not None:
        arrays["scene__context_features"] = scene.context_features
    if scene.provenance is not None:
        arrays["scene__provenance"] = scene.provenance
    if hypernet is not None:
        arrays.update({f"hyper__{k}": v for k, v in hypernet.param_arrays().items()})
    if optimizer_state:
        arrays.update({f"opt__{k}": v for k, v in optimizer_state.items()})
    import io as _io

    buf = _io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(hdr).encode(), dtype=np.uint8),
             **arrays)
    atomic_write_bytes(path, buf.getvalue())


@dataclasses.dataclass
class Checkpoint:
    header: dict
    scene: SplatScene
    hypernet: HyperNet | None
    optimizer_state: dict


def load_checkpoint(path: str, expect_sh_degree: int | None = None) -> Checkpoint:
    try:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
    except OSError as exc:
        raise IoError(str(exc)) from exc
    header = json.loads(bytes(data.pop("__header__")).decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{header.get('format_version')}")
    scene = SplatScene(
        data["scene__mu"], data["scene__rot"], data["scene__log_scale"],
        data["scene__logit_opacity"], data["scene__sh"],
        context_features=data.get("scene__context_features"),
        provenance=data.get("scene__provenance"))
    if scene.sh_degree != header["sh_degree"]:
        raise ValueError("checkpoint header degree disagrees with arrays")
    if expect_sh_degree is not None and expect_sh_degree != scene.sh_degree:
        raise ValueError(
            f"checkpoint stores sh_degree {scene.sh_degree}, caller requires "
            f"{expect_sh_degree}; refusing silent conversion")
    hypernet = None
    if "hypernet" in header:
        hypernet = HyperNet.from_arrays(
            header["hypernet"],
            {k: data[f"hyper__{k}"] for k in HyperNet.PARAM_NAMES})
    opt = {k[len("opt__"):]: v for k, v in data.items() if k.startswith("opt__")}
    return Checkpoint(header, scene, hypernet, opt)


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------

def spec_to_json(spec: SceneSpec) -> dict:
    surfaces = []
    for s in spec.surfaces:
        d = dataclasses.asdict(s)
        d["type"] = "plane" if isinstance(s, PlaneSpec) else "sphere"
        surfaces.append(d)
    return {
        "seed": spec.seed,
        "surfaces": surfaces,
        "light": dataclasses.asdict(spec.light),
        "specular_exponent": spec.specular_exponent,
        "specular_strength": spec.specular_strength,
        "ambient": spec.ambient,
    }


def spec_from_json(doc: dict) -> SceneSpec:
    surfaces = []
    for s in doc["surfaces"]:
        s = dict(s)
        kind = s.pop("type")
        for key in ("center", "normal", "extent", "albedo"):
            if key in s:
                s[key] = tuple(s[key])
        surfaces.append(PlaneSpec(**s) if kind == "plane" else SphereSpec(**s))
    light = LightSpec(position=tuple(doc["light"]["position"]),
                      intensity=doc["light"]["intensity"])
    return SceneSpec(seed=doc["seed"], surfaces=tuple(surfaces), light=light,
                     specular_exponent=doc["specular_exponent"],
                     specular_strength=doc["specular_strength"],
                     ambient=doc.get("ambient", 0.0))


def save_dataset(dataset: SyntheticDataset, root: str):
    os.makedirs(root, exist_ok=True)
    dump_json(spec_to_json(dataset.spec), os.path.join(root, "scene.json"))
    save_cameras(dataset.rig, os.path.join(root, "cameras.json"))
    dump_json({"splits": dataset.rig.splits}, os.path.join(root, "splits.json"))
    img_dir = os.path.join(root, "images")
    for i, img in enumerate(dataset.images):
        save_image_float(img, os.path.join(img_dir, f"view_{i:03d}.npy"))
        save_image_png(img, os.path.join(img_dir, f"view_{i:03d}.png"))


def load_dataset(root: str) -> SyntheticDataset:
    spec = spec_from_json(load_json(os.path.join(root, "scene.json")))
    rig = load_cameras(os.path.join(root, "cameras.json"))
    images = []
    for i in range(len(rig)):
        p = os.path.join(root, "images", f"view_{i:03d}.npy")
        if not os.path.exists(p):
            raise IoError(f"camera {i} has no matching image file {p}")
        images.append(load_image_float(p))
    surfels, light = make_scene(spec)
    return SyntheticDataset(spec, surfels, light, rig, images)


def write_manifest(out_dir: str, command: str, args: dict, seed: int):
    os.makedirs(out_dir, exist_ok=True)
    dump_json({
        "format_version": FORMAT_VERSION,
        "command": command,
        "seed": seed,
        "args": {k: v for k, v in sorted(args.items())},
    }, os.path.join(out_dir, "manifest.json"))
