"""Scene, camera and image files.

Scenes use the binary little-endian point format common to Gaussian splatting
tools (one ``vertex`` element, 32-bit float properties). SH coefficients are
stored as the DC triple ``f_dc_0..2`` followed by ``f_rest_0..44`` in
channel-major order: ``f_rest[c * 15 + k]`` holds coefficient ``k + 1`` of
channel ``c``. Cameras are JSON with explicit 4x4 world-to-view matrices.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation, Slerp

from .core_math import SH_COEFFS, BakedSplat, Camera, RawSplat, bake

N_REST = (SH_COEFFS - 1) * 3

SCENE_PROPERTIES = (["x", "y", "z", "nx", "ny", "nz"]
                    + [f"f_dc_{i}" for i in range(3)]
                    + [f"f_rest_{i}" for i in range(N_REST)]
                    + ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
REQUIRED = [p for p in SCENE_PROPERTIES if p not in ("nx", "ny", "nz")]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

CAMERA_FORMAT = "htsplat-cameras"
PATH_FORMAT = "htsplat-camera-path"
FORMAT_VERSION = 1
GAMMA = 2.2


class SchemaError(ValueError):
    """A scene or camera file lacks a required field or has an unsupported layout."""


class SceneIOError(OSError):
    """A scene file is truncated or unreadable."""


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise SchemaError("not a ply file (missing magic)")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype)])
    while True:
        line = f.readline()
        if not line:
            raise SceneIOError("unexpected end of file inside header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise SchemaError("property before any element")
            if words[1] == "list":
                raise SchemaError(f"list property {words[-1]!r} is not supported")
            if words[1] not in _PLY_TYPES:
                raise SchemaError(f"unknown type {words[1]!r} for property {words[2]!r}")
            elements[-1][2].append((words[2], "<" + _PLY_TYPES[words[1]]))
    if fmt != "binary_little_endian":
        raise SchemaError(f"unsupported ply format {fmt!r} (need binary_little_endian)")
    return elements


def load_scene(path) -> RawSplat:
    """Read a binary splat file; properties are matched by name, in any order."""
    with open(path, "rb") as f:
        elements = _parse_header(f)
        payload = f.read()
    offset = 0
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype(props)
        nbytes = dtype.itemsize * count
        if len(payload) < offset + nbytes:
            raise SceneIOError(f"truncated payload in element {name!r}: "
                               f"need {nbytes} bytes, have {len(payload) - offset}")
        if name == "vertex":
            vertex = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        offset += nbytes
    if vertex is None:
        raise SchemaError("no vertex element")
    names = set(vertex.dtype.names)
    for prop in REQUIRED:
        if prop not in names:
            raise SchemaError(f"missing property {prop!r}")

    def cols(keys):
        return np.stack([vertex[k].astype(np.float64) for k in keys], -1)

    n = len(vertex)
    dc = cols([f"f_dc_{i}" for i in range(3)])
    rest = cols([f"f_rest_{i}" for i in range(N_REST)]).reshape(n, 3, SH_COEFFS - 1)
    sh = np.concatenate([dc[:, None, :], rest.transpose(0, 2, 1)], axis=1)
    return RawSplat(
        mean=cols(["x", "y", "z"]),
        rot=cols([f"rot_{i}" for i in range(4)]),
        log_scales=cols([f"scale_{i}" for i in range(3)]),
        opacity_logit=vertex["opacity"].astype(np.float64),
        sh=sh,
    )


def scene_to_records(raw: RawSplat) -> np.ndarray:
    """Structured float32 records in the on-disk property order."""
    n = len(raw)
    rec = np.zeros(n, dtype=[(p, "<f4") for p in SCENE_PROPERTIES])
    mean = np.reshape(raw.mean, (n, 3))
    for i, k in enumerate("xyz"):
        rec[k] = mean[:, i]
    sh = np.reshape(raw.sh, (n, SH_COEFFS, 3))
    for c in range(3):
        rec[f"f_dc_{c}"] = sh[:, 0, c]
        for k in range(SH_COEFFS - 1):
            rec[f"f_rest_{c * (SH_COEFFS - 1) + k}"] = sh[:, 1 + k, c]
    rec["opacity"] = np.reshape(raw.opacity_logit, n)
    for i in range(3):
        rec[f"scale_{i}"] = np.reshape(raw.log_scales, (n, 3))[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = np.reshape(raw.rot, (n, 4))[:, i]
    return rec


def save_scene(raw: RawSplat, path) -> None:
    """Write a raw scene (values are stored as 32-bit floats, normals as zero)."""
    rec = scene_to_records(raw)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
    header += [f"property float {p}" for p in SCENE_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def bake_scene(raw: RawSplat) -> BakedSplat:
    """Activated, render-ready copy of a loaded scene with one contiguous SH buffer."""
    baked = bake(raw)
    baked.sh = np.ascontiguousarray(baked.sh, dtype=np.float64)
    return baked


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def camera_to_dict(cam: Camera, name=None) -> dict:
    d = dict(width=cam.width, height=cam.height, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
             near=cam.near, far=cam.far, world_to_view=cam.world_to_view.tolist())
    if name is not None:
        d["name"] = name
    return d


def camera_from_dict(d: dict) -> Camera:
    for key in ("width", "height", "fx", "fy", "cx", "cy", "world_to_view"):
        if key not in d:
            raise SchemaError(f"camera entry missing field {key!r}")
    return Camera(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                  float(d["cx"]), float(d["cy"]), np.array(d["world_to_view"], dtype=np.float64),
                  float(d.get("near", 0.01)), float(d.get("far", 100.0)))


def _check_header(doc, fmt):
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise SchemaError(f"expected a {fmt!r} document")
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported {fmt} version {doc.get('version')!r}")


def save_cameras(cams, path, names=None, metadata=None) -> None:
    names = names or [f"cam{i:03d}" for i in range(len(cams))]
    doc = dict(format=CAMERA_FORMAT, version=FORMAT_VERSION, metadata=metadata or {},
               cameras=[camera_to_dict(c, n) for c, n in zip(cams, names)])
    Path(path).write_text(json.dumps(doc, indent=1))


def load_cameras(path):
    """Returns ``(cameras, names, metadata)``."""
    doc = json.loads(Path(path).read_text())
    _check_header(doc, CAMERA_FORMAT)
    if "cameras" not in doc:
        raise SchemaError("camera file missing field 'cameras'")
    entries = doc["cameras"]
    cams = [camera_from_dict(e) for e in entries]
    names = [e.get("name", f"cam{i:03d}") for i, e in enumerate(entries)]
    return cams, names, doc.get("metadata", {})


def save_camera_path(base: Camera, poses, n_frames, path) -> None:
    """Intrinsics of ``base``, a list of 4x4 world-to-view keyframes and a frame count."""
    doc = dict(format=PATH_FORMAT, version=FORMAT_VERSION, frames=int(n_frames), interpolation="slerp",
               camera=camera_to_dict(base), poses=[np.asarray(p, float).tolist() for p in poses])
    Path(path).write_text(json.dumps(doc, indent=1))


def interpolate_poses(poses, n_frames):
    """``n_frames`` world-to-view matrices evenly spread along the keyframes.

    Rotations are slerped and camera centers interpolated linearly per
    segment; the first and last frames are the end keyframes exactly.
    """
    poses = [np.asarray(p, dtype=np.float64) for p in poses]
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if len(poses) == 1 or n_frames == 1:
        return [poses[0].copy() for _ in range(n_frames)]
    R = np.stack([p[:3, :3] for p in poses])
    centers = np.stack([-p[:3, :3].T @ p[:3, 3] for p in poses])
    slerp = Slerp(np.arange(len(poses)), Rotation.from_matrix(R))
    out = []
    for i, t in enumerate(np.linspace(0.0, len(poses) - 1, n_frames)):
        if i == 0 or i == n_frames - 1:
            out.append(poses[0 if i == 0 else -1].copy())
            continue
        k = min(int(np.floor(t)), len(poses) - 2)
        c = centers[k] + (t - k) * (centers[k + 1] - centers[k])
        Rt = slerp([t]).as_matrix()[0]
        w2v = np.eye(4)
        w2v[:3, :3] = Rt
        w2v[:3, 3] = -Rt @ c
        out.append(w2v)
    return out


def load_camera_path(path):
    """Returns the per-frame cameras of a path file."""
    doc = json.loads(Path(path).read_text())
    _check_header(doc, PATH_FORMAT)
    for key in ("camera", "poses", "frames"):
        if key not in doc:
            raise SchemaError(f"camera path missing field {key!r}")
    base = camera_from_dict(doc["camera"])
    return [Camera(base.width, base.height, base.fx, base.fy, base.cx, base.cy, w2v, base.near, base.far)
            for w2v in interpolate_poses(doc["poses"], int(doc["frames"]))]


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def to_bytes(image, gamma=GAMMA) -> np.ndarray:
    """Linear RGB in [0, 1] to 8-bit display values: ``round(255 * v ** (1 / gamma))``."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(255.0 * v ** (1.0 / gamma)).astype(np.uint8)


def write_image(fb, path, fmt=None) -> None:
    """Write a framebuffer (or an ``(H, W, 3)`` array) as binary PPM or PNG."""
    image = getattr(fb, "image", fb)
    data = to_bytes(image)
    fmt = (fmt or os.path.splitext(str(path))[1].lstrip(".") or "ppm").lower()
    if fmt == "ppm":
        h, w = data.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(data).tobytes())
    elif fmt == "png":
        Image.fromarray(data, "RGB").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")


def read_image(path) -> np.ndarray:
    """8-bit ``(H, W, 3)`` array from a PPM or PNG file."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
