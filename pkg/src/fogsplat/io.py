"""File formats (PNG, PFM, PLY), scene directories and checkpoints."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fog import FogParams
from .scene import Camera, GaussianCloud, InvalidParameterError

CHECKPOINT_FORMAT = "fogsplat-checkpoint"
CHECKPOINT_VERSION = 1


class DataError(Exception):
    """Missing or malformed input data."""


# ---------------------------------------------------------------- images

def read_image(path) -> np.ndarray:
    """8-bit PNG -> float array in [0, 1] (H, W, 3), no gamma transform."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return arr / 255.0


def write_image(path, image) -> None:
    arr = np.asarray(image, dtype=float)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    # header: magic, "W H", scale; each terminated by whitespace
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PFM header at byte {start}")
        fields.append((start, data[start:pos]))
    pos += 1  # single whitespace byte before raster data
    (o0, magic), (o1, w), (o2, h), (o3, scale) = fields
    if magic not in (b"Pf", b"PF"):
        raise DataError(f"{path}: bad PFM magic {magic!r} at byte {o0}")
    try:
        width = int(w)
    except ValueError:
        raise DataError(f"{path}: bad PFM width {w!r} at byte {o1}") from None
    try:
        height = int(h)
    except ValueError:
        raise DataError(f"{path}: bad PFM height {h!r} at byte {o2}") from None
    try:
        s = float(scale)
    except ValueError:
        raise DataError(f"{path}: bad PFM scale {scale!r} at byte {o3}") from None
    if width <= 0 or height <= 0:
        raise DataError(f"{path}: bad PFM size {width}x{height} at byte {o1}")
    channels = 3 if magic == b"PF" else 1
    dtype = "<f4" if s < 0 else ">f4"
    count = width * height * channels
    if len(data) - pos < 4 * count:
        raise DataError(f"{path}: PFM raster truncated at byte {len(data)}, expected {pos + 4 * count}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float64)
    arr = arr.reshape(height, width, channels)[::-1]
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def write_pfm(path, array) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom to top."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"write_pfm expects a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> tuple[dict[str, np.ndarray], list[str]]:
    """Vertex element of a PLY file as a name -> array dict, plus header comments."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body = end + len(b"end_header")
    body += 2 if data[body:body + 2] == b"\r\n" else 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, comments, props, n_vertex, in_vertex = None, [], [], None, False
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment":
            comments.append(line[len("comment "):])
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is None:
                raise DataError(f"{path}: element {tok[1]!r} before vertex is not supported")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise DataError(f"{path}: list properties on vertices are not supported")
            if tok[1] not in _PLY_TYPES:
                raise DataError(f"{path}: unknown property type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if n_vertex is None or not props:
        raise DataError(f"{path}: no vertex element")
    if fmt == "ascii":
        text = data[body:].decode("ascii").split()
        need = n_vertex * len(props)
        if len(text) < need:
            raise DataError(f"{path}: truncated ASCII vertex data")
        table = np.array(text[:need], dtype=float).reshape(n_vertex, len(props))
        return {name: table[:, i].astype(t) for i, (name, t) in enumerate(props)}, comments
    if fmt not in ("binary_little_endian", "binary_big_endian"):
        raise DataError(f"{path}: unsupported PLY format {fmt!r}")
    order = "<" if fmt == "binary_little_endian" else ">"
    dtype = np.dtype([(name, order + t) for name, t in props])
    if len(data) - body < dtype.itemsize * n_vertex:
        raise DataError(f"{path}: truncated PLY, {len(data) - body} of "
                        f"{dtype.itemsize * n_vertex} vertex bytes present")
    rec = np.frombuffer(data, dtype=dtype, count=n_vertex, offset=body)
    return {name: rec[name].astype(rec[name].dtype.newbyteorder("=")) for name, _ in props}, comments


def write_ply(path, columns: dict[str, np.ndarray], comments=()) -> None:
    names = list(columns)
    n = len(columns[names[0]])
    dtype = np.dtype([(k, "<" + columns[k].dtype.str[1:]) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = columns[k]
    inv = {v: k for k, v in _PLY_TYPES.items() if k in ("char", "uchar", "short", "ushort", "int",
                                                          "uint", "float", "double")}
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property {inv[dtype[k].str[1:]]} {k}" for k in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_points(path):
    cols, _ = read_ply(path)
    try:
        xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
    except KeyError as exc:
        raise DataError(f"{path}: missing vertex property {exc.args[0]!r}") from None
    if not np.all(np.isfinite(xyz)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(xyz), axis=1))[0])
        raise DataError(f"{path}: vertex {bad} has a non-finite position")
    if all(k in cols for k in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        rgb = rgb / 255.0 if rgb.dtype.kind in "ui" else rgb.astype(float)
    else:
        rgb = np.full((len(xyz), 3), 0.5)
    return xyz, rgb


def write_points(path, xyz, rgb) -> None:
    rgb8 = np.round(np.clip(np.asarray(rgb, dtype=float), 0, 1) * 255).astype(np.uint8)
    xyz = np.asarray(xyz, dtype=np.float64)
    write_ply(path, {"x": xyz[:, 0], "y": xyz[:, 1], "z": xyz[:, 2],
                     "red": rgb8[:, 0], "green": rgb8[:, 1], "blue": rgb8[:, 2]})


# ---------------------------------------------------------------- scene directories

@dataclass
class SceneBundle:
    root: Path
    cameras: list[Camera]
    image_paths: list[Path]
    images: list[np.ndarray]
    points: np.ndarray
    point_colors: np.ndarray
    depth_paths: list[Path | None] = field(default_factory=list)
    depths: list[np.ndarray | None] = field(default_factory=list)
    clear_paths: list[Path | None] = field(default_factory=list)
    clear_images: list[np.ndarray | None] = field(default_factory=list)

    def __len__(self):
        return len(self.cameras)


def _camera_from_entry(entry, i, path) -> Camera:
    try:
        R = np.asarray(entry["R"], dtype=float)
        t = np.asarray(entry["t"], dtype=float)
        if R.size != 9:
            raise DataError(f"{path}: camera {i} field 'R' needs 9 values, got {R.size}")
        if t.size != 3:
            raise DataError(f"{path}: camera {i} field 't' needs 3 values, got {t.size}")
        return Camera(fx=float(entry["fx"]), fy=float(entry["fy"]), cx=float(entry["cx"]),
                      cy=float(entry["cy"]), width=int(entry["width"]), height=int(entry["height"]),
                      R=R.reshape(3, 3), t=t, near=float(entry.get("near", 0.01)),
                      far=float(entry.get("far", 1e3)), name=str(entry.get("name", f"{i:04d}")))
    except KeyError as exc:
        raise DataError(f"{path}: camera {i} is missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidParameterError):
            raise DataError(f"{path}: camera {i} field 'R'/intrinsics invalid: {exc}") from None
        raise DataError(f"{path}: camera {i} has a malformed field ({exc})") from None


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    entries = raw["cameras"] if isinstance(raw, dict) and "cameras" in raw else raw
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{path}: expected a non-empty list of cameras")
    return [_camera_from_entry(e, i, path) for i, e in enumerate(entries)]


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def _find_image(folder: Path, stem: str, exts=(".png",)):
    for ext in exts:
        p = folder / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_scene(root, *, gt_dir=None) -> SceneBundle:
    """Load ``cameras.json``, ``images/``, ``points.ply`` and optional ``depths/``, ``clear/``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: scene directory not found")
    cameras = load_cameras(root / "cameras.json")
    cameras.sort(key=lambda c: c.name)
    names = [c.name for c in cameras]
    if len(set(names)) != len(names):
        raise DataError(f"{root / 'cameras.json'}: camera names are not unique")
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"{img_dir}: images directory not found")
    images, image_paths = [], []
    for cam in cameras:
        p = _find_image(img_dir, cam.name)
        if p is None:
            raise DataError(f"{img_dir}: no image for camera {cam.name!r} (expected {cam.name}.png)")
        img = read_image(p)
        if img.shape[:2] != (cam.height, cam.width):
            raise DataError(f"{p}: image is {img.shape[1]}x{img.shape[0]} but camera {cam.name!r} "
                            f"(cameras.json) is {cam.width}x{cam.height}")
        images.append(img)
        image_paths.append(p)
    pts_path = root / "points.ply"
    if not pts_path.exists():
        raise DataError(f"{pts_path}: point cloud not found")
    points, colors = read_points(pts_path)
    bundle = SceneBundle(root, cameras, image_paths, images, points, colors)
    depth_dir = root / "depths"
    clear_dir = Path(gt_dir) if gt_dir is not None else root / "clear"
    for cam in cameras:
        dp = _find_image(depth_dir, cam.name, (".pfm",)) if depth_dir.is_dir() else None
        bundle.depth_paths.append(dp)
        d = read_pfm(dp) if dp is not None else None
        if d is not None and d.shape != (cam.height, cam.width):
            raise DataError(f"{dp}: depth is {d.shape[1]}x{d.shape[0]} but camera {cam.name!r} "
                            f"is {cam.width}x{cam.height}")
        bundle.depths.append(d)
        cp = _find_image(clear_dir, cam.name) if clear_dir.is_dir() else None
        bundle.clear_paths.append(cp)
        c = read_image(cp) if cp is not None else None
        if c is not None and c.shape[:2] != (cam.height, cam.width):
            raise DataError(f"{cp}: clear image size does not match camera {cam.name!r}")
        bundle.clear_images.append(c)
    return bundle


def write_scene(root, cameras, images, points, point_colors, *, depths=None, clear=None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", cameras)
    for cam, img in zip(cameras, images):
        write_image(root / "images" / f"{cam.name}.png", img)
    if depths is not None:
        (root / "depths").mkdir(exist_ok=True)
        for cam, d in zip(cameras, depths):
            write_pfm(root / "depths" / f"{cam.name}.pfm", d)
    if clear is not None:
        (root / "clear").mkdir(exist_ok=True)
        for cam, c in zip(cameras, clear):
            write_image(root / "clear" / f"{cam.name}.png", c)
    write_points(root / "points.ply", points, point_colors)
    return root


# ---------------------------------------------------------------- checkpoints

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _ply_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".ply") if path.suffix == ".json" else path


def cloud_to_columns(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    n, K = len(cloud), cloud.color_coeffs.shape[1]
    cols = {"x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
            "nx": np.zeros(n), "ny": np.zeros(n), "nz": np.zeros(n)}
    for c in range(3):
        cols[f"f_dc_{c}"] = cloud.color_coeffs[:, 0, c]
    # channel-major layout of the higher-order coefficients
    rest = np.transpose(cloud.color_coeffs[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    for i in range(rest.shape[1]):
        cols[f"f_rest_{i}"] = rest[:, i]
    cols["opacity"] = cloud.opacity_latents
    for i in range(3):
        cols[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = cloud.rotations[:, i]
    return {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in cols.items()}


def columns_to_cloud(cols, path="") -> GaussianCloud:
    try:
        n = len(cols["x"])
        n_rest = len([k for k in cols if k.startswith("f_rest_")])
        K = 1 + n_rest // 3
        coeffs = np.zeros((n, K, 3))
        for c in range(3):
            coeffs[:, 0, c] = cols[f"f_dc_{c}"]
        if n_rest:
            rest = np.stack([cols[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
            coeffs[:, 1:, :] = rest.reshape(n, 3, K - 1).transpose(0, 2, 1)
        return GaussianCloud(
            positions=np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
            log_scales=np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1),
            rotations=np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1),
            opacity_latents=cols["opacity"],
            color_coeffs=coeffs)
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint is missing vertex property {exc.args[0]!r}") from None


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    fog: FogParams
    iteration: int
    config: dict
    cameras: list[Camera]
    meta: dict


def save_checkpoint(cloud: GaussianCloud, fog: FogParams | None, state, path, *,
                    cameras=None, config=None) -> Path:
    """Write ``<path>.ply`` (Gaussian latents, float64) and a ``.json`` sidecar."""
    ply = _ply_path(path)
    ply.parent.mkdir(parents=True, exist_ok=True)
    iteration = int(getattr(state, "iteration", 0) if state is not None else 0)
    if config is None and state is not None and getattr(state, "config", None) is not None:
        config = state.config.to_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "num_gaussians": len(cloud),
        "sh_degree": cloud.sh_degree,
        "iteration": iteration,
        "fog": None if fog is None else {
            "beta_weight": [float(v) for v in fog.beta_weight],
            "atmos_latent": [float(v) for v in fog.atmos_latent],
            "use_sigmoid": bool(fog.use_sigmoid),
            "beta_lr": float(fog.beta_lr),
            "beta_lr_decay": float(fog.beta_lr_decay),
        },
        "config": config or {},
        "cameras": [c.to_dict() for c in (cameras or [])],
    }
    tmp_ply = ply.with_name(ply.name + ".tmp")
    write_ply(tmp_ply, cloud_to_columns(cloud),
              comments=[f"{CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}"])
    side = _sidecar(ply)
    tmp_side = side.with_name(side.name + ".tmp")
    tmp_side.write_text(json.dumps(meta, indent=1, sort_keys=True))
    os.replace(tmp_ply, ply)
    os.replace(tmp_side, side)
    return ply


def peek_checkpoint(path) -> dict:
    """Version and counts from the sidecar without touching the PLY payload."""
    side = _sidecar(_ply_path(path))
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError:
        raise DataError(f"{side}: checkpoint sidecar not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: corrupt checkpoint sidecar ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{side}: not a {CHECKPOINT_FORMAT} sidecar")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{side}: checkpoint version {meta.get('version')} is not supported "
                        f"(this build reads version {CHECKPOINT_VERSION})")
    return meta


def load_checkpoint(path) -> Checkpoint:
    ply = _ply_path(path)
    meta = peek_checkpoint(ply)
    if not ply.exists():
        raise DataError(f"{ply}: checkpoint PLY not found")
    cols, comments = read_ply(ply)
    tag = f"{CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}"
    if tag not in comments:
        raise DataError(f"{ply}: PLY header version {comments} does not match {tag!r}")
    cloud = columns_to_cloud(cols, ply)
    if len(cloud) != meta["num_gaussians"]:
        raise DataError(f"{ply}: {len(cloud)} Gaussians but sidecar records {meta['num_gaussians']}")
    f = meta["fog"]
    fog = None if f is None else FogParams(np.array(f["beta_weight"]), np.array(f["atmos_latent"]),
                                           f["use_sigmoid"], f["beta_lr"], f["beta_lr_decay"])
    cams = [Camera.from_dict(c) for c in meta.get("cameras", [])]
    return Checkpoint(cloud, fog, int(meta["iteration"]), meta.get("config", {}), cams, meta)
