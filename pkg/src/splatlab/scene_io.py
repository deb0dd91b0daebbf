"""Datasets on disk and synthetic scenes.

On-disk dataset layout (all paths relative to the manifest)::

    dataset.json     {"name", "mode", "cameras": "cameras.json",
                      "points": "points.ply", "images": "images",
                      "background": [r, g, b]}
    cameras.json     pose file, see ``save_cameras``
    points.ply       SfM points with optional 8-bit colors
    images/*.png     one 16-bit PNG per camera

Pose file schema: ``{"version": 1, "convention": ..., "cameras": [{
"world_to_camera": 16 floats row-major, "focal": [fx, fy],
"principal_point": [cx, cy], "resolution": [w, h], "near_plane": z,
"image": "name.png"}, ...]}``. Cameras look down -z with y up.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FLAT2D, MODES, PERSPECTIVE3D, ContractViolation, SceneModel, logit
from .projection import Camera, cull_and_project
from .raster import render

CONVENTION = "right-handed, -z forward, y up, pixel centers at +0.5"


class ParseError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    sfm_points: np.ndarray
    sfm_colors: np.ndarray
    name: str = "dataset"
    mode: str = PERSPECTIVE3D
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ContractViolation("every camera needs exactly one target image")
        for cam, img in zip(self.cameras, self.images):
            if img.shape[:2] != (cam.height, cam.width):
                raise ContractViolation(
                    f"image for {cam.image_name!r} is {img.shape[:2]}, camera declares "
                    f"{(cam.height, cam.width)}")
        self.sfm_points = np.asarray(self.sfm_points, dtype=np.float64).reshape(-1, 3)
        self.sfm_colors = np.asarray(self.sfm_colors, dtype=np.float64).reshape(-1, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def split(self, holdout_stride: int = 8) -> tuple[list[int], list[int]]:
        """(train, holdout) view indices; every ``holdout_stride``-th view is held out."""
        idx = list(range(len(self.cameras)))
        test = [i for i in idx if i % holdout_stride == 0]
        train = [i for i in idx if i % holdout_stride != 0]
        return train, test


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file or missing end_header", 0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not terminated by newline", end)
    body_start = nl + 1
    fmt = None
    elements = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            pass
        elif parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {line!r}", offset)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError(f"bad element line {line!r}", offset)
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", offset)
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise ParseError(f"bad list property {line!r}", offset)
                elements[-1]["props"].append((parts[4], None, _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]], None, None))
            else:
                raise ParseError(f"bad property line {line!r}", offset)
        else:
            raise ParseError(f"unexpected header line {line!r}", offset)
        offset += len(raw) + 1
    if fmt is None:
        raise ParseError("missing format line", 0)
    return fmt, elements, body_start


def _extract_points(rows: dict, count: int):
    if count == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pos = np.stack([np.asarray(rows[k], dtype=np.float64) for k in ("x", "y", "z")], axis=1)
    if all(k in rows for k in ("red", "green", "blue")):
        col = np.stack([np.asarray(rows[k], dtype=np.float64) for k in ("red", "green", "blue")], axis=1)
        if np.issubdtype(np.asarray(rows["red"]).dtype, np.integer):
            col = col / 255.0
    else:
        col = np.full((count, 3), 0.5)
    return pos, col


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read vertex positions and colors (mid-gray when absent) from a PLY file."""
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(data)
    vertex_rows, vertex_count = None, 0
    if fmt == "ascii":
        tokens = data[pos:].split()
        ti = 0
        for el in elements:
            rows = {name: [] for name, *_ in el["props"]}
            for _ in range(el["count"]):
                for name, dtype, count_t, item_t in el["props"]:
                    if ti >= len(tokens):
                        raise ParseError("truncated ascii payload", len(data))
                    if dtype is not None:
                        rows[name].append(np.array(tokens[ti]).astype(float).astype(dtype))
                        ti += 1
                    else:
                        k = int(tokens[ti])
                        ti += 1 + k
            if el["name"] == "vertex":
                vertex_rows = {k: np.array(v) for k, v in rows.items()}
                vertex_count = el["count"]
    else:
        cursor = pos
        for el in elements:
            if all(p[1] is not None for p in el["props"]):
                dt = np.dtype([(name, "<" + dtype) for name, dtype, _, _ in el["props"]])
                nbytes = dt.itemsize * el["count"]
                if cursor + nbytes > len(data):
                    raise ParseError(f"truncated binary payload in element {el['name']!r}", cursor)
                arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=cursor)
                cursor += nbytes
                if el["name"] == "vertex":
                    vertex_rows = {name: arr[name] for name in arr.dtype.names}
                    vertex_count = el["count"]
            else:
                for _ in range(el["count"]):
                    for name, dtype, count_t, item_t in el["props"]:
                        if dtype is not None:
                            cursor += np.dtype(dtype).itemsize
                        else:
                            csize = np.dtype(count_t).itemsize
                            if cursor + csize > len(data):
                                raise ParseError("truncated list property", cursor)
                            k = int(np.frombuffer(data, dtype="<" + count_t, count=1, offset=cursor)[0])
                            cursor += csize + k * np.dtype(item_t).itemsize
                    if cursor > len(data):
                        raise ParseError(f"truncated element {el['name']!r}", len(data))
    if vertex_rows is None:
        return np.zeros((0, 3)), np.zeros((0, 3))
    missing = [k for k in ("x", "y", "z") if k not in vertex_rows]
    if missing:
        raise ParseError(f"vertex element lacks {missing}", 0)
    return _extract_points(vertex_rows, vertex_count)


def save_ply(path, points, colors=None, binary: bool = True) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}", "property double x", "property double y", "property double z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        c8 = np.clip(np.round(np.asarray(colors, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        arr = np.empty(n, dtype=fields)
        arr["x"], arr["y"], arr["z"] = points.T
        if colors is not None:
            arr["red"], arr["green"], arr["blue"] = c8.T
        payload = arr.tobytes()
    else:
        lines = []
        for i in range(n):
            vals = [repr(float(v)) for v in points[i]]
            if colors is not None:
                vals += [str(int(v)) for v in c8[i]]
            lines.append(" ".join(vals))
        payload = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    Path(path).write_bytes(head + payload)


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    return {
        "world_to_camera": [float(v) for v in cam.world_to_camera.ravel()],
        "focal": [float(v) for v in cam.focal],
        "principal_point": [float(v) for v in cam.principal_point],
        "resolution": [cam.width, cam.height],
        "near_plane": float(cam.near_plane),
        "image": cam.image_name,
    }


def camera_from_dict(d: dict) -> Camera:
    try:
        cam = Camera(np.array(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                     d["focal"], d["principal_point"], d["resolution"][0], d["resolution"][1],
                     near_plane=d.get("near_plane", 0.01), image_name=d.get("image", ""))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed camera entry: {exc}") from exc
    cam.validate()
    return cam


def save_cameras(path, cameras) -> None:
    doc = {"version": 1, "convention": CONVENTION, "cameras": [camera_to_dict(c) for c in cameras]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_cameras(path) -> list[Camera]:
    """Load a pose file; rotations must be orthonormal within 1e-6."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ParseError(f"unsupported pose file version {doc.get('version')!r}")
    return [camera_from_dict(d) for d in doc["cameras"]]


def _quat_wxyz_to_matrix(q):
    from .core import quaternion_to_rotation
    return quaternion_to_rotation(np.asarray(q, dtype=np.float64))


def convert_colmap_text(cameras_txt, images_txt) -> list[Camera]:
    """Convert COLMAP text-model cameras/images into this package's cameras.

    COLMAP poses map world to a camera with x right, y down, z forward; the
    y and z axes are flipped to get the -z forward, y up convention.
    """
    intr = {}
    for line in Path(cameras_txt).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        p = [float(x) for x in parts[4:]]
        if model == "SIMPLE_PINHOLE":
            fx = fy = p[0]
            cx, cy = p[1], p[2]
        elif model == "PINHOLE":
            fx, fy, cx, cy = p[:4]
        else:
            raise ParseError(f"unsupported COLMAP camera model {model!r}")
        intr[cam_id] = (w, h, fx, fy, cx, cy)
    flip = np.diag([1.0, -1.0, -1.0])
    out = []
    lines = [l for l in Path(images_txt).read_text().splitlines() if not l.startswith("#")]
    # every image has a pose line followed by a 2D-point line, which may be empty
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        i += 2
        if len(parts) < 10:
            raise ParseError(f"images.txt pose line has {len(parts)} fields, expected 10")
        q = [float(x) for x in parts[1:5]]
        t = np.array([float(x) for x in parts[5:8]])
        cam_id, name = int(parts[8]), parts[9]
        w, h, fx, fy, cx, cy = intr[cam_id]
        w2c = np.eye(4)
        w2c[:3, :3] = flip @ _quat_wxyz_to_matrix(q)
        w2c[:3, 3] = flip @ t
        out.append(Camera(w2c, (fx, fy), (cx, cy), w, h, image_name=name))
    return out


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _read_ppm_ascii(path) -> np.ndarray:
    text = re.sub(r"#[^\n]*", "", Path(path).read_text())
    tok = text.split()
    if not tok or tok[0] != "P3":
        raise ParseError("only ascii PPM (P3) is supported")
    w, h, maxval = int(tok[1]), int(tok[2]), int(tok[3])
    vals = np.array(tok[4:], dtype=np.float64)
    if vals.size != w * h * 3:
        raise ParseError(f"PPM payload has {vals.size} values, expected {w * h * 3}")
    if maxval not in (255, 65535):
        raise ParseError(f"unsupported PPM bit depth (maxval {maxval})")
    return vals.reshape(h, w, 3) / maxval


def read_image(path) -> np.ndarray:
    """Read an 8/16-bit PNG or ascii PPM as float RGB in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return _read_ppm_ascii(path)
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ParseError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ParseError(f"unsupported bit depth {raw.dtype}")
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    rgb = raw[..., 2::-1] if raw.shape[2] >= 3 else raw
    return rgb.astype(np.float64) / scale


def write_image(path, image, bit_depth: int = 16) -> None:
    """Write RGB in [0, 1] as PNG (8 or 16 bit) or ascii PPM."""
    if bit_depth not in (8, 16):
        raise ContractViolation(f"unsupported bit depth {bit_depth}")
    path = Path(path)
    maxval = 255 if bit_depth == 8 else 65535
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * maxval)
    if path.suffix.lower() in (".ppm", ".pnm"):
        h, w = q.shape[:2]
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in q.reshape(h, -1))
        path.write_text(f"P3\n{w} {h}\n{maxval}\n{body}\n")
        return
    import cv2

    arr = q.astype(np.uint8 if bit_depth == 8 else np.uint16)[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr)):
        raise OSError(f"failed to write {path}")


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    cams = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        name = cam.image_name or f"view_{i:03d}.png"
        write_image(directory / "images" / name, img, bit_depth=16)
        cams.append(Camera(cam.world_to_camera, cam.focal, cam.principal_point, cam.width,
                           cam.height, cam.near_plane, image_name=name))
    save_cameras(directory / "cameras.json", cams)
    save_ply(directory / "points.ply", dataset.sfm_points, dataset.sfm_colors)
    manifest = {"name": dataset.name, "mode": dataset.mode, "cameras": "cameras.json",
                "points": "points.ply", "images": "images",
                "background": [float(v) for v in dataset.background]}
    path = directory / "dataset.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(path) -> Dataset:
    """Load a dataset from its manifest file or the directory containing it."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    manifest = json.loads(path.read_text())
    root = path.parent
    mode = manifest.get("mode", PERSPECTIVE3D)
    if mode not in MODES:
        raise ParseError(f"unknown dataset mode {mode!r}")
    cameras = load_cameras(root / manifest["cameras"])
    image_dir = root / manifest.get("images", "images")
    images = [read_image(image_dir / c.image_name) for c in cameras]
    points, colors = load_ply(root / manifest["points"])
    return Dataset(cameras, images, points, colors, name=manifest.get("name", root.name),
                   mode=mode, background=manifest.get("background", [0, 0, 0]))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SYNTHETIC_KINDS = ("flat_targets", "ring_cameras_3d", "clustered_cameras")


def _random_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _render_views(truth: SceneModel, cameras, background):
    images = []
    for cam in cameras:
        splats = cull_and_project(truth, cam)
        bundle, _ = render(splats, cam.width, cam.height, background)
        images.append(bundle.image)
    return images


def _flat_targets(rng, width=256, height=256, n_views=24, spread=128, n_large=32, n_small=256):
    # views translate over a canvas larger than one image by ``spread`` px per side
    cw, ch = width + 2 * spread, height + 2 * spread
    n = n_large + n_small
    pos = np.column_stack([rng.uniform(0, cw, n), rng.uniform(0, ch, n)])
    scale_px = np.concatenate([
        np.exp(rng.uniform(np.log(0.04), np.log(0.1), (n_large, 2))) * width,
        np.exp(rng.uniform(np.log(0.006), np.log(0.025), (n_small, 2))) * width,
    ])
    opacity = np.concatenate([rng.uniform(0.6, 0.95, n_large), rng.uniform(0.5, 0.95, n_small)])
    depth = np.concatenate([rng.uniform(0.8, 1.2, n_large), rng.uniform(0.2, 0.8, n_small)]) * width
    truth = SceneModel(FLAT2D, pos, rng.uniform(0, np.pi, (n, 1)), np.log(scale_px),
                       logit(opacity), rng.uniform(0.05, 0.95, (n, 3)), depth=depth)
    centers = np.column_stack([cw / 2 + rng.uniform(-spread, spread, n_views),
                               ch / 2 + rng.uniform(-spread, spread, n_views)])
    cams = [Camera.flat(width, height, center=c, image_name=f"view_{i:03d}.png")
            for i, c in enumerate(centers)]
    points = np.column_stack([pos + rng.normal(0, 0.01 * width, pos.shape), depth])
    return truth, cams, points, truth.color.copy()


def _ring_cameras(rng, width=64, height=64, n_cameras=16, n_gaussians=40, radius=4.0):
    n_cameras = int(np.clip(n_cameras, 8, 32))
    pos = rng.normal(0, 0.35, (n_gaussians, 3))
    norms = np.linalg.norm(pos, axis=1, keepdims=True)
    pos = np.where(norms > 1.0, pos / norms, pos)
    truth = SceneModel(PERSPECTIVE3D, pos, _random_quaternions(rng, n_gaussians),
                       np.log(rng.uniform(0.04, 0.18, (n_gaussians, 3))),
                       logit(rng.uniform(0.5, 0.95, n_gaussians)),
                       rng.uniform(0.05, 0.95, (n_gaussians, 3)))
    angles = 2 * np.pi * np.arange(n_cameras) / n_cameras
    cams = [Camera.look_at([radius * np.cos(a), 0.5, radius * np.sin(a)], [0, 0, 0], [0, 1, 0],
                           0.9 * width, width, height, image_name=f"view_{i:03d}.png")
            for i, a in enumerate(angles)]
    points = pos + rng.normal(0, 0.02, pos.shape)
    return truth, cams, points, truth.color.copy()


def _clustered_cameras(rng, width=64, height=64, camera_offset=0.1, point_radius=5.0, per_camera=8):
    axes = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    cams, dirs = [], []
    for i, ax in enumerate(axes):
        up = [0, 0, 1] if abs(ax[1]) > 0 else [0, 1, 0]
        eye = camera_offset * ax
        cams.append(Camera.look_at(eye, eye + ax, up, 0.9 * width, width, height,
                                   image_name=f"view_{i:03d}.png"))
        helper = np.array([0.0, 0.0, 1.0]) if abs(ax[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(ax, helper)
        u /= np.linalg.norm(u)
        v = np.cross(ax, u)
        for _ in range(per_camera):
            ang = rng.uniform(0, 0.3)
            phi = rng.uniform(0, 2 * np.pi)
            d = np.cos(ang) * ax + np.sin(ang) * (np.cos(phi) * u + np.sin(phi) * v)
            dirs.append(d / np.linalg.norm(d))
    pos = point_radius * np.array(dirs)
    n = len(pos)
    truth = SceneModel(PERSPECTIVE3D, pos, _random_quaternions(rng, n),
                       np.log(rng.uniform(0.1, 0.4, (n, 3))), logit(rng.uniform(0.5, 0.95, n)),
                       rng.uniform(0.05, 0.95, (n, 3)))
    return truth, cams, pos.copy(), truth.color.copy()


def synthetic_scene(kind: str, seed: int = 0, background=None, **size) -> tuple[Dataset, SceneModel]:
    """Deterministic synthetic dataset plus the ground-truth model that rendered it.

    kinds: ``flat_targets`` (flat mode, canvas-translating views),
    ``ring_cameras_3d`` (cameras on a circle around a Gaussian cluster) and
    ``clustered_cameras`` (six cameras at distance ``camera_offset`` from the
    origin looking outward at points on a sphere of ``point_radius``; the
    camera extent is exactly 1.1 * camera_offset and the point extent exactly
    point_radius).
    """
    rng = np.random.default_rng(seed)
    builders = {"flat_targets": _flat_targets, "ring_cameras_3d": _ring_cameras,
                "clustered_cameras": _clustered_cameras}
    if kind not in builders:
        raise ContractViolation(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    truth, cams, points, colors = builders[kind](rng, **size)
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    images = _render_views(truth, cams, bg)
    dataset = Dataset(cams, images, points, colors, name=f"{kind}_{seed}", mode=truth.mode,
                      background=bg)
    return dataset, truth
