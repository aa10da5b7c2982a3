"""Point-cloud, image, scene and checkpoint file formats, plus synthetic data."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .conditioning import Image
from .diffusion import PointCloud
from .renderer import Camera, RenderConfig, render_details, scene_bounds
from .tensor import ContractError, make_rng

__all__ = [
    "PlyError",
    "CheckpointError",
    "NormRecord",
    "Sample",
    "Checkpoint",
    "load_ply",
    "save_ply",
    "load_png",
    "save_png",
    "normalize",
    "denormalize",
    "SHAPE_KINDS",
    "sample_surface",
    "default_camera",
    "gen_synthetic",
    "save_scene",
    "load_scene",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


class PlyError(ValueError):
    """Malformed or unsupported PLY content."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or from another format version."""


# -- PLY --------------------------------------------------------------------------
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyError("line 1: missing 'ply' magic or 'end_header'")
    nl = raw.find(b"\n", end)
    body_offset = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported format {' '.join(parts[1:])!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"line {lineno}: malformed element line")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if parts[1] == "list":
                if elements[-1][0] == "vertex":
                    raise PlyError(f"line {lineno}: list properties on vertices are unsupported")
                elements[-1][2].append((parts[-1], "list"))
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyError(f"line {lineno}: unsupported property type {parts[1]!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {parts[0]!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first element must be 'vertex'")
    props = elements[0][2]
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    return fmt, elements[0][1], props, body_offset


def load_ply(path) -> PointCloud:
    """Read vertices (x, y, z and optional red, green, blue) from a PLY file.

    Integer colors are mapped to [0, 1] by dividing by 255.
    """
    raw = Path(path).read_bytes()
    fmt, count, props, offset = _parse_header(raw)
    names = [p[0] for p in props]
    if fmt == "ascii":
        rows = raw[offset:].decode("ascii", errors="replace").splitlines()
        header_lines = raw[:offset].count(b"\n")
        if len(rows) < count:
            raise PlyError(f"line {header_lines + len(rows) + 1}: truncated body, "
                           f"expected {count} vertices, found {len(rows)}")
        data = np.empty((count, len(props)))
        for i in range(count):
            parts = rows[i].split()
            if len(parts) < len(props):
                raise PlyError(f"line {header_lines + i + 1}: expected {len(props)} values")
            try:
                data[i] = [float(v) for v in parts[: len(props)]]
            except ValueError:
                raise PlyError(f"line {header_lines + i + 1}: non-numeric value") from None
        cols = {n: data[:, j] for j, n in enumerate(names)}
    else:
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        need = dtype.itemsize * count
        if len(raw) - offset < need:
            raise PlyError(f"offset {len(raw)}: truncated binary body, "
                           f"need {need} bytes after offset {offset}")
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        cols = {n: rec[n].astype(np.float64) for n in names}
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        kinds = {t for n, t in props if n in ("red", "green", "blue")}
        colors = rgb if kinds <= {"f4", "f8"} else rgb / 255.0
    return PointCloud(pos, colors)


def save_ply(path, cloud: PointCloud, binary: bool = False) -> None:
    """Write float32 positions and, if present, 8-bit colors."""
    n = cloud.n_points
    has_color = cloud.colors is not None
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}", "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    pos32 = cloud.positions.astype(np.float32)
    rgb8 = np.round(cloud.colors * 255.0).astype(np.uint8) if has_color else None
    out = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if has_color:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.empty(n, dtype=fields)
        rec["x"], rec["y"], rec["z"] = pos32[:, 0], pos32[:, 1], pos32[:, 2]
        if has_color:
            rec["red"], rec["green"], rec["blue"] = rgb8[:, 0], rgb8[:, 1], rgb8[:, 2]
        out += rec.tobytes()
    else:
        lines = []
        for i in range(n):
            row = " ".join(repr(float(v)) for v in pos32[i])
            if has_color:
                row += " " + " ".join(str(int(v)) for v in rgb8[i])
            lines.append(row)
        out += ("\n".join(lines) + "\n").encode("ascii")
    _atomic_write(path, out)


# -- PNG ----------------------------------------------------------------------------
def load_png(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return Image(arr / 255.0)


def save_png(path, img) -> None:
    rgb = img.rgb if isinstance(img, Image) else np.asarray(img)
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- normalization -------------------------------------------------------------------
@dataclass(frozen=True)
class NormRecord:
    mean: tuple[float, float, float]
    scale: float


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormRecord]:
    """Zero centroid and unit scalar standard deviation over all coordinates."""
    pos = cloud.positions
    if pos.shape[0] < 2:
        raise ContractError("normalize needs at least two points")
    mean = pos.mean(axis=0)
    centered = pos - mean
    scale = float(np.sqrt((centered ** 2).mean()))
    if scale == 0.0:
        raise ContractError("cannot normalize a degenerate cloud (all points identical)")
    return PointCloud(centered / scale, cloud.colors), NormRecord(tuple(map(float, mean)), scale)


def denormalize(cloud: PointCloud, record: NormRecord) -> PointCloud:
    return PointCloud(cloud.positions * record.scale + np.asarray(record.mean), cloud.colors)


# -- synthetic shapes ------------------------------------------------------------------
SHAPE_KINDS = ("sphere", "cube", "cylinder", "two-tone-chairlike")

_PALETTES = {
    "sphere": [(0.9, 0.2, 0.2), (0.95, 0.85, 0.2), (0.2, 0.4, 0.9)],
    "cube": [(1.0, 0.0, 0.0), (0.0, 0.8, 0.0), (0.0, 0.0, 1.0),
             (1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0)],
    "cylinder": [(0.2, 0.7, 0.3), (0.9, 0.5, 0.1)],
    "two-tone-chairlike": [(0.55, 0.3, 0.1), (0.15, 0.35, 0.75)],
}


def _box_surface(rng, n, lo, hi):
    """Uniform samples on the surface of an axis-aligned box; returns points and face ids."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2]] * 2 + [ext[0] * ext[2]] * 2 + [ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts, face


def sample_surface(kind: str, n: int, rng: np.random.Generator, palette=None):
    """Raw (unnormalized) surface samples and per-point colors for ``kind``."""
    if kind not in SHAPE_KINDS:
        raise ContractError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    pal = np.asarray(palette if palette is not None else _PALETTES[kind], dtype=np.float64)
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        pos = v / np.linalg.norm(v, axis=1, keepdims=True)
        band = np.minimum(((pos[:, 1] + 1.0) / 2.0 * len(pal)).astype(int), len(pal) - 1)
        colors = pal[band]
    elif kind == "cube":
        # faces ordered -x, +x, -y, +y, -z, +z; palette[0] is the +x face
        pos, face = _box_surface(rng, n, (-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
        face_color = [1, 0, 3, 2, 5, 4]
        colors = pal[np.asarray(face_color)[face] % len(pal)]
    elif kind == "cylinder":
        r, half = 0.5, 0.5
        side_area, cap_area = 2 * np.pi * r * 2 * half, np.pi * r * r
        part = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
        y = np.where(part == 0, rng.uniform(-half, half, n), np.where(part == 1, half, -half))
        pos = np.stack([rad * np.cos(theta), y, rad * np.sin(theta)], axis=1)
        colors = pal[np.where(part == 0, 0, 1 % len(pal))]
    else:
        boxes = [
            ((-0.5, -0.05, -0.5), (0.5, 0.05, 0.5), 0),   # seat
            ((-0.5, 0.05, -0.5), (0.5, 1.0, -0.4), 1),    # back
        ]
        for sx in (-0.45, 0.35):
            for sz in (-0.45, 0.35):
                boxes.append(((sx, -0.8, sz), (sx + 0.1, -0.05, sz + 0.1), 0))
        areas = []
        for lo, hi, _ in boxes:
            e = np.subtract(hi, lo)
            areas.append(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))
        areas = np.asarray(areas)
        which = rng.choice(len(boxes), size=n, p=areas / areas.sum())
        pos = np.empty((n, 3))
        tone = np.empty(n, dtype=int)
        for b, (lo, hi, t) in enumerate(boxes):
            sel = np.flatnonzero(which == b)
            pos[sel], _ = _box_surface(rng, sel.size, lo, hi)
            tone[sel] = t
        colors = pal[tone % len(pal)]
    return pos, colors


def default_camera(width: int = 64, height: int = 64) -> Camera:
    return Camera(position=(3.5, 2.7, 5.6), look_at=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                  fov=np.deg2rad(45.0), width=width, height=height)


@dataclass
class Sample:
    name: str
    cloud: PointCloud
    image: Image
    camera: Camera
    record: NormRecord
    render: dict = field(default_factory=dict)

    def render_config(self, **overrides) -> RenderConfig:
        opts = dict(self.render)
        opts.update(overrides)
        if "background" in opts:
            opts["background"] = tuple(opts["background"])
        return RenderConfig(**opts)


def reference_render(cloud: PointCloud, cam: Camera, cfg: RenderConfig) -> Image:
    img = render_details(cloud.positions, cloud.colors, cam, cfg).image.data
    # quantized to 8 bits so the in-memory image equals its PNG file
    return Image(np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0)


def gen_synthetic(kind: str, n_points: int = 256, palette=None, cam: Camera | None = None,
                  seed: int = 0, n_samples: int = 32, k: int = 8, mask_radius: float = 0.3,
                  name: str | None = None) -> Sample:
    """Normalized colored surface samples with a reference render from ``cam``."""
    if n_points < 8:
        raise ContractError("gen_synthetic needs n_points >= 8")
    rng = make_rng(seed)
    raw, colors = sample_surface(kind, n_points, rng, palette)
    cloud, record = normalize(PointCloud(raw, colors))
    cam = cam or default_camera()
    near, far = scene_bounds(cam, float(np.linalg.norm(cloud.positions, axis=1).max()))
    render = {"near": near, "far": far, "n_samples": n_samples, "k": k, "mask_radius": mask_radius}
    image = reference_render(cloud, cam, RenderConfig(**render))
    return Sample(name or kind, cloud, image, cam, record, render)


# -- scenes ------------------------------------------------------------------------------
def save_scene(directory, sample: Sample) -> Path:
    """Write ``<name>.ply``, ``<name>.png`` and ``<name>.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cloud_path = f"{sample.name}.ply"
    image_path = f"{sample.name}.png"
    save_ply(directory / cloud_path, sample.cloud, binary=True)
    save_png(directory / image_path, sample.image)
    doc = {
        "camera": sample.camera.to_dict(),
        "cloud_path": cloud_path,
        "image_path": image_path,
        "render": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sample.render.items()},
        "normalization": {"mean": list(sample.record.mean), "scale": sample.record.scale},
    }
    path = directory / f"{sample.name}.json"
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return path


def load_scene(path) -> Sample:
    path = Path(path)
    doc = json.loads(path.read_text())
    cam = Camera.from_dict(doc["camera"])
    base = path.parent
    cloud = load_ply(base / doc["cloud_path"]) if doc.get("cloud_path") else None
    image = load_png(base / doc["image_path"]) if doc.get("image_path") else None
    norm = doc.get("normalization", {"mean": [0.0, 0.0, 0.0], "scale": 1.0})
    render = dict(doc.get("render", {}))
    if "near" not in render:
        radius = float(np.linalg.norm(cloud.positions, axis=1).max()) if cloud is not None else 2.0
        render["near"], render["far"] = scene_bounds(cam, radius)
    return Sample(path.stem, cloud, image, cam, NormRecord(tuple(norm["mean"]), float(norm["scale"])), render)


def load_dataset(directory) -> list[Sample]:
    """All scenes in ``directory`` in file-name order."""
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise ContractError(f"no scene files in {directory}")
    return [load_scene(p) for p in paths]


# -- checkpoints ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"PCDM"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict
    step: int


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.dtype.str, "values": [int(v) for v in obj.ravel()]}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["values"], dtype=np.dtype(obj["__ndarray__"]))
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


def encode_checkpoint(state: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": _jsonable(state.config), "rng_state": _jsonable(state.rng_state), "step": int(state.step)},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
             struct.pack("<I", len(state.tensors))]
    for name in sorted(state.tensors):
        arr = np.asarray(state.tensors[name], dtype="<f8", order="C")
        bname = name.encode()
        parts.append(struct.pack("<HB", len(bname), arr.ndim))
        parts.append(bname)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC.decode()!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, hlen = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    header = json.loads(take(hlen).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        nlen, rank = struct.unpack("<HB", take(3))
        name = take(nlen).decode()
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after tensor table")
    return Checkpoint(header["config"], tensors, _from_jsonable(header["rng_state"]), header["step"])


def save_checkpoint(path, state: Checkpoint) -> None:
    _atomic_write(path, encode_checkpoint(state))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
