"""Readers and writers for point clouds, camera rigs, feature maps, tokens and masks.

Formats
-------
* PLY: ``ascii 1.0`` or ``binary_little_endian 1.0``, vertex element with
  scalar ``x, y, z`` and optional ``red, green, blue`` (uint8 -> /255).
* Camera rig: JSON array of views, see :func:`load_camera_rig`.
* Feature map blob: 16-byte header ``<u32 H, u32 W, u32 C, 4s magic 'NDFM'>``
  followed by ``H*W*C`` little-endian float32 values in row-major HWC order.
* Token bundle (binary): ``'NDTK'``, ``<u32 version, u32 M, u32 d_llm,
  u32 flags, u32 meta_len>``, ``meta_len`` bytes of UTF-8 JSON metadata, then
  ``M*d_llm`` float32 scene tokens and, when ``flags & 1``, ``d_llm`` float32
  guidance values.
* Point mask: one ``0``/``1`` per line.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import FormatError, VersionMismatchError

TOKEN_MAGIC = b"NDTK"
TOKEN_VERSION = 1
FEATURE_MAGIC = b"NDFM"
ROTATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if len(pos) < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.ascontiguousarray(self.colors, dtype=np.float64)
            if col.shape != pos.shape:
                raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
            if np.any(col < 0.0) or np.any(col > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", col)

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.count


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole view with a world-to-camera extrinsic matrix."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray
    width: int
    height: int
    image: np.ndarray
    depth: np.ndarray | None = None

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        ext = np.asarray(self.extrinsics, dtype=np.float64)
        if ext.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {ext.shape}")
        rot = ext[:3, :3]
        if (np.abs(rot @ rot.T - np.eye(3)).max() > ROTATION_TOL
                or np.linalg.det(rot) < 0):
            raise FormatError("non-orthonormal rotation in extrinsics")
        object.__setattr__(self, "extrinsics", ext)
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[:2] != (self.height, self.width):
            raise FormatError(
                f"image is {img.shape[1]}x{img.shape[0]}, view declares {self.width}x{self.height}")
        object.__setattr__(self, "image", img)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            if depth.shape != (self.height, self.width):
                raise FormatError("depth map size does not match the view")
            object.__setattr__(self, "depth", depth)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def channels(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True, eq=False)
class TokenBundle:
    """Scene tokens plus an optional guidance token, stored as float32."""

    scene_tokens: np.ndarray
    guidance_token: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        scene = np.ascontiguousarray(self.scene_tokens, dtype=np.float32)
        if scene.ndim != 2:
            raise ValueError("scene_tokens must be a matrix")
        if not np.all(np.isfinite(scene)):
            raise ValueError("scene tokens must be finite")
        object.__setattr__(self, "scene_tokens", scene)
        if self.guidance_token is not None:
            guide = np.ascontiguousarray(self.guidance_token, dtype=np.float32).reshape(-1)
            if guide.shape != (scene.shape[1],):
                raise ValueError("guidance token width must match scene tokens")
            if not np.all(np.isfinite(guide)):
                raise ValueError("guidance token must be finite")
            object.__setattr__(self, "guidance_token", guide)

    @property
    def token_count(self) -> int:
        return self.scene_tokens.shape[0]


# ---------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(f) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    if f.readline().strip() != b"ply":
        raise FormatError("missing 'ply' magic line")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = f.readline()
        if not raw:
            raise FormatError("unexpected end of file in PLY header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) != 3:
                raise FormatError(f"malformed format line: {raw!r}")
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3:
                raise FormatError(f"malformed element line: {raw!r}")
            try:
                elements.append((parts[1], int(parts[2]), []))
            except ValueError as exc:
                raise FormatError(f"bad element count: {raw!r}") from exc
        elif key == "property":
            if not elements:
                raise FormatError("property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise FormatError(f"malformed list property: {raw!r}")
                elements[-1][2].append((parts[4], "list"))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise FormatError(f"malformed property line: {raw!r}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise FormatError(f"unknown header keyword {key!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def load_point_cloud(path) -> PointCloud:
    """Read the vertex element of a PLY file, preserving file order."""
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise FormatError("PLY has no vertex element")
        for name, count, props in elements:
            if name == "vertex":
                break
            # elements stored before the vertex block are skipped
            if fmt == "ascii":
                for _ in range(count):
                    f.readline()
            else:
                if any(t == "list" for _, t in props):
                    raise FormatError(f"cannot skip list element {name!r} before vertices")
                f.read(count * np.dtype([(p, "<" + t) for p, t in props]).itemsize)
        _, count, props = elements[names.index("vertex")]
        prop_names = [p for p, _ in props]
        for axis in "xyz":
            if axis not in prop_names:
                raise FormatError(f"PLY vertex element lacks property {axis!r}")
        if any(t == "list" for _, t in props):
            raise FormatError("list properties on vertices are not supported")
        if count < 1:
            raise FormatError("PLY contains zero points")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                values = f.readline().split()
                if len(values) < len(props):
                    raise FormatError("truncated ASCII vertex record")
                rows.append(values[:len(props)])
            text = np.array(rows, dtype=str)
            table = np.empty(count, dtype=dtype)
            try:
                for i, (p, t) in enumerate(props):
                    parsed = text[:, i].astype(np.float64 if t[0] == "f" else np.int64)
                    table[p] = parsed.astype(t)
            except ValueError as exc:
                raise FormatError(f"bad ASCII vertex value ({exc})") from exc
        else:
            payload = f.read(count * dtype.itemsize)
            if len(payload) != count * dtype.itemsize:
                raise FormatError("truncated binary vertex data")
            table = np.frombuffer(payload, dtype=dtype)
    positions = np.stack([table[a].astype(np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in prop_names for c in ("red", "green", "blue")):
        colors = np.stack([table[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1)
        if all(table.dtype[c] == np.uint8 for c in ("red", "green", "blue")):
            colors = colors / 255.0
    return PointCloud(positions, colors)


def write_point_cloud(cloud: PointCloud, path, binary: bool = True,
                      single: bool = False) -> None:
    """Write x,y,z (and uint8 colors when present) as PLY.

    Coordinates are doubles so positions round-trip exactly; ``single``
    writes float32 instead.
    """
    kind, ply_type = ("<f4", "float") if single else ("<f8", "double")
    fields = [("x", kind), ("y", kind), ("z", kind)]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    table = np.empty(cloud.count, dtype=fields)
    for i, a in enumerate("xyz"):
        table[a] = cloud.positions[:, i]
    if cloud.colors is not None:
        rgb = np.rint(cloud.colors * 255.0).astype(np.uint8)
        for i, c in enumerate(("red", "green", "blue")):
            table[c] = rgb[:, i]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {cloud.count}"]
    header += [f"property {ply_type} {a}" for a in "xyz"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(table.tobytes())
        else:
            for row in table:
                f.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


# ------------------------------------------------------------ feature blobs

def write_feature_map(array: np.ndarray, path) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("feature map must be H x W x C")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III4s", h, w, c, FEATURE_MAGIC))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_feature_map(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"{path}: feature map header truncated")
    h, w, c, magic = struct.unpack_from("<III4s", buf, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature map magic {magic!r}")
    expected = 16 + 4 * h * w * c
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float64)


def _load_raster(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return read_feature_map(path)


# -------------------------------------------------------------- camera rigs

def load_camera_rig(path) -> list[CameraView]:
    """Load views from a JSON array.

    Each entry::

        {"intrinsics": {"fx": .., "fy": .., "cx": .., "cy": ..},
         "extrinsics": [16 numbers, row-major world-to-camera] or 4x4 nested,
         "width": W, "height": H,
         "image": "relative/or/absolute/path",       # feature blob or .npy
         "depth": "optional depth map path"}

    Relative paths resolve against the JSON file's directory.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list):
        raise FormatError(f"{path}: camera rig must be a JSON array")
    views = []
    for i, entry in enumerate(entries):
        try:
            intr = entry["intrinsics"]
            ext = np.asarray(entry["extrinsics"], dtype=np.float64).reshape(4, 4)
            width, height = int(entry["width"]), int(entry["height"])
            image_path = entry.get("image") or entry["features"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: view {i} is malformed ({exc})") from exc
        image = _load_raster(path.parent / image_path)
        depth = None
        if entry.get("depth"):
            depth = _load_raster(path.parent / entry["depth"])
            depth = depth.reshape(depth.shape[0], depth.shape[1])
        views.append(CameraView(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]),
                                float(intr["cy"]), ext, width, height, image, depth))
    return views


def save_camera_rig(views: Sequence[CameraView], path, image_names: Sequence[str] | None = None) -> None:
    """Write views (and their rasters as feature blobs) next to ``path``."""
    path = Path(path)
    entries = []
    for i, view in enumerate(views):
        name = image_names[i] if image_names else f"{path.stem}_view{i}.ndfm"
        write_feature_map(view.image, path.parent / name)
        entry: dict[str, Any] = {
            "intrinsics": {"fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy},
            "extrinsics": view.extrinsics.reshape(-1).tolist(),
            "width": view.width, "height": view.height, "image": name,
        }
        if view.depth is not None:
            depth_name = f"{Path(name).stem}_depth.ndfm"
            write_feature_map(view.depth, path.parent / depth_name)
            entry["depth"] = depth_name
        entries.append(entry)
    path.write_text(json.dumps(entries, indent=2))


# ------------------------------------------------------------------- tokens

def write_tokens(bundle: TokenBundle, path, fmt: str | None = None) -> None:
    """Write a bundle; ``fmt`` is ``'binary'`` or ``'json'`` (default by suffix)."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "binary")
    meta = dict(bundle.metadata)
    meta.setdefault("version", TOKEN_VERSION)
    if fmt == "json":
        doc = {
            "version": TOKEN_VERSION,
            "scene_tokens": bundle.scene_tokens.astype(np.float64).tolist(),
            "guidance_token": (None if bundle.guidance_token is None
                               else bundle.guidance_token.astype(np.float64).tolist()),
            "metadata": meta,
        }
        Path(path).write_text(json.dumps(doc))
        return
    if fmt != "binary":
        raise ValueError(f"unknown token format {fmt!r}")
    m, d = bundle.scene_tokens.shape
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    flags = 1 if bundle.guidance_token is not None else 0
    chunks = [TOKEN_MAGIC, struct.pack("<IIIII", TOKEN_VERSION, m, d, flags, len(meta_bytes)),
              meta_bytes, bundle.scene_tokens.astype("<f4").tobytes()]
    if flags:
        chunks.append(bundle.guidance_token.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tokens(path) -> TokenBundle:
    raw = Path(path).read_bytes()
    if raw[:4] == TOKEN_MAGIC:
        return _read_tokens_binary(raw, path)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a token bundle") from exc
    if doc.get("version") != TOKEN_VERSION:
        raise VersionMismatchError(
            f"{path}: token version {doc.get('version')}, reader supports {TOKEN_VERSION}")
    guide = doc.get("guidance_token")
    scene = np.asarray(doc["scene_tokens"], dtype=np.float64)
    return TokenBundle(scene.reshape(len(doc["scene_tokens"]), -1),
                       None if guide is None else np.asarray(guide),
                       doc.get("metadata", {}))


def _read_tokens_binary(raw: bytes, path) -> TokenBundle:
    if len(raw) < 24:
        raise FormatError(f"{path}: token header truncated")
    version, m, d, flags, meta_len = struct.unpack_from("<IIIII", raw, 4)
    if version != TOKEN_VERSION:
        raise VersionMismatchError(
            f"{path}: token version {version}, reader supports {TOKEN_VERSION}")
    offset = 24
    meta = json.loads(raw[offset:offset + meta_len].decode("utf-8")) if meta_len else {}
    offset += meta_len
    expected = offset + 4 * m * d + (4 * d if flags & 1 else 0)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    scene = np.frombuffer(raw, dtype="<f4", count=m * d, offset=offset).reshape(m, d)
    offset += 4 * m * d
    guide = np.frombuffer(raw, dtype="<f4", count=d, offset=offset) if flags & 1 else None
    return TokenBundle(scene, guide, meta)


# -------------------------------------------------------------------- masks

def write_point_mask(mask: Sequence[int] | np.ndarray, path, point_count: int | None = None) -> None:
    """Write one ``0``/``1`` per line; ``point_count`` guards the length."""
    values = np.asarray(mask).reshape(-1)
    if point_count is not None and len(values) != point_count:
        raise ValueError(f"mask has {len(values)} entries, cloud has {point_count} points")
    if not np.all((values == 0) | (values == 1)):
        raise ValueError("mask entries must be 0 or 1")
    Path(path).write_text("".join("1\n" if v else "0\n" for v in values))


def read_point_mask(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    try:
        values = np.array([int(s) for s in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: mask lines must be 0 or 1") from exc
    if not np.all((values == 0) | (values == 1)):
        raise FormatError(f"{path}: mask lines must be 0 or 1")
    return values
