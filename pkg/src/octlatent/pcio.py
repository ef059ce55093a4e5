"""Point cloud loading/saving and world <-> lattice quantization."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    attribute: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point coordinates must be finite")
        if self.attribute is not None:
            self.attribute = np.asarray(self.attribute, dtype=np.float64).reshape(-1)
            if len(self.attribute) != len(self.points):
                raise ValidationError("attribute length does not match point count")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class QuantParams:
    bias: tuple[float, float, float]
    qs: float
    depth: int

    def __post_init__(self):
        if not self.qs > 0:
            raise ValidationError("quantization step must be positive")
        if self.depth < 1:
            raise ValidationError("octree depth must be >= 1")


@dataclass
class QuantizedCloud:
    voxels: np.ndarray  # (M, 3) int64, lexicographically sorted, unique
    params: QuantParams

    def __len__(self) -> int:
        return len(self.voxels)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _sorted_unique(v: np.ndarray) -> np.ndarray:
    if len(v) == 0:
        return v.reshape(0, 3)
    return np.unique(v, axis=0)


def quantize(cloud: PointCloud, depth: int) -> QuantizedCloud:
    if len(cloud) == 0:
        raise ValidationError("cannot quantize an empty cloud")
    if depth < 1 or depth > 20:
        raise ValidationError("depth must be in [1, 20]")
    pts = cloud.points
    lo = pts.min(axis=0)
    bounding = float((pts.max(axis=0) - lo).max())
    top = (1 << depth) - 1
    qs = bounding / top if bounding > 0 else 1.0
    v = round_half_away((pts - lo) / qs)
    v = np.clip(v, 0, top).astype(np.int64)
    params = QuantParams(bias=tuple(float(b) for b in lo), qs=qs, depth=depth)
    return QuantizedCloud(_sorted_unique(v), params)


def dequantize(q: QuantizedCloud) -> PointCloud:
    bias = np.asarray(q.params.bias, dtype=np.float64)
    return PointCloud(q.voxels.astype(np.float64) * q.params.qs + bias)


# file formats ----------------------------------------------------------------


def load_points(path, format: str | None = None) -> PointCloud:
    fmt = format or _guess_format(path)
    if fmt == "kitti-bin":
        return _load_kitti(path)
    if fmt == "ply-ascii":
        return _load_ply(path)
    raise ValidationError(f"unknown point cloud format {fmt!r}")


def _guess_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".bin":
        return "kitti-bin"
    if ext == ".ply":
        return "ply-ascii"
    raise ValidationError(f"cannot infer format from extension {ext!r}")


def _load_kitti(path) -> PointCloud:
    raw = open(path, "rb").read()
    if len(raw) % 16:
        raise ValidationError(f"kitti-bin size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def _load_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValidationError("PLY header must start with 'ply'")
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise ValidationError("only 'format ascii 1.0' PLY files are supported")
    count = None
    props: list[str] = []
    in_vertex = False
    end = None
    for i, line in enumerate(lines[2:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
    if end is None or count is None:
        raise ValidationError("PLY header lacks end_header or a vertex element")
    if props[:3] != ["x", "y", "z"]:
        raise ValidationError("PLY vertex properties must start with x, y, z")
    body = lines[end + 1 : end + 1 + count]
    if len(body) != count:
        raise ValidationError(f"PLY declares {count} vertices but has {len(body)}")
    if count == 0:
        return PointCloud(np.zeros((0, 3)))
    try:
        data = np.array([row.split()[:3] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"malformed PLY vertex row: {exc}") from exc
    return PointCloud(data)


def save_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
            "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors).reshape(-1, 3).astype(np.uint8)
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(head) + "\n")
        for i, p in enumerate(points.tolist()):
            row = f"{p[0]!r} {p[1]!r} {p[2]!r}"
            if colors is not None:
                c = colors[i]
                row += f" {c[0]} {c[1]} {c[2]}"
            fh.write(row + "\n")


def save_kitti(path, points: np.ndarray, attribute: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    attr = np.zeros(len(points)) if attribute is None else attribute
    rec = np.column_stack([points, attr]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())
