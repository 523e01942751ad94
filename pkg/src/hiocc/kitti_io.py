"""Readers and writers for SemanticKITTI-style voxel volumes.

Covers the on-disk formats of the voxel completion benchmark: packed
binary occupancy/invalid/occluded masks (.bin/.invalid/.occluded),
uint16 label volumes (.label), float32 point clouds (.velodyne),
calibration text files, and 16-bit depth PNGs.  All volume codecs use
the benchmark's linear voxel order, i.e. C-order over (x, y, z):
index = x * Y * Z + y * Z + z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .voxel_grid import GridSpec, SemanticGrid

# Depth PNGs store millimeter-ish fixed point: meters = value / 256.
DEPTH_PNG_SCALE = 256.0


def _prod(dims: tuple[int, int, int]) -> int:
    return int(dims[0]) * int(dims[1]) * int(dims[2])


def unpack_bitgrid(buf: bytes, dims: tuple[int, int, int]) -> np.ndarray:
    """Decode a packed bit volume into a bool array [X, Y, Z].

    Bits are packed most-significant first: bit b of byte k holds linear
    voxel index 8 * k + b.  The buffer must hold exactly prod(dims) bits.
    """
    n = _prod(dims)
    if n % 8 != 0:
        raise ValueError(f"voxel count {n} of dims {dims} is not a multiple of 8")
    if len(buf) != n // 8:
        raise ValueError(
            f"expected {n // 8} bytes for dims {dims}, got {len(buf)}"
        )
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="big")
    return bits.astype(bool).reshape(dims)


def pack_bitgrid(grid: np.ndarray) -> bytes:
    """Inverse of unpack_bitgrid: bool [X, Y, Z] -> packed bytes."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected a 3D grid, got shape {grid.shape}")
    n = grid.size
    if n % 8 != 0:
        raise ValueError(f"voxel count {n} is not a multiple of 8")
    return np.packbits(grid.reshape(-1).astype(np.uint8), bitorder="big").tobytes()


def decode_label_volume(buf: bytes, dims: tuple[int, int, int]) -> np.ndarray:
    """Decode a little-endian uint16 label volume into [X, Y, Z]."""
    n = _prod(dims)
    if len(buf) != 2 * n:
        raise ValueError(f"expected {2 * n} bytes for dims {dims}, got {len(buf)}")
    return np.frombuffer(buf, dtype="<u2").reshape(dims).copy()


def encode_label_volume(labels: np.ndarray) -> bytes:
    """Inverse of decode_label_volume; labels must fit in uint16."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("labels out of uint16 range")
    return np.ascontiguousarray(labels, dtype="<u2").tobytes()


@dataclass(frozen=True)
class RemapTable:
    """Lookup from raw sensor label ids to a compact training id range.

    table: int32 [65536]; -1 marks raw ids with no mapping.
    names: class names indexed by training id.
    free_id: training id of empty space.
    """

    table: np.ndarray
    names: tuple[str, ...]
    free_id: int

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @classmethod
    def from_dict(cls, spec: dict) -> "RemapTable":
        names = tuple(str(n) for n in spec["names"])
        free_id = int(spec.get("free_id", 0))
        table = np.full(65536, -1, dtype=np.int32)
        for raw, train in spec["source_to_train"].items():
            raw_i, train_i = int(raw), int(train)
            if not 0 <= raw_i < 65536:
                raise ValueError(f"raw id {raw_i} out of uint16 range")
            if not 0 <= train_i < len(names):
                raise ValueError(f"train id {train_i} has no name entry")
            table[raw_i] = train_i
        if not 0 <= free_id < len(names):
            raise ValueError(f"free_id {free_id} has no name entry")
        return cls(table=table, names=names, free_id=free_id)

    @classmethod
    def from_json(cls, path: str | Path) -> "RemapTable":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Remap raw ids; raises on any id absent from the table."""
        raw = np.asarray(raw)
        mapped = self.table[raw.astype(np.int64)]
        if (mapped < 0).any():
            bad = np.unique(raw[mapped < 0])
            raise ValueError(f"unmapped raw label ids: {bad.tolist()}")
        return mapped.astype(np.int32)


def default_remap() -> RemapTable:
    """The packaged SemanticKITTI 20-class mapping."""
    data = resources.files("hiocc.data").joinpath("semantic_kitti_remap.json")
    return RemapTable.from_dict(json.loads(data.read_text()))


def read_bitgrid(path: str | Path, dims: tuple[int, int, int]) -> np.ndarray:
    return unpack_bitgrid(Path(path).read_bytes(), dims)


def write_bitgrid(path: str | Path, grid: np.ndarray) -> None:
    Path(path).write_bytes(pack_bitgrid(grid))


def read_label_volume(path: str | Path, dims: tuple[int, int, int]) -> np.ndarray:
    return decode_label_volume(Path(path).read_bytes(), dims)


def write_label_volume(path: str | Path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_label_volume(labels))


def load_voxel_frame(
    label_path: str | Path,
    dims: tuple[int, int, int],
    voxel_size: float,
    remap: RemapTable,
    invalid_path: str | Path | None = None,
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> SemanticGrid:
    """Load one ground-truth frame as a SemanticGrid.

    Labels are remapped to training ids; voxels flagged in the companion
    .invalid mask (when given) are marked not valid.  Remapping is only
    enforced on valid voxels, since invalid ones may carry junk ids.
    """
    raw = read_label_volume(label_path, dims)
    valid = np.ones(dims, dtype=bool)
    if invalid_path is not None:
        valid = ~read_bitgrid(invalid_path, dims)
    labels = np.zeros(dims, dtype=np.int32)
    labels[valid] = remap.apply(raw[valid])
    spec = GridSpec(dims=dims, voxel_size=voxel_size, origin=origin)
    return SemanticGrid(
        spec=spec, labels=labels, num_classes=remap.num_classes, valid=valid
    )


def decode_point_cloud(buf: bytes) -> np.ndarray:
    """Decode a velodyne scan: float32 LE (x, y, z, reflectance) -> [N, 4]."""
    if len(buf) % 16 != 0:
        raise ValueError(f"buffer length {len(buf)} is not a multiple of 16")
    return np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float64)


def read_point_cloud(path: str | Path) -> np.ndarray:
    return decode_point_cloud(Path(path).read_bytes())


@dataclass(frozen=True)
class Calibration:
    """Parsed calibration file: camera intrinsics and sensor-to-camera pose.

    p2: 3x4 projection matrix of the reference camera.
    tr: 4x4 homogeneous transform from sensor frame to camera frame.
    """

    p2: np.ndarray
    tr: np.ndarray


def parse_calibration(text: str) -> Calibration:
    """Parse `KEY: v0 v1 ... v11` lines; requires P2 and Tr."""
    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        vals = rest.split()
        if len(vals) != 12:
            raise ValueError(
                f"line {lineno}: expected 12 values for {key!r}, got {len(vals)}"
            )
        try:
            rows[key.strip()] = np.array([float(v) for v in vals]).reshape(3, 4)
        except ValueError as e:
            raise ValueError(f"line {lineno}: bad float in {key!r}: {e}") from None
    for need in ("P2", "Tr"):
        if need not in rows:
            raise ValueError(f"calibration is missing {need!r}")
    tr = np.eye(4)
    tr[:3, :] = rows["Tr"]
    return Calibration(p2=rows["P2"], tr=tr)


def read_calibration(path: str | Path) -> Calibration:
    return parse_calibration(Path(path).read_text())


def read_depth_png(path: str | Path) -> np.ndarray:
    """Read a 16-bit depth PNG into float64 meters [H, W]; 0 means no depth."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32):
        raise ValueError(f"expected a 16-bit PNG, got dtype {arr.dtype}")
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel PNG, got shape {arr.shape}")
    return arr.astype(np.float64) / DEPTH_PNG_SCALE


def write_depth_png(path: str | Path, depth: np.ndarray) -> None:
    """Write float meters as a 16-bit depth PNG (lossy past 1/256 m)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"expected [H, W], got shape {depth.shape}")
    if depth.min(initial=0.0) < 0:
        raise ValueError("depth must be nonnegative")
    q = np.round(depth * DEPTH_PNG_SCALE)
    if q.max(initial=0.0) > np.iinfo(np.uint16).max:
        raise ValueError("depth exceeds the 16-bit PNG range")
    Image.fromarray(q.astype(np.uint16)).save(path, format="PNG")
