"""Pinhole projection between the sensor voxel frame and the image plane.

Conventions: image coordinates are continuous with pixel (i, j) centered
at (v, u) = (i, j), so pixel j spans [j - 0.5, j + 0.5); a point is inside
the image iff -0.5 <= u < W - 0.5 (and likewise for v).  Normalized
sampling coordinates map that span onto [0, 1] via (u + 0.5) / W.  Depth
is the third homogeneous coordinate of the projection, which for a
rectified KITTI-style P matrix is the camera-frame z plus a fixed offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kitti_io import Calibration
from .voxel_grid import GridSpec

_EPS_DEPTH = 1e-9


def kitti_axes_transform() -> np.ndarray:
    """Sensor frame (x forward, y left, z up) to camera frame (z forward)."""
    tr = np.zeros((4, 4))
    tr[0, 1] = -1.0
    tr[1, 2] = -1.0
    tr[2, 0] = 1.0
    tr[3, 3] = 1.0
    return tr


@dataclass(frozen=True)
class CameraRig:
    """A projective camera posed relative to the sensor voxel frame.

    p: 3x4 projection matrix in the camera frame, with invertible left
       3x3 block.
    tr: 4x4 homogeneous sensor-to-camera transform.
    width, height: image size in pixels.
    """

    p: np.ndarray
    tr: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=np.float64)
        tr = np.asarray(self.tr, dtype=np.float64)
        if p.shape != (3, 4):
            raise ValueError(f"p must be 3x4, got {p.shape}")
        if tr.shape != (4, 4):
            raise ValueError(f"tr must be 4x4, got {tr.shape}")
        if abs(np.linalg.det(p[:, :3])) < 1e-12:
            raise ValueError("left 3x3 block of p is singular")
        if abs(np.linalg.det(tr)) < 1e-12:
            raise ValueError("tr is singular")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "tr", tr)

    @classmethod
    def from_calibration(
        cls, calib: Calibration, width: int, height: int
    ) -> "CameraRig":
        return cls(p=calib.p2, tr=calib.tr, width=width, height=height)

    @classmethod
    def from_intrinsics(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        tr: np.ndarray | None = None,
    ) -> "CameraRig":
        p = np.zeros((3, 4))
        p[0, 0], p[1, 1] = fx, fy
        p[0, 2], p[1, 2] = cx, cy
        p[2, 2] = 1.0
        return cls(
            p=p,
            tr=kitti_axes_transform() if tr is None else tr,
            width=width,
            height=height,
        )


def project_points(
    points: np.ndarray, rig: CameraRig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project sensor-frame points [N, 3] onto the image.

    Returns (uv [N, 2], depth [N], in_fov [N]).  in_fov requires positive
    depth and the continuous pixel coordinate inside the image span; rows
    behind the camera get uv filled with the principal direction of
    nothing useful and must be ignored via the mask.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be [N, 3], got {points.shape}")
    hom = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    cam = hom @ rig.tr.T
    img = cam @ rig.p.T  # [N, 3]
    depth = img[:, 2]
    in_front = depth > _EPS_DEPTH
    uv = np.zeros((len(points), 2))
    np.divide(img[:, :2], depth[:, None], out=uv, where=in_front[:, None])
    in_fov = (
        in_front
        & (uv[:, 0] >= -0.5)
        & (uv[:, 0] < rig.width - 0.5)
        & (uv[:, 1] >= -0.5)
        & (uv[:, 1] < rig.height - 0.5)
    )
    return uv, depth, in_fov


def unproject_pixels(
    uv: np.ndarray, depth: np.ndarray, rig: CameraRig
) -> np.ndarray:
    """Exact inverse of project_points for rows with positive depth.

    Args:
        uv: continuous pixel coordinates [N, 2].
        depth: third homogeneous coordinate of the projection [N].

    Returns:
        Sensor-frame points [N, 3].
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError(f"uv must be [N, 2], got {uv.shape}")
    if depth.shape != (len(uv),):
        raise ValueError("depth must be [N]")
    if (depth <= 0).any():
        raise ValueError("depth must be positive")
    m = rig.p[:, :3]
    p4 = rig.p[:, 3]
    img = np.concatenate([uv, np.ones((len(uv), 1))], axis=1) * depth[:, None]
    cam = (img - p4) @ np.linalg.inv(m).T
    cam_h = np.concatenate([cam, np.ones((len(cam), 1))], axis=1)
    return (cam_h @ np.linalg.inv(rig.tr).T)[:, :3]


def render_depth_map(points: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Rasterize points to a nearest-wins depth map [H, W]; 0 = no return."""
    uv, depth, in_fov = project_points(points, rig)
    out = np.full(rig.height * rig.width, np.inf)
    if in_fov.any():
        cols = np.floor(uv[in_fov, 0] + 0.5).astype(np.int64)
        rows = np.floor(uv[in_fov, 1] + 0.5).astype(np.int64)
        np.minimum.at(out, rows * rig.width + cols, depth[in_fov])
    out[~np.isfinite(out)] = 0.0
    return out.reshape(rig.height, rig.width)


@dataclass
class VoxelProjection:
    """Per-voxel image geometry, flat C order over the grid.

    uv: continuous pixel coordinates [n, 2] (junk outside the FOV).
    depth: projective depth [n].
    in_fov: bool [n], True where the voxel center lands inside the image.
    ref_norm: normalized [0, 1]^2 sampling coordinates [n, 2], clipped to
        the image span so out-of-FOV rows stay finite.
    """

    uv: np.ndarray
    depth: np.ndarray
    in_fov: np.ndarray
    ref_norm: np.ndarray


def project_voxel_centers(spec: GridSpec, rig: CameraRig) -> VoxelProjection:
    """Project every voxel center of `spec` into the image."""
    uv, depth, in_fov = project_points(spec.voxel_centers(), rig)
    size = np.array([rig.width, rig.height], dtype=np.float64)
    ref = np.clip((uv + 0.5) / size, 0.0, 1.0)
    ref[~in_fov] = 0.5
    return VoxelProjection(uv=uv, depth=depth, in_fov=in_fov, ref_norm=ref)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Iterated 6-neighborhood dilation of a bool volume."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    out = np.asarray(mask, dtype=bool).copy()
    for _ in range(radius):
        grown = out.copy()
        for axis in range(3):
            shifted = np.roll(out, 1, axis=axis)
            edge = [slice(None)] * 3
            edge[axis] = 0
            shifted[tuple(edge)] = False
            grown |= shifted
            shifted = np.roll(out, -1, axis=axis)
            edge[axis] = -1
            shifted[tuple(edge)] = False
            grown |= shifted
        out = grown
    return out


def depth_to_voxel_proposals(
    depth_map: np.ndarray,
    rig: CameraRig,
    spec: GridSpec,
    dilation: int = 0,
) -> np.ndarray:
    """Mark voxels hit by unprojected depth pixels, bool [X, Y, Z].

    Pixels with depth 0 carry no measurement and are skipped.  Each
    remaining pixel is lifted to a sensor-frame point and binned into the
    voxel containing it; points outside the grid are dropped.  An optional
    dilation grows the mask to absorb quantization at voxel borders.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if depth_map.shape != (rig.height, rig.width):
        raise ValueError(
            f"depth map shape {depth_map.shape} != image size "
            f"{(rig.height, rig.width)}"
        )
    mask = np.zeros(spec.dims, dtype=bool)
    rows, cols = np.nonzero(depth_map > 0)
    if len(rows):
        uv = np.stack([cols, rows], axis=-1).astype(np.float64)
        pts = unproject_pixels(uv, depth_map[rows, cols], rig)
        coords = np.floor(
            (pts - np.asarray(spec.origin)) / spec.voxel_size
        ).astype(np.int64)
        ok = ((coords >= 0) & (coords < np.asarray(spec.dims))).all(axis=1)
        coords = coords[ok]
        mask[coords[:, 0], coords[:, 1], coords[:, 2]] = True
    return dilate_mask(mask, dilation) if dilation else mask
