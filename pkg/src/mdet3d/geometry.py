"""Point-cloud and oriented-box geometry.

Rotated-box overlap uses Sutherland-Hodgman clipping of convex quads with
shoelace areas; point cropping uses half-open [min, max) intervals so
boundary behavior is deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.fmod(yaw, 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    elif y > math.pi:
        y -= 2.0 * math.pi
    return y


@dataclass(frozen=True)
class Range3D:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ConfigError(f"invalid range: {self}")

    def contains(self, x: float, y: float, z: float) -> bool:
        return (
            self.x_min <= x < self.x_max
            and self.y_min <= y < self.y_max
            and self.z_min <= z < self.z_max
        )


@dataclass(frozen=True)
class Box3D:
    """Oriented box: center, dimensions, yaw about +z, class id, score."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ConfigError(f"box dimensions must be positive: {self}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def volume(self) -> float:
        return self.l * self.w * self.h


@dataclass
class PointCloud:
    xyz: np.ndarray  # n x 3, meters
    intensity: np.ndarray  # n, in [0,1]

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.intensity.shape[0] != self.xyz.shape[0]:
            raise ConfigError("intensity count must match point count")
        if not (np.isfinite(self.xyz).all() and np.isfinite(self.intensity).all()):
            raise ConfigError("point cloud contains non-finite values")

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros(0))


def crop_to_range(pc: PointCloud, boxes: list[Box3D], r: Range3D) -> tuple[PointCloud, list[Box3D]]:
    """Keep points inside the half-open range and boxes whose center is inside."""
    lo = np.array([r.x_min, r.y_min, r.z_min])
    hi = np.array([r.x_max, r.y_max, r.z_max])
    keep = np.all((pc.xyz >= lo) & (pc.xyz < hi), axis=1)
    cropped = PointCloud(pc.xyz[keep], pc.intensity[keep])
    kept_boxes = [b for b in boxes if r.contains(b.cx, b.cy, b.cz)]
    return cropped, kept_boxes


def shift_origin(pc: PointCloud, boxes: list[Box3D], dz: float) -> tuple[PointCloud, list[Box3D]]:
    """Translate everything vertically by dz (signed, meters)."""
    if not math.isfinite(dz):
        raise ConfigError("dz must be finite")
    xyz = pc.xyz.copy()
    xyz[:, 2] += dz
    shifted = PointCloud(xyz, pc.intensity.copy())
    return shifted, [replace(b, cz=b.cz + dz) for b in boxes]


def box_corners_bev(b: Box3D) -> np.ndarray:
    """Counter-clockwise planar corners of the box footprint, shape 4x2."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    half = np.array(
        [
            [b.l / 2, b.w / 2],
            [-b.l / 2, b.w / 2],
            [-b.l / 2, -b.w / 2],
            [b.l / 2, -b.w / 2],
        ]
    )
    rot = np.array([[c, -s], [s, c]])
    return half @ rot.T + np.array([b.cx, b.cy])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (positive for counter-clockwise input)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject by a convex CCW clipper."""
    output = [tuple(p) for p in subject]
    m = len(clipper)
    for i in range(m):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % m]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []

        def inside(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0]) >= 0.0

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom
            return (p[0] + t * dx, p[1] + t * dy)

        prev = inputs[-1]
        prev_in = inside(prev)
        for cur in inputs:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif prev_in:
                output.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
    return np.array(output).reshape(-1, 2)


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two rotated BEV footprints, in [0, 1]."""
    area_a = a.l * a.w
    area_b = b.l * b.w
    if area_a < DEGENERATE_AREA or area_b < DEGENERATE_AREA:
        log.warning("degenerate box in rotated_iou_bev, returning 0")
        return 0.0
    inter_poly = clip_polygon(box_corners_bev(a), box_corners_bev(b))
    inter = abs(polygon_area(inter_poly))
    union = area_a + area_b - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: rotated BEV intersection times vertical overlap over volume union."""
    area_a = a.l * a.w
    area_b = b.l * b.w
    if area_a < DEGENERATE_AREA or area_b < DEGENERATE_AREA:
        log.warning("degenerate box in iou_3d, returning 0")
        return 0.0
    inter_poly = clip_polygon(box_corners_bev(a), box_corners_bev(b))
    inter_area = abs(polygon_area(inter_poly))
    z_lo = max(a.cz - a.h / 2, b.cz - b.h / 2)
    z_hi = min(a.cz + a.h / 2, b.cz + b.h / 2)
    inter_vol = inter_area * max(z_hi - z_lo, 0.0)
    union = a.volume() + b.volume() - inter_vol
    return min(max(inter_vol / union, 0.0), 1.0)
