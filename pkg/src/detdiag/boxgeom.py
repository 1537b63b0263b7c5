"""Oriented 3D box geometry.

Boxes are yaw-only (rotation about the vertical axis), parameterized by their
geometric center in a z-up frame. IoU is computed exactly as the convex
intersection of the two ground-plane footprints times the overlap of the
height intervals.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

Point = Tuple[float, float]

# On-edge classification tolerance for polygon clipping, in meters.
CLIP_EPS = 1e-9
TWO_PI = 2.0 * math.pi


class InvalidBoxError(ValueError):
    pass


def normalize_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(angle):
        raise InvalidBoxError(f"non-finite angle {angle!r}")
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "length", "width", "height", "yaw"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise InvalidBoxError(f"{name} must be a finite number, got {value!r}")
            object.__setattr__(self, name, float(value))
        for name in ("length", "width", "height"):
            if getattr(self, name) <= 0.0:
                raise InvalidBoxError(f"{name} must be positive, got {getattr(self, name)!r}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> Tuple[float, float, float]:
        return (self.cx, self.cy, self.cz)

    @property
    def dims(self) -> Tuple[float, float, float]:
        return (self.length, self.width, self.height)

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def z_range(self) -> Tuple[float, float]:
        half = 0.5 * self.height
        return (self.cz - half, self.cz + half)

    def replace(self, **changes) -> "Box3D":
        return dataclasses.replace(self, **changes)

    def translated(self, dx: float, dy: float, dz: float = 0.0) -> "Box3D":
        return self.replace(cx=self.cx + dx, cy=self.cy + dy, cz=self.cz + dz)

    def rotated_about_origin(self, angle: float) -> "Box3D":
        """Rotate the whole box (pose and heading) about the world z axis."""
        c, s = math.cos(angle), math.sin(angle)
        return self.replace(
            cx=c * self.cx - s * self.cy,
            cy=s * self.cx + c * self.cy,
            yaw=self.yaw + angle,
        )

    def bev_corners(self) -> List[Point]:
        """Footprint corners, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        corners = []
        for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            corners.append((self.cx + c * lx - s * ly, self.cy + s * lx + c * ly))
        return corners

    def contains(self, x: float, y: float, z: float) -> bool:
        dx, dy = x - self.cx, y - self.cy
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (abs(lx) <= 0.5 * self.length and abs(ly) <= 0.5 * self.width
                and abs(z - self.cz) <= 0.5 * self.height)


def polygon_area(polygon: Sequence[Point]) -> float:
    """Shoelace area (absolute value)."""
    n = len(polygon)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return abs(acc) * 0.5


def _edge_side(p: Point, a: Point, b: Point) -> float:
    # Signed distance of p from the directed line a->b, positive on the left.
    ex, ey = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(ex, ey)
    return (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / norm


def _segment_line_intersection(p: Point, q: Point, dp: float, dq: float) -> Point:
    t = dp / (dp - dq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> List[Point]:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        source, output = output, []
        prev = source[-1]
        d_prev = _edge_side(prev, a, b)
        for cur in source:
            d_cur = _edge_side(cur, a, b)
            cur_in = d_cur >= -CLIP_EPS
            prev_in = d_prev >= -CLIP_EPS
            if cur_in:
                if not prev_in:
                    output.append(_segment_line_intersection(prev, cur, d_prev, d_cur))
                output.append(cur)
            elif prev_in and d_prev > CLIP_EPS:
                output.append(_segment_line_intersection(prev, cur, d_prev, d_cur))
            prev, d_prev = cur, d_cur
    return output


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # Cheap reject on circumscribed circles.
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    return polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def height_overlap(a: Box3D, b: Box3D) -> float:
    a0, a1 = a.z_range
    b0, b1 = b.z_range
    return max(0.0, min(a1, b1) - max(a0, b0))


def intersection_volume(a: Box3D, b: Box3D) -> float:
    dz = height_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    return bev_intersection_area(a, b) * dz


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two yaw-only boxes, in [0, 1]."""
    if a == b:
        return 1.0
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def center_distance_ground(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def height_error(a: Box3D, b: Box3D) -> float:
    return abs(a.cz - b.cz)


def yaw_delta(a: Box3D, b: Box3D) -> float:
    """Smallest absolute heading difference, in [0, pi]."""
    return abs(normalize_angle(a.yaw - b.yaw))


def aligned_iou(a: Box3D, b: Box3D) -> float:
    """IoU once ``b`` is moved onto ``a``'s center and heading; depends on sizes only."""
    inter = min(a.length, b.length) * min(a.width, b.width) * min(a.height, b.height)
    return inter / (a.volume + b.volume - inter)
