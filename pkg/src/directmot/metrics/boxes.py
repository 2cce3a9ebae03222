"""Axis-aligned 2D boxes, yaw-rotated 3D boxes and their IoU / GIoU.

3D boxes are gravity aligned: the footprint lives in the camera x-z plane and
the vertical extent along y. Footprint overlap is computed by convex polygon
clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box2D:
    left: float
    top: float
    width: float
    height: float

    @classmethod
    def from_ltrb(cls, l, t, r, b) -> Box2D:
        return cls(l, t, r - l, b - t)

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    def ltrb(self) -> tuple[float, float, float, float]:
        return self.left, self.top, self.right, self.bottom


@dataclass(frozen=True)
class Box3D:
    """Center in meters (camera frame), yaw about y, dims = (width, height, length)."""

    center: tuple[float, float, float]
    yaw: float
    dims: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def volume(self) -> float:
        w, h, l = self.dims
        return w * h * l

    def footprint(self) -> np.ndarray:
        """Counter-clockwise BEV corners as (x, z) rows."""
        w, _, l = self.dims
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        x = c * local[:, 0] + s * local[:, 1] + self.center[0]
        z = -s * local[:, 0] + c * local[:, 1] + self.center[2]
        return np.stack([x, z], axis=1)

    def y_range(self) -> tuple[float, float]:
        h = self.dims[1]
        return self.center[1] - h / 2, self.center[1] + h / 2


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.width * a.height + b.width * b.height - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: intersection of two counter-clockwise convex polygons."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            p_in = _cross(a, b, p) >= 0
            q_in = _cross(a, b, q) >= 0
            if p_in:
                out.append(p)
            if p_in != q_in:
                dp = _cross(a, b, p)
                dq = _cross(a, b, q)
                s = dp / (dp - dq)
                out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def _overlap(a: Box3D, b: Box3D) -> tuple[float, float]:
    """(intersection volume, union volume)."""
    inter_area = polygon_area(clip_convex(a.footprint(), b.footprint()))
    a0, a1 = a.y_range()
    b0, b1 = b.y_range()
    inter = max(0.0, inter_area) * max(0.0, min(a1, b1) - max(a0, b0))
    return inter, a.volume + b.volume - inter


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter, union = _overlap(a, b)
    return float(inter / union) if union > 0 else 0.0


def enclosing_volume(a: Box3D, b: Box3D) -> float:
    """Convex hull of both footprints times the span of both vertical extents."""
    hull = convex_hull(np.vstack([a.footprint(), b.footprint()]))
    a0, a1 = a.y_range()
    b0, b1 = b.y_range()
    return polygon_area(hull) * (max(a1, b1) - min(a0, b0))


def giou_3d(a: Box3D, b: Box3D) -> tuple[float, float]:
    """Generalized IoU in [-1, 1] and its [0, 1] rescaling (g + 1) / 2."""
    inter, union = _overlap(a, b)
    iou = inter / union if union > 0 else 0.0
    c = enclosing_volume(a, b)
    g = iou - (c - union) / c if c > 0 else iou
    return float(g), float((g + 1.0) / 2.0)


def giou_3d_normalized(a: Box3D, b: Box3D) -> float:
    return giou_3d(a, b)[1]
