"""Image, depth and mask containers; bilinear sampling; per-object pyramids."""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .errors import NotEnoughData
from .geometry import CameraIntrinsics, RigidTransform, backproject_points, project_points

_GRAD_STEP = 1e-3
_CLOSING = np.ones((3, 3), dtype=bool)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[..., 0]
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def valid_depth(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


class InstanceMask:
    """Pixel set of one object instance, stored as a boolean image."""

    def __init__(self, pixels: np.ndarray):
        self.pixels = np.asarray(pixels, dtype=bool)
        self.pixels.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @cached_property
    def area(self) -> int:
        return int(self.pixels.sum())

    @property
    def empty(self) -> bool:
        return self.area == 0

    @cached_property
    def bbox(self) -> tuple[int, int, int, int] | None:
        """Inclusive (u0, v0, u1, v1) bounding rectangle, or None when empty."""
        if self.empty:
            return None
        rows = np.flatnonzero(self.pixels.any(axis=1))
        cols = np.flatnonzero(self.pixels.any(axis=0))
        return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])

    @property
    def bbox_size(self) -> tuple[int, int]:
        u0, v0, u1, v1 = self.bbox
        return u1 - u0 + 1, v1 - v0 + 1

    @cached_property
    def centroid(self) -> np.ndarray:
        v, u = np.nonzero(self.pixels)
        return np.array([u.mean(), v.mean()])

    def coords(self) -> np.ndarray:
        """(N, 2) integer (u, v) coordinates of mask pixels."""
        v, u = np.nonzero(self.pixels)
        return np.stack([u, v], axis=1)

    def shifted(self, du: float, dv: float) -> InstanceMask:
        out = np.zeros_like(self.pixels)
        uv = np.rint(self.coords() + [du, dv]).astype(int)
        h, w = self.shape
        ok = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
        out[uv[ok, 1], uv[ok, 0]] = True
        return InstanceMask(out)

    def __repr__(self):
        return f"InstanceMask(area={self.area}, bbox={self.bbox})"


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    union = np.logical_or(a.pixels, b.pixels).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a.pixels, b.pixels).sum() / union)


def downsample_image(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """2x2 median over valid pixels; blocks without valid depth become 0."""
    h, w = depth.shape[0] // 2 * 2, depth.shape[1] // 2 * 2
    d = np.where(valid_depth(depth[:h, :w]), depth[:h, :w], np.nan)
    blocks = d.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(blocks, axis=2)
    return np.nan_to_num(med, nan=0.0)


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape[0] // 2 * 2, mask.shape[1] // 2 * 2
    m = mask[:h, :w]
    return m[0::2, 0::2] | m[1::2, 0::2] | m[0::2, 1::2] | m[1::2, 1::2]


@dataclass
class Frame:
    """One time step: image (H, W, C) in [0, 255], depth in meters (0 = invalid),
    instance masks and amodal 2D boxes ``(left, top, right, bottom)``."""

    frame_id: int
    image: np.ndarray
    depth: np.ndarray
    masks: list[InstanceMask] = field(default_factory=list)
    detections: list[tuple[float, float, float, float]] = field(default_factory=list)
    dims_priors: list[tuple[float, float, float] | None] = field(default_factory=list)
    _levels: list[np.ndarray] = field(default_factory=list, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim == 2:
            img = img[..., None]
        self.image = img
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.shape != img.shape[:2]:
            raise ValueError(f"frame {self.frame_id}: depth shape {self.depth.shape} != image shape {img.shape[:2]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @cached_property
    def gray(self) -> np.ndarray:
        return to_gray(self.image)

    def image_level(self, level: int) -> np.ndarray:
        """Full-frame image downsampled ``level`` times (cached; safe across worker threads)."""
        with self._lock:
            if not self._levels:
                self._levels.append(self.image)
            while len(self._levels) <= level:
                self._levels.append(downsample_image(self._levels[-1]))
            return self._levels[level]


@dataclass
class PyramidLevel:
    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    K: CameraIntrinsics
    scale: float


@dataclass
class ObjectPyramid:
    """Per-object pyramid; depth is restricted to the object mask."""

    levels: list[PyramidLevel]

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def pyramid_levels(mask: InstanceMask, s_min: float) -> int:
    bw, bh = mask.bbox_size
    return max(1, 1 + math.floor(math.log2(min(bw, bh) / s_min)))


def build_pyramid(frame: Frame, mask: InstanceMask, K: CameraIntrinsics, s_min: float = 16.0,
                  channels: str = "color") -> ObjectPyramid:
    if mask.empty:
        raise ValueError("cannot build a pyramid for an empty mask")
    n = pyramid_levels(mask, s_min)
    depth = np.where(mask.pixels, frame.depth, 0.0)
    m = mask.pixels
    levels = []
    for lv in range(n):
        img = frame.image_level(lv)
        if channels == "gray":
            img = to_gray(img)[..., None]
        levels.append(PyramidLevel(img, depth, m, K.at_level(lv), 2.0 ** lv))
        depth = downsample_depth(depth)
        m = downsample_mask(m)
    return ObjectPyramid(levels)


def _interp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    a = (u - u0)
    b = (v - v0)
    if img.ndim == 3:
        a = a[:, None]
        b = b[:, None]
    return ((1 - a) * (1 - b) * img[v0, u0] + a * (1 - b) * img[v0, u0 + 1]
            + (1 - a) * b * img[v0 + 1, u0] + a * b * img[v0 + 1, u0 + 1])


def sample_bilinear(img: np.ndarray, uv: np.ndarray):
    """Bilinear intensity and image gradient at subpixel locations.

    ``img`` is (H, W) or (H, W, C); ``uv`` is (N, 2). Returns ``(values, grad)``
    with shapes (N[, C]) and (N[, C], 2). The gradient is the central difference
    of interpolated values with a 1e-3 px step. Locations closer than 1 px to
    the border get NaN values and gradients.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    h, w = img.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    ok = (u >= 1.0) & (u <= w - 2.0) & (v >= 1.0) & (v <= h - 2.0)
    uc = np.where(ok, u, 1.0)
    vc = np.where(ok, v, 1.0)
    val = _interp(img, uc, vc)
    du = (_interp(img, uc + _GRAD_STEP, vc) - _interp(img, uc - _GRAD_STEP, vc)) / (2 * _GRAD_STEP)
    dv = (_interp(img, uc, vc + _GRAD_STEP) - _interp(img, uc, vc - _GRAD_STEP)) / (2 * _GRAD_STEP)
    grad = np.stack([du, dv], axis=-1)
    bad = ~ok
    if bad.any():
        val = val.astype(float, copy=True)
        val[bad] = np.nan
        grad[bad] = np.nan
    return val, grad


def warp_mask(mask: InstanceMask, depth: np.ndarray, T: RigidTransform, K: CameraIntrinsics) -> InstanceMask:
    """Move mask pixels through 3D by ``T`` and splat them into a new mask."""
    if not T.is_finite():
        raise ValueError("non-finite transform")
    uv = mask.coords()
    d = depth[uv[:, 1], uv[:, 0]]
    ok = valid_depth(d)
    if not ok.any():
        raise NotEnoughData("mask has no pixel with valid depth")
    P = T.apply(backproject_points(uv[ok].astype(float), d[ok], K))
    proj, front = project_points(P, K)
    if not front.any():
        raise NotEnoughData("warped object lies behind the camera")
    px = np.rint(proj[front]).astype(int)
    h, w = mask.shape
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    out = np.zeros((h, w), dtype=bool)
    out[px[inside, 1], px[inside, 0]] = True
    if out.any():
        # close splatting holes on a padded copy so the image border cannot grow the mask
        r = max(_CLOSING.shape) // 2
        padded = np.pad(out, r)
        out = ndimage.binary_erosion(ndimage.binary_dilation(padded, _CLOSING), _CLOSING)[r:-r, r:-r]
    return InstanceMask(out)
