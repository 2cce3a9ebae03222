"""Two-frame direct image alignment of a single object.

The estimated pose maps points of the current frame ``t`` into the camera
frame of ``t-1``; its inverse is the object's camera-frame motion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .errors import Diverged, InsufficientHistory, NotEnoughData, TrackLost
from .geometry import (
    RigidTransform,
    backproject,
    backproject_points,
    huber,
    project_points,
    projection_jacobian,
    se3_exp,
    se3_generators_at,
)
from .imaging import Frame, InstanceMask, ObjectPyramid, sample_bilinear, to_gray, valid_depth

logger = logging.getLogger(__name__)

_RIM = np.ones((3, 3), dtype=bool)


@dataclass
class AlignmentConfig:
    max_iterations: int = 20
    lm_lambda: float = 1e-4
    lm_up: float = 10.0
    lm_down: float = 0.5
    lm_retries: int = 8
    huber_photo: float = 9.0
    min_pixels: int = 50
    min_inlier_fraction: float = 0.6
    step_threshold: float = 1e-5
    cost_tolerance: float = 3e-4  # stop a level when an accepted step gains less than this fraction
    channels: str = "color"


@dataclass
class AlignmentResult:
    pose: RigidTransform
    cost: float
    inlier_fraction: float
    converged: bool
    iterations: list[int] = field(default_factory=list)  # per level, coarsest first
    cost_history: list[list[float]] = field(default_factory=list)  # accepted costs per level


def photometric_residuals(points: np.ndarray, ref_values: np.ndarray, target: np.ndarray,
                          T: RigidTransform, K, jacobian: bool = True):
    """Residuals ``target(pi(T X)) - ref`` and their Jacobian w.r.t. a left twist on T.

    ``points`` (N, 3) are current-frame 3D points, ``ref_values`` (N, C) their
    intensities, ``target`` the (H, W, C) previous image. Returns ``(r, J, ok)``
    with r (N, C), J (N, C, 6) and ``ok`` flagging residuals that could be sampled.
    """
    Y = T.apply(points)
    uv, front = project_points(Y, K)
    vals, grads = sample_bilinear(target, uv)
    r = vals - ref_values
    ok = front & np.all(np.isfinite(r), axis=1)
    if not jacobian:
        return r, None, ok
    Jproj = projection_jacobian(np.where(front[:, None], Y, 1.0), K)
    Jpt = Jproj @ se3_generators_at(Y)  # (N, 2, 6)
    J = np.einsum("ncd,ndk->nck", np.nan_to_num(grads), Jpt)
    return r, J, ok


class _LevelProblem:
    def __init__(self, level, target: np.ndarray, gamma: float):
        # rim pixels mix object and background intensity; drop them unless the object is tiny
        inner = ndimage.binary_erosion(level.mask, _RIM)
        mask = (inner if inner.sum() >= 0.25 * level.mask.sum() else level.mask) & valid_depth(level.depth)
        v, u = np.nonzero(mask)
        self.n = len(u)
        uv = np.stack([u, v], axis=1).astype(float)
        self.points = backproject_points(uv, level.depth[v, u], level.K)
        self.ref = level.image[v, u].reshape(self.n, -1)
        self.target = target
        self.K = level.K
        self.gamma = gamma

    def evaluate(self, T, jacobian=False):
        r, J, ok = photometric_residuals(self.points, self.ref, self.target, T, self.K, jacobian)
        rv = np.where(ok[:, None], r, 0.0)
        cost, w = huber(rv, self.gamma)
        n_ok = int(ok.sum())
        mean_cost = float(cost[ok].sum() / n_ok) if n_ok else np.inf
        inliers = float((np.abs(rv) <= self.gamma)[ok].sum() / max(1, self.n * rv.shape[1]))
        return mean_cost, rv, J, w * ok[:, None], inliers


def _target_image(prev: Frame, level: int, channels: int) -> np.ndarray:
    img = prev.image_level(level)
    if channels == 1 and img.shape[2] != 1:
        img = to_gray(img)[..., None]
    return img


def align(prev: Frame, cur: Frame, obj: ObjectPyramid, init: RigidTransform,
          cfg: AlignmentConfig | None = None) -> AlignmentResult:
    """Coarse-to-fine Levenberg-Marquardt on the robust photometric error.

    ``obj`` is the pyramid of the object in ``cur``; ``prev`` supplies the target
    images. Raises NotEnoughData when too few object pixels carry depth and
    Diverged when the cost becomes non-finite.
    """
    cfg = cfg or AlignmentConfig()
    finest = obj.levels[0]
    n_valid = int((finest.mask & valid_depth(finest.depth)).sum())
    if n_valid < cfg.min_pixels:
        raise NotEnoughData(f"only {n_valid} object pixels with valid depth")
    channels = finest.image.shape[2]

    T = init
    iterations: list[int] = []
    history: list[list[float]] = []
    degenerate = False
    budget_hit = False
    cost = inliers = np.nan
    for lv in reversed(range(obj.n_levels)):
        prob = _LevelProblem(obj.levels[lv], _target_image(prev, lv, channels), cfg.huber_photo)
        if prob.n < 6:
            iterations.append(0)
            history.append([])
            continue
        lam = cfg.lm_lambda
        cost, r, J, w, inliers = prob.evaluate(T, jacobian=True)
        if not np.isfinite(cost):
            raise Diverged(f"no residual could be evaluated at level {lv}")
        history.append([cost])
        it = 0
        converged_level = False
        while it < cfg.max_iterations:
            it += 1
            Jf = J.reshape(-1, 6)
            wf = w.reshape(-1)
            H = (Jf * wf[:, None]).T @ Jf / prob.n
            g = (Jf * wf[:, None]).T @ r.reshape(-1) / prob.n
            if lv == 0:
                eig = np.linalg.eigvalsh(H)
                degenerate = eig[-1] < 1e-6 or eig[0] < 1e-12 * eig[-1]
            if not np.any(H):
                converged_level = True
                break
            accepted = False
            previous = cost
            for _ in range(cfg.lm_retries):
                A = H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6)
                delta = np.linalg.solve(A, -g)
                T_new = se3_exp(delta) @ T
                new_cost, r_new, J_new, w_new, inl_new = prob.evaluate(T_new, jacobian=True)
                if np.isfinite(new_cost) and new_cost < cost:
                    T, cost, r, J, w, inliers = T_new, new_cost, r_new, J_new, w_new, inl_new
                    history[-1].append(cost)
                    lam *= cfg.lm_down
                    accepted = True
                    break
                lam *= cfg.lm_up
            if (not accepted or np.linalg.norm(delta) < cfg.step_threshold
                    or previous - cost < cfg.cost_tolerance * previous):
                converged_level = True
                break
        iterations.append(it)
        if lv == 0 and not converged_level:
            budget_hit = True

    if not np.isfinite(cost):
        raise Diverged("alignment cost is not finite")
    converged = bool(inliers >= cfg.min_inlier_fraction and not degenerate and not budget_hit)
    return AlignmentResult(T, float(cost), float(inliers), converged, iterations, history)


def coarse_cost(prev: Frame, obj: ObjectPyramid, T: RigidTransform, cfg: AlignmentConfig) -> float:
    lv = obj.n_levels - 1
    level = obj.levels[lv]
    prob = _LevelProblem(level, _target_image(prev, lv, level.image.shape[2]), cfg.huber_photo)
    if prob.n == 0:
        return np.inf
    return prob.evaluate(T)[0]


def propose_candidates(prev: Frame, obj: ObjectPyramid, prev_mask: InstanceMask | None,
                       cfg: AlignmentConfig | None = None) -> list[RigidTransform]:
    """Initial poses for a track without motion history, best coarse cost first.

    With a previous mask the mask-centroid displacement is lifted to 3D at the
    object's median depth; that translation and its x0.5 / x2 scalings join the
    identity.
    """
    cfg = cfg or AlignmentConfig()
    candidates = [RigidTransform.identity()]
    finest = obj.levels[0]
    if prev_mask is not None and not prev_mask.empty:
        d = finest.depth[finest.mask & valid_depth(finest.depth)]
        if d.size:
            z = float(np.median(d))
            cur_c = InstanceMask(finest.mask).centroid
            shift = backproject(prev_mask.centroid, z, finest.K) - backproject(cur_c, z, finest.K)
            candidates += [RigidTransform.from_translation(s * shift) for s in (1.0, 0.5, 2.0)]
    if len(candidates) == 1:
        return candidates
    costs = [coarse_cost(prev, obj, T, cfg) for T in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (costs[i], i))
    return [candidates[i] for i in order]


def constant_motion_init(history: list[RigidTransform | None]) -> RigidTransform:
    """Last frame-to-frame pose of a track, reused as the next initial guess."""
    if not history or history[-1] is None:
        raise InsufficientHistory("track has no consecutive 3D poses")
    return history[-1]


def _uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(to_gray(img)), 0, 255).astype(np.uint8)


def _spread_gradient_points(gray: np.ndarray, mask: InstanceMask, n: int, floor: float) -> np.ndarray:
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    mag = np.where(mask.pixels & (mag >= floor), mag, 0.0)
    u0, v0, u1, v1 = mask.bbox
    side = max(1, int(np.sqrt(n)))
    us = np.linspace(u0, u1 + 1, side + 1).astype(int)
    vs = np.linspace(v0, v1 + 1, side + 1).astype(int)
    pts = []
    for a in range(side):
        for b in range(side):
            cell = mag[vs[b]:vs[b + 1], us[a]:us[a + 1]]
            if cell.size == 0 or cell.max() <= 0:
                continue
            i, j = np.unravel_index(np.argmax(cell), cell.shape)
            pts.append((us[a] + j, vs[b] + i))
    return np.array(pts, dtype=np.float32).reshape(-1, 1, 2)


def fallback_track_2d(prev: np.ndarray, cur: np.ndarray, mask: InstanceMask,
                      max_points: int = 100, min_points: int = 20, fb_threshold: float = 1.0,
                      gradient_floor: float = 8.0) -> InstanceMask:
    """Move ``mask`` (defined on ``prev``) to ``cur`` by the median sparse LK flow."""
    if mask.empty:
        raise ValueError("empty mask")
    a, b = _uint8(prev), _uint8(cur)
    p0 = _spread_gradient_points(a.astype(float), mask, max_points, gradient_floor)
    if len(p0) < min_points:
        raise TrackLost(f"only {len(p0)} trackable points in mask")
    lk = dict(winSize=(15, 15), maxLevel=3,
              criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01))
    p1, st1, _ = cv2.calcOpticalFlowPyrLK(a, b, p0, None, **lk)
    p0b, st2, _ = cv2.calcOpticalFlowPyrLK(b, a, p1, None, **lk)
    fb = np.linalg.norm((p0 - p0b).reshape(-1, 2), axis=1)
    good = (st1.ravel() == 1) & (st2.ravel() == 1) & (fb < fb_threshold)
    if good.sum() < min_points:
        raise TrackLost(f"only {int(good.sum())} consistent flow vectors")
    flow = np.median((p1 - p0).reshape(-1, 2)[good], axis=0)
    return mask.shifted(float(flow[0]), float(flow[1]))
