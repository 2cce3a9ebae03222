"""Amodal 3D boxes from tracked points: BEV regression, joint refinement and temporal fusion.

Boxes are estimated in the object's reference frame (the camera frame at the
start of its trajectory) as a 4-DoF pose ``T_o`` plus fixed dimensions.
Object-frame half extents along (x, y, z) are (length, height, width) / 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, InsufficientGeometry
from .geometry import (
    CameraIntrinsics,
    Pose4DoF,
    RigidTransform,
    project_points,
    projection_jacobian,
    se3_log,
    wrap_angle,
    yaw_rotation,
    yaw_rotation_derivative,
)
from .metrics.boxes import Box3D, convex_hull

logger = logging.getLogger(__name__)

CAR_HEIGHT = 1.53
MIN_POINTS = 8
_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)


@dataclass(frozen=True)
class Detection3D:
    """Oriented box; ``dims`` = (width, height, length); ``cov`` is the 3x3 center covariance."""

    center: np.ndarray
    yaw: float
    dims: tuple[float, float, float]
    cov: np.ndarray = field(default_factory=lambda: np.eye(3))
    yaw_var: float = 1.0
    frame_id: int = -1
    track_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float).reshape(3, 3))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if min(self.dims) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.dims}")

    @property
    def pose(self) -> Pose4DoF:
        return Pose4DoF(self.center, self.yaw)

    @property
    def extents(self) -> np.ndarray:
        w, h, l = self.dims
        return np.array([l, h, w])

    def box(self) -> Box3D:
        return Box3D(tuple(self.center), self.yaw, self.dims)

    def transformed(self, T: RigidTransform) -> Detection3D:
        """Re-express in another frame (yaw taken from the composed rotation)."""
        M = T @ self.pose.to_transform()
        R = T.rotation
        p = Pose4DoF.from_transform(M)
        return replace(self, center=p.translation, yaw=p.yaw, cov=R @ self.cov @ R.T)


@dataclass
class RefinementConfig:
    w1: float = 5.0
    w2: float = 3.0
    w3: float = 1.0
    lam: float = 1.5
    huber_3d: float = 0.5
    iterations: int = 15
    lm_lambda: float = 1e-3


@dataclass
class OccupancyGrid:
    """Ground-plane (x, z) cell counts."""

    cell: float
    counts: dict[tuple[int, int], int]

    @classmethod
    def from_points(cls, xz: np.ndarray, cell: float = 0.15) -> OccupancyGrid:
        if cell <= 0:
            raise ValueError("cell size must be positive")
        keys, cnt = np.unique(np.floor(np.asarray(xz) / cell).astype(int), axis=0, return_counts=True)
        return cls(cell, {(int(a), int(b)): int(c) for (a, b), c in zip(keys, cnt)})

    def occupied(self, min_count: int = 1) -> np.ndarray:
        """Centers of cells holding at least ``min_count`` points, sorted."""
        keys = sorted(k for k, c in self.counts.items() if c >= min_count)
        return (np.array(keys, dtype=float).reshape(-1, 2) + 0.5) * self.cell

    def points_in_occupied(self, min_count: int = 1) -> int:
        return sum(c for c in self.counts.values() if c >= min_count)


def rectangle_candidates(hull: np.ndarray):
    """One enclosing rectangle per hull edge: (axis u, axis v, lo (2,), hi (2,))."""
    out = []
    n = len(hull)
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        norm = np.hypot(*e)
        if norm < 1e-12:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        proj = hull @ np.stack([u, v], axis=1)
        out.append((u, v, proj.min(axis=0), proj.max(axis=0)))
    return out


def boundary_objective(centers: np.ndarray, rect) -> float:
    """Sum of squared distances from points to the nearest rectangle side."""
    u, v, lo, hi = rect
    p = centers @ np.stack([u, v], axis=1)
    d = np.minimum(np.minimum(p[:, 0] - lo[0], hi[0] - p[:, 0]), np.minimum(p[:, 1] - lo[1], hi[1] - p[:, 1]))
    return float(np.sum(d * d))


def _enclosing(points_xz: np.ndarray, angle: float):
    u = np.array([np.cos(angle), np.sin(angle)])
    v = np.array([-u[1], u[0]])
    proj = points_xz @ np.stack([u, v], axis=1)
    return u, v, proj.min(axis=0), proj.max(axis=0)


def bev_candidates(points: np.ndarray, cell: float = 0.15, min_count: int = 1):
    """Occupied cell centers, hull-edge rectangles and their boundary objectives."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    grid = OccupancyGrid.from_points(points[:, [0, 2]], cell)
    if grid.points_in_occupied(min_count) < MIN_POINTS:
        raise InsufficientGeometry(f"{len(points)} points, need {MIN_POINTS} in occupied cells")
    centers = grid.occupied(min_count)
    hull = convex_hull(centers)
    if len(hull) < 3:
        raise InsufficientGeometry("occupied cells are collinear")
    rects = rectangle_candidates(hull)
    scores = np.array([boundary_objective(centers, r) for r in rects])
    keys = np.floor(points[:, [0, 2]] / cell).astype(int)
    keep = np.array([grid.counts[(a, b)] >= min_count for a, b in keys])
    return points[keep], centers, rects, scores


def regress_bev_box(points: np.ndarray, cell: float = 0.15, min_count: int = 1, height: float = CAR_HEIGHT,
                    dims_prior: tuple[float, float, float] | None = None, refine: bool = True,
                    trim: float = 0.01, margin: float = 0.0) -> Detection3D:
    """Initial box from reference-frame points via occupancy grid and hull-edge rectangles.

    The hull-edge winner's angle is then refined within one cell of slack on
    the raw points, since grid quantization snaps near-axis-aligned edges.
    Extents come from the raw points along the final axes, between the
    ``trim`` and ``1 - trim`` quantiles so that a few depth outliers do not
    inflate the box, and are widened by ``margin`` meters on every side to
    restore the border that point selection leaves along the silhouette.
    ``dims_prior`` is (h, w, l) and replaces the estimated dimensions.
    """
    kept, centers, rects, scores = bev_candidates(points, cell, min_count)
    u = rects[int(np.argmin(scores))][0]
    angle = float(np.arctan2(u[1], u[0]))
    xz = kept[:, [0, 2]]
    if refine:
        span = np.ptp(xz @ np.stack([u, [-u[1], u[0]]], axis=1), axis=0).max()
        delta = np.arctan2(2 * cell, max(span, cell))
        res = minimize_scalar(lambda a: boundary_objective(xz, _enclosing(xz, a)),
                              bounds=(angle - delta, angle + delta), method="bounded",
                              options={"xatol": 1e-5})
        if res.fun <= boundary_objective(xz, _enclosing(xz, angle)):
            angle = float(res.x)
    if not 0.0 <= trim < 0.5:
        raise DomainError("trim must lie in [0, 0.5)")
    if margin < 0:
        raise DomainError("margin must be non-negative")
    u, v, _, _ = _enclosing(xz, angle)
    proj = xz @ np.stack([u, v], axis=1)
    lo, hi = np.quantile(proj, trim, axis=0), np.quantile(proj, 1.0 - trim, axis=0)
    size = hi - lo + 2.0 * margin
    mid = 0.5 * (lo + hi)
    cx, cz = mid[0] * u + mid[1] * v
    if size[0] >= size[1]:
        axis, length, width = u, size[0], size[1]
    else:
        axis, length, width = v, size[1], size[0]
    yaw = np.arctan2(-axis[1], axis[0])
    h = height
    if dims_prior is not None:
        h, width, length = dims_prior
    y = float(np.median(np.asarray(points, dtype=float).reshape(-1, 3)[:, 1]))
    cov = np.diag([cell * cell, cell * cell, cell * cell])
    return Detection3D((cx, y, cz), yaw, (max(width, cell), h, max(length, cell)), cov, 0.1 ** 2)


def dynamic_weight(E33: float, n: int, lam: float = 1.5, w2: float = 3.0) -> float:
    """Weight that caps the 3D-3D term once its energy exceeds lam^2 n."""
    if n < 1:
        raise ValueError("residual count must be positive")
    cap = lam * lam * n
    if E33 <= cap:
        return w2
    return w2 * cap / E33


@dataclass
class PointSet:
    """Points of one keyframe: host-frame coordinates, std proxy and keyframe pose."""

    pose: RigidTransform  # keyframe camera -> reference
    points: np.ndarray
    sigma: np.ndarray


@dataclass
class BoxObservation:
    """Amodal 2D detection (l, t, r, b) seen from a keyframe with the given pose."""

    pose: RigidTransform
    box: tuple[float, float, float, float]


def _pose_parts(params: np.ndarray):
    return yaw_rotation(params[3]), yaw_rotation_derivative(params[3]), params[:3]


def residuals_3d3d(params: np.ndarray, sets: list[PointSet], dims, jacobian: bool = False):
    """Per-point excess vectors (N, 3) outside the box, and their (N, 3, 4) Jacobian."""
    w, h, l = dims
    half = 0.5 * np.array([l, h, w])
    R, dR, t = _pose_parts(params)
    Y = np.concatenate([s.pose.apply(s.points) for s in sets]) if sets else np.zeros((0, 3))
    sig = np.concatenate([s.sigma for s in sets]) if sets else np.zeros(0)
    q = (Y - t) @ R  # R^T (Y - t)
    excess = np.abs(q) - half
    out = excess > 0
    r = np.where(out, excess, 0.0) / sig[:, None]
    if not jacobian:
        return r, None
    J = np.zeros((len(q), 3, 4))
    s = np.sign(q) * out / sig[:, None]
    J[:, :, :3] = -s[:, :, None] * R.T[None]
    J[:, :, 3] = s * ((Y - t) @ dR)
    return r, J


def _sigmas(sets: list[PointSet]) -> np.ndarray:
    return np.concatenate([s.sigma for s in sets]) if sets else np.zeros(0)


def _huber_3d(r: np.ndarray, sigma: np.ndarray, gamma: float):
    """Huber of the metric excess norm divided by sigma^2: a threshold of gamma/sigma
    on the normalized residual. Returns per-point cost and IRLS weight."""
    a = np.linalg.norm(r, axis=1)
    thr = gamma / sigma
    inside = a <= thr
    cost = np.where(inside, 0.5 * a * a, thr * (a - 0.5 * thr))
    weight = np.where(inside, 1.0, thr / np.maximum(a, 1e-12))
    return cost, weight


def residual_3d3d(pose: Pose4DoF, sets: list[PointSet], dims, gamma: float = 0.5):
    """Robust point-in-box cost and the residual count."""
    r, _ = residuals_3d3d(pose.params(), sets, dims)
    if len(r) == 0:
        return 0.0, 0
    return float(_huber_3d(r, _sigmas(sets), gamma)[0].sum()), len(r)


def _box_params(box) -> np.ndarray:
    l, t, r, b = box
    return np.array([(l + r) / 2, (t + b) / 2, r - l, b - t])


def residuals_3d2d(params: np.ndarray, obs: list[BoxObservation], dims, K: CameraIntrinsics,
                   jacobian: bool = False, min_depth: float = 0.1):
    """Enclosing-box residuals (M, 4) as (center_u, center_v, width, height) minus the detection.

    Observations with a corner closer than ``min_depth`` are skipped; the
    returned mask tells which were used.
    """
    w, h, l = dims
    corners = _CORNER_SIGNS * 0.5 * np.array([l, h, w])
    R, dR, t = _pose_parts(params)
    res, jac, used = [], [], []
    for o in obs:
        Ti = o.pose.inverse()
        X = Ti.apply(corners @ R.T + t)
        if np.any(X[:, 2] <= min_depth):
            used.append(False)
            continue
        uv, _ = project_points(X, K)
        iu0, iu1 = np.argmin(uv[:, 0]), np.argmax(uv[:, 0])
        iv0, iv1 = np.argmin(uv[:, 1]), np.argmax(uv[:, 1])
        u0, u1, v0, v1 = uv[iu0, 0], uv[iu1, 0], uv[iv0, 1], uv[iv1, 1]
        phi = np.array([(u0 + u1) / 2, (v0 + v1) / 2, u1 - u0, v1 - v0])
        res.append(phi - _box_params(o.box))
        used.append(True)
        if jacobian:
            Jp = projection_jacobian(X, K)  # (8, 2, 3)
            dX = np.zeros((8, 3, 4))
            dX[:, :, :3] = Ti.rotation[None]
            dX[:, :, 3] = (corners @ dR.T) @ Ti.rotation.T
            duv = np.einsum("nij,njk->nik", Jp, dX)  # (8, 2, 4)
            du0, du1 = duv[iu0, 0], duv[iu1, 0]
            dv0, dv1 = duv[iv0, 1], duv[iv1, 1]
            jac.append(np.stack([(du0 + du1) / 2, (dv0 + dv1) / 2, du1 - du0, dv1 - dv0]))
    r = np.array(res).reshape(-1, 4)
    J = np.array(jac).reshape(-1, 4, 4) if jacobian else None
    return r, J, np.array(used, dtype=bool)


def residual_3d2d(pose: Pose4DoF, obs: list[BoxObservation], dims, K: CameraIntrinsics):
    """Plain squared-norm cost and the per-observation skip flags (True = skipped)."""
    r, _, used = residuals_3d2d(pose.params(), obs, dims, K)
    return float(np.sum(r * r)), ~used


def _reg_vector(params: np.ndarray, prior: Pose4DoF) -> np.ndarray:
    T = Pose4DoF.from_params(params).to_transform()
    return se3_log(T.inverse() @ prior.to_transform())


def residual_reg(pose: Pose4DoF, prior: Pose4DoF | None) -> float:
    if prior is None:
        return 0.0
    return float(np.linalg.norm(_reg_vector(pose.params(), prior)))


def _reg_jacobian(params: np.ndarray, prior: Pose4DoF, step: float = 1e-7) -> np.ndarray:
    J = np.zeros((6, 4))
    for k in range(4):
        d = np.zeros(4)
        d[k] = step
        J[:, k] = (_reg_vector(params + d, prior) - _reg_vector(params - d, prior)) / (2 * step)
    return J


@dataclass
class RefinementResult:
    detection: Detection3D
    history: list[float]
    iterations: int
    singular: bool = False


def _objective_terms(params, sets, obs, prior, dims, K, cfg: RefinementConfig, jacobian: bool):
    """Costs, gradient and Gauss-Newton Hessian of each term (weights not applied)."""
    r32, J32, _ = residuals_3d2d(params, obs, dims, K, jacobian)
    r33, J33 = residuals_3d3d(params, sets, dims, jacobian)
    c33, w33 = _huber_3d(r33, _sigmas(sets), cfg.huber_3d)
    E32 = float(np.sum(r32 * r32))
    E33 = float(np.sum(c33))
    v = _reg_vector(params, prior) if prior is not None else None
    Ereg = float(np.linalg.norm(v)) if v is not None else 0.0
    if not jacobian:
        return E32, E33, Ereg, len(r33), None
    g32 = 2 * np.einsum("mk,mkd->d", r32, J32) if len(r32) else np.zeros(4)
    H32 = 2 * np.einsum("mkd,mke->de", J32, J32) if len(r32) else np.zeros((4, 4))
    if len(r33):
        g33 = np.einsum("n,nk,nkd->d", w33, r33, J33)
        H33 = np.einsum("n,nkd,nke->de", w33, J33, J33)
    else:
        g33, H33 = np.zeros(4), np.zeros((4, 4))
    if v is not None:
        Jv = _reg_jacobian(params, prior)
        inv = 1.0 / max(Ereg, 1e-6)
        greg, Hreg = inv * Jv.T @ v, inv * Jv.T @ Jv
    else:
        greg, Hreg = np.zeros(4), np.zeros((4, 4))
    return E32, E33, Ereg, len(r33), (g32, H32, g33, H33, greg, Hreg)


def refine_box(initial: Detection3D, sets: list[PointSet], obs: list[BoxObservation], prior: Pose4DoF | None,
               K: CameraIntrinsics, cfg: RefinementConfig | None = None) -> RefinementResult:
    """Levenberg-Marquardt over (x, y, z, yaw) of the box with frozen dimensions.

    Minimizes ``w1 E_3D2D + W E_3D3D + w3 E_reg`` where W follows
    :func:`dynamic_weight` and is held fixed within each iteration. Center
    covariance and yaw variance come from the inverse Gauss-Newton Hessian.
    """
    cfg = cfg or RefinementConfig()
    dims = initial.dims
    x = initial.pose.params()
    history = []
    lam = cfg.lm_lambda
    H = None
    it = 0

    def weight(E33, n):
        return dynamic_weight(E33, n, cfg.lam, cfg.w2) if n else 0.0

    for it in range(1, cfg.iterations + 1):
        E32, E33, Ereg, n, parts = _objective_terms(x, sets, obs, prior, dims, K, cfg, True)
        W = weight(E33, n)
        F = cfg.w1 * E32 + W * E33 + cfg.w3 * Ereg
        if not history:
            history.append(F)
        g32, H32, g33, H33, greg, Hreg = parts
        g = cfg.w1 * g32 + W * g33 + cfg.w3 * greg
        H = cfg.w1 * H32 + W * H33 + cfg.w3 * Hreg
        accepted = False
        for _ in range(10):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            xn = x + step
            xn[3] = wrap_angle(xn[3])
            e32, e33, ereg, _, _ = _objective_terms(xn, sets, obs, prior, dims, K, cfg, False)
            Fn = cfg.w1 * e32 + W * e33 + cfg.w3 * ereg
            if np.isfinite(Fn) and Fn < F:
                x = xn
                history.append(Fn)
                lam = max(lam * 0.5, 1e-9)
                accepted = True
                break
            lam *= 10
        if not accepted or np.linalg.norm(step) < 1e-9:
            break

    E32, E33, Ereg, n, parts = _objective_terms(x, sets, obs, prior, dims, K, cfg, True)
    W = weight(E33, n)
    g32, H32, g33, H33, greg, Hreg = parts
    H = cfg.w1 * H32 + W * H33 + cfg.w3 * Hreg
    singular = H is None or np.linalg.cond(H) > 1e12
    if singular:
        logger.debug("box refinement Hessian singular; keeping the initial estimate")
        return RefinementResult(replace(initial, cov=initial.cov * 10, yaw_var=initial.yaw_var * 10),
                                history, it, True)
    C = np.linalg.inv(H)
    det = replace(initial, center=x[:3], yaw=x[3], cov=np.diag(np.diag(C)[:3]), yaw_var=float(C[3, 3]))
    return RefinementResult(det, history, it)


def fuse_proposals(prior: Detection3D, meas: Detection3D) -> Detection3D:
    """Covariance-weighted average of two box estimates; yaw fused on the shortest arc."""
    Sp, Sm = prior.cov, meas.cov
    S = Sp + Sm
    c = np.linalg.solve(S, Sp @ meas.center + Sm @ prior.center)
    cov = (np.eye(3) - Sp @ np.linalg.inv(S)) @ Sp
    yp, ym = prior.yaw, meas.yaw
    if ym - yp > np.pi:
        ym -= 2 * np.pi
    elif ym - yp < -np.pi:
        ym += 2 * np.pi
    vp, vm = prior.yaw_var, meas.yaw_var
    yaw = (vp * ym + vm * yp) / (vp + vm)
    yaw_var = (1.0 - vp / (vp + vm)) * vp
    return replace(prior, center=c, cov=cov, yaw=wrap_angle(yaw), yaw_var=yaw_var,
                   frame_id=meas.frame_id)
