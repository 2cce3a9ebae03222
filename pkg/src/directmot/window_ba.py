"""Keyframe sliding window and joint photometric refinement of poses and inverse depths.

Keyframe poses map keyframe camera coordinates into the object's reference
frame (the camera frame at the origin of the trajectory), so the relative
transform from keyframe i to keyframe j is ``T_j^-1 T_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NotEnoughData
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    huber,
    project_points,
    projection_jacobian,
    se3_exp,
    se3_generators_at,
)
from .imaging import InstanceMask, sample_bilinear, valid_depth

logger = logging.getLogger(__name__)

PATTERN = np.array([(0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1)], dtype=float)
_PATTERN_RADIUS = 2


@dataclass
class BAConfig:
    capacity: int = 6
    keyframe_threshold: float = 0.5
    points_per_keyframe: int = 300
    iterations: int = 10
    huber_photo: float = 9.0
    gradient_floor: float = 8.0
    lm_lambda: float = 1e-4
    depth_prior_weight: float = 1.0
    depth_prior_std: float = 3e-4  # inverse depth (1/m); about 3 cm at 10 m
    sigma_depth_coeff: float = 0.01
    outlier_factor: float = 2.0
    min_points: int = 10


@dataclass
class HostPoint:
    host: int
    uv: tuple[int, int]
    inv_depth: float
    sigma: float
    active: bool = True


@dataclass
class Keyframe:
    frame_id: int
    image: np.ndarray  # grayscale, full resolution
    mask: InstanceMask
    pose: RigidTransform
    detection: tuple[float, float, float, float] | None = None
    uv: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    inv_depth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inv_depth_prior: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    patch: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))
    depth_ratio: np.ndarray = field(default_factory=lambda: np.ones((0, 8)))

    def set_points(self, points: list[HostPoint], depth: np.ndarray | None = None):
        """Attach host points; with a depth map, each pattern pixel keeps its depth
        relative to the center pixel so slanted surfaces warp correctly."""
        n = len(points)
        self.uv = np.array([p.uv for p in points], dtype=float).reshape(n, 2)
        self.inv_depth = np.array([p.inv_depth for p in points], dtype=float)
        self.inv_depth_prior = self.inv_depth.copy()
        self.sigma = np.array([p.sigma for p in points], dtype=float)
        self.active = np.array([p.active for p in points], dtype=bool)
        if n:
            pix = (self.uv[:, None, :] + PATTERN[None]).astype(int)
            self.patch = self.image[pix[..., 1], pix[..., 0]]
            if depth is not None:
                z = depth[pix[..., 1], pix[..., 0]]
                self.depth_ratio = np.where(valid_depth(z), z / z[:, :1], 1.0)
            else:
                self.depth_ratio = np.ones((n, 8))
        else:
            self.patch = np.zeros((0, 8))
            self.depth_ratio = np.ones((0, 8))

    def host_points(self) -> list[HostPoint]:
        return [HostPoint(self.frame_id, (int(u), int(v)), float(r), float(s), bool(a))
                for (u, v), r, s, a in zip(self.uv, self.inv_depth, self.sigma, self.active)]

    def points_host_frame(self, K: CameraIntrinsics) -> np.ndarray:
        return _rays(self.uv, K) / self.inv_depth[:, None]


@dataclass
class SlidingWindow:
    K: CameraIntrinsics
    cfg: BAConfig = field(default_factory=BAConfig)
    keyframes: list[Keyframe] = field(default_factory=list)
    low_confidence: bool = False

    def __len__(self) -> int:
        return len(self.keyframes)

    def add(self, kf: Keyframe):
        self.keyframes.append(kf)

    def observation_counts(self) -> list[np.ndarray]:
        """Number of keyframes observing each point, host included."""
        member = observations(self)
        return [1 + m.sum(axis=1) for m in member]

    def visible_points(self, min_observations: int = 2):
        """Active points seen by at least ``min_observations`` keyframes.

        Returns a list of (keyframe, host-frame points (N, 3), sigma (N,)).
        """
        out = []
        for kf, cnt in zip(self.keyframes, self.observation_counts()):
            sel = kf.active & (cnt >= min_observations)
            out.append((kf, kf.points_host_frame(self.K)[sel], kf.sigma[sel]))
        return out


def _rays(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    return np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy, np.ones(uv.shape[:-1])], axis=-1)


def should_create_keyframe(n_keyframes: int, accumulated_translation: float, threshold: float = 0.5) -> bool:
    """A keyframe is due when none exists yet or the object moved ``threshold`` meters since the last one."""
    return n_keyframes == 0 or accumulated_translation >= threshold


def select_points(image: np.ndarray, depth: np.ndarray, mask: InstanceMask, K: CameraIntrinsics,
                  budget: int = 300, gradient_floor: float = 8.0, frame_id: int = 0,
                  sigma_depth_coeff: float = 0.01, max_depth_step: float = 0.05) -> list[HostPoint]:
    """Pick the strongest-gradient pixel in each cell of a grid over the mask box.

    Candidates must carry valid depth and have the whole residual pattern
    inside the mask and the image; patches spanning a relative depth step
    above ``max_depth_step`` are skipped.
    """
    if mask.empty:
        raise ValueError("empty mask")
    h, w = image.shape
    gy, gx = np.gradient(image.astype(float))
    mag = np.hypot(gx, gy)
    ok = ndimage.binary_erosion(mask.pixels, np.ones((5, 5), bool)) & valid_depth(depth)
    ok[:_PATTERN_RADIUS + 1] = ok[-_PATTERN_RADIUS - 1:] = False
    ok[:, :_PATTERN_RADIUS + 1] = ok[:, -_PATTERN_RADIUS - 1:] = False
    d = np.where(valid_depth(depth), depth, np.nan)
    with np.errstate(invalid="ignore"):
        lo = ndimage.minimum_filter(np.nan_to_num(d, nan=np.inf), size=5)
        hi = ndimage.maximum_filter(np.nan_to_num(d, nan=-np.inf), size=5)
        ok &= (hi - lo) <= max_depth_step * np.nan_to_num(d, nan=np.inf)
    score = np.where(ok & (mag > gradient_floor), mag, 0.0)

    u0, v0, u1, v1 = mask.bbox
    side = max(1, int(round(np.sqrt(budget))))
    us = np.linspace(u0, u1 + 1, side + 1).round().astype(int)
    vs = np.linspace(v0, v1 + 1, side + 1).round().astype(int)
    points = []
    for b in range(side):
        for a in range(side):
            cell = score[vs[b]:vs[b + 1], us[a]:us[a + 1]]
            if cell.size == 0 or cell.max() <= 0:
                continue
            i, j = np.unravel_index(np.argmax(cell), cell.shape)
            u, v = us[a] + j, vs[b] + i
            z = float(depth[v, u])
            points.append(HostPoint(frame_id, (int(u), int(v)), 1.0 / z, sigma_depth_coeff * z * z))
            if len(points) >= budget:
                return points
    return points


def pair_residuals(patch: np.ndarray, uv: np.ndarray, inv_depth: np.ndarray, T_host: RigidTransform,
                   T_target: RigidTransform, target: np.ndarray, K: CameraIntrinsics, jacobian: bool = True,
                   depth_ratio: np.ndarray | None = None):
    """Locally scaled patch residuals of host points observed in a target keyframe.

    Returns ``(r, J_host, J_target, J_rho, ok)``: residuals (M, 8), Jacobians
    w.r.t. left twists on the host and target poses (M, 8, 6), w.r.t. inverse
    depth (M, 8), and a validity flag per point. ``depth_ratio`` (M, 8) scales
    each pattern pixel's depth relative to the center (ones by default).
    """
    m = len(uv)
    rays = _rays(uv[:, None, :] + PATTERN[None], K)  # (M, 8, 3)
    if depth_ratio is not None:
        rays = rays * depth_ratio[..., None]
    X = rays / inv_depth[:, None, None]
    Y = T_host.apply(X.reshape(-1, 3))  # reference frame
    Tt_inv = T_target.inverse()
    Xj = Tt_inv.apply(Y)
    puv, front = project_points(Xj, K)
    vals, grads = sample_bilinear(target, puv)
    vals = vals.reshape(m, 8)
    sum_host = patch.sum(axis=1)
    ok = front.reshape(m, 8).all(axis=1) & np.isfinite(vals).all(axis=1) & (np.abs(sum_host) >= 1e-6)
    vals = np.where(ok[:, None], vals, 0.0)
    hs = np.where(ok, sum_host, 1.0)
    scale = vals.sum(axis=1) / hs
    r = vals - scale[:, None] * patch
    if not jacobian:
        return r, None, None, None, ok

    g = np.nan_to_num(grads).reshape(-1, 1, 2)
    Jpi = projection_jacobian(np.where(front[:, None], Xj, 1.0), K)
    dI_dXj = (g @ Jpi)[:, 0, :]  # (M*8, 3)
    Rt = Tt_inv.rotation
    G = se3_generators_at(Y)  # d(ref point)/d(left twist)
    dI_dref = dI_dXj @ Rt  # (M*8, 3)
    dI_host = np.einsum("nd,ndk->nk", dI_dref, G).reshape(m, 8, 6)
    dI_target = -dI_host
    dX_drho = -(rays / (inv_depth[:, None, None] ** 2)).reshape(-1, 3) @ T_host.rotation.T
    dI_rho = np.einsum("nd,nd->n", dI_dref, dX_drho).reshape(m, 8)

    coef = (patch / hs[:, None])  # (M, 8)

    def lssd(dI):
        s = dI.sum(axis=1, keepdims=True)
        return dI - coef.reshape(coef.shape + (1,) * (dI.ndim - 2)) * s

    return r, lssd(dI_host), lssd(dI_target), lssd(dI_rho[..., None])[..., 0], ok


def observations(window: SlidingWindow) -> list[np.ndarray]:
    """Co-observation sets: bool (N_i, n_kf) per host keyframe; diagonal excluded.

    A point is observed by keyframe j when its host pixel reprojects with
    positive depth inside j's mask.
    """
    kfs = window.keyframes
    out = []
    for i, kf in enumerate(kfs):
        member = np.zeros((len(kf.uv), len(kfs)), dtype=bool)
        if len(kf.uv):
            Y = kf.pose.apply(kf.points_host_frame(window.K))
            for j, other in enumerate(kfs):
                if j == i:
                    continue
                uv, front = project_points(other.pose.inverse().apply(Y), window.K)
                px = np.rint(uv).astype(int)
                h, w = other.mask.shape
                inside = front & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
                hit = np.zeros(len(px), dtype=bool)
                hit[inside] = other.mask.pixels[px[inside, 1], px[inside, 0]]
                member[:, j] = hit & kf.active
        out.append(member)
    return out


def _energy(window: SlidingWindow, member, poses=None, inv_depths=None, oob_penalty=0.0):
    kfs = window.keyframes
    poses = poses or [kf.pose for kf in kfs]
    inv_depths = inv_depths or [kf.inv_depth for kf in kfs]
    gamma = window.cfg.huber_photo
    E = 0.0
    for i, kf in enumerate(kfs):
        for j, other in enumerate(kfs):
            sel = member[i][:, j]
            if not sel.any():
                continue
            r, *_, ok = pair_residuals(kf.patch[sel], kf.uv[sel], inv_depths[i][sel], poses[i], poses[j],
                                       other.image, window.K, jacobian=False, depth_ratio=kf.depth_ratio[sel])
            E += float(huber(r[ok], gamma)[0].sum()) + oob_penalty * int((~ok).sum())
    return E


def photometric_energy(window: SlidingWindow) -> float:
    if len(window) < 2:
        raise NotEnoughData("photometric energy needs at least two keyframes")
    return _energy(window, observations(window))


def _prior_energy(window: SlidingWindow, inv_depths) -> float:
    cfg = window.cfg
    if cfg.depth_prior_weight <= 0:
        return 0.0
    s = cfg.depth_prior_std
    E = 0.0
    for kf, rho in zip(window.keyframes, inv_depths):
        E += 0.5 * cfg.depth_prior_weight * float(np.sum(kf.active * ((rho - kf.inv_depth_prior) / s) ** 2))
    return E


@dataclass
class BAReport:
    energy_before: float
    energy_after: float
    history: list[float]
    iterations: int
    outliers: int


def optimize_window(window: SlidingWindow) -> BAReport:
    """Levenberg-Marquardt over keyframe poses (oldest keyframe held fixed) and inverse depths.

    A Gaussian prior ties each inverse depth to its input depth value. It
    fixes the global scale and holds points whose texture gives no parallax
    along the epipolar direction, which photometric residuals leave free.
    """
    kfs = window.keyframes
    cfg = window.cfg
    if len(kfs) < 2:
        raise NotEnoughData("window needs at least two keyframes")
    member = observations(window)
    observed = [m.any(axis=1) & kf.active for m, kf in zip(member, kfs)]
    n_points = int(sum(o.sum() for o in observed))
    if n_points < cfg.min_points:
        raise NotEnoughData(f"only {n_points} active co-observed points")
    gamma = cfg.huber_photo
    penalty = float(huber(2 * gamma, gamma)[0]) * 8

    nk = len(kfs)
    P = 6 * (nk - 1)
    offsets = np.cumsum([0] + [len(kf.uv) for kf in kfs])
    N = int(offsets[-1])
    prior_h = cfg.depth_prior_weight / cfg.depth_prior_std ** 2

    def total(poses, rhos):
        return _energy(window, member, poses, rhos, penalty) + _prior_energy(window, rhos)

    def build(poses, rhos):
        Hpp = np.zeros((P, P))
        Hpr = np.zeros((P, N))
        Hrr = np.zeros(N)
        gp = np.zeros(P)
        gr = np.zeros(N)
        abs_sum = np.zeros(N)
        n_res = np.zeros(N)
        for i, kf in enumerate(kfs):
            for j, other in enumerate(kfs):
                sel = member[i][:, j]
                if not sel.any():
                    continue
                idx = offsets[i] + np.flatnonzero(sel)
                r, Jh, Jt, Jr, ok = pair_residuals(kf.patch[sel], kf.uv[sel], rhos[i][sel], poses[i], poses[j],
                                                   other.image, window.K, depth_ratio=kf.depth_ratio[sel])
                _, w = huber(r, gamma)
                w = w * ok[:, None]
                abs_sum[idx] += np.where(ok[:, None], np.abs(r), 0).sum(axis=1)
                n_res[idx] += 8 * ok
                blocks = [(i - 1, Jh), (j - 1, Jt)]
                for a, Ja in blocks:
                    if a < 0:
                        continue
                    sa = slice(6 * a, 6 * a + 6)
                    gp[sa] += np.einsum("mk,mkd->d", w * r, Ja)
                    Hpr[sa, idx] += np.einsum("mk,mkd->dm", w * Jr, Ja)
                    for b, Jb in blocks:
                        if b < 0:
                            continue
                        sb = slice(6 * b, 6 * b + 6)
                        Hpp[sa, sb] += np.einsum("mk,mkd,mke->de", w, Ja, Jb)
                Hrr[idx] += (w * Jr * Jr).sum(axis=1)
                gr[idx] += (w * Jr * r).sum(axis=1)
        rho_all = np.concatenate(rhos)
        prior_all = np.concatenate([kf.inv_depth_prior for kf in kfs])
        act = np.concatenate([kf.active for kf in kfs])
        Hrr += prior_h * act
        gr += prior_h * act * (rho_all - prior_all)
        return Hpp, Hpr, Hrr, gp, gr, abs_sum, n_res

    poses = [kf.pose for kf in kfs]
    rhos = [kf.inv_depth.copy() for kf in kfs]
    E = total(poses, rhos)
    E0 = E
    history = [E]
    lam = cfg.lm_lambda
    it = 0
    Hpp, Hpr, Hrr, gp, gr, _, _ = build(poses, rhos)
    used = Hrr > 0
    S0 = Hpp - (Hpr[:, used] / Hrr[used]) @ Hpr[:, used].T
    eig = np.linalg.eigvalsh(S0)
    if eig[-1] <= 0 or eig[0] < 1e-10 * eig[-1]:
        window.low_confidence = True
        logger.debug("window rank deficient; poses kept")
        return BAReport(E0, E0, history, 0, 0)
    window.low_confidence = False

    for it in range(1, cfg.iterations + 1):
        accepted = False
        for _ in range(8):
            Hd = Hpp + lam * np.diag(np.diag(Hpp))
            hr = np.where(used, Hrr * (1 + lam), 1.0)
            Hpr_s = Hpr / hr
            S = Hd - Hpr_s @ Hpr.T
            b = -gp + Hpr_s @ gr
            dp = np.linalg.solve(S, b) if P else np.zeros(0)
            dr = np.where(used, -(gr + Hpr.T @ dp) / hr, 0.0)
            new_poses = [poses[0]] + [se3_exp(dp[6 * (k - 1):6 * k]) @ poses[k] for k in range(1, nk)]
            new_rhos = [np.maximum(rhos[k] + dr[offsets[k]:offsets[k + 1]], 1e-4) for k in range(nk)]
            E_new = total(new_poses, new_rhos)
            if E_new < E:
                poses, rhos, E = new_poses, new_rhos, E_new
                lam *= 0.5
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        history.append(E)
        Hpp, Hpr, Hrr, gp, gr, _, _ = build(poses, rhos)
        if np.linalg.norm(dp) < 1e-8 and np.max(np.abs(dr), initial=0.0) < 1e-10:
            break

    for k, kf in enumerate(kfs):
        kf.pose = poses[k]
        kf.inv_depth = rhos[k]

    Hpp, Hpr, Hrr, gp, gr, abs_sum, n_res = build(poses, rhos)
    mean_abs = abs_sum / np.maximum(n_res, 1)
    outlier = (n_res > 0) & (mean_abs > cfg.outlier_factor * gamma)
    n_out = 0
    for k, kf in enumerate(kfs):
        sl = slice(offsets[k], offsets[k + 1])
        o = outlier[sl] & kf.active
        n_out += int(o.sum())
        kf.active = kf.active & ~o
        obs = n_res[sl] > 0
        var = 1.0 / np.maximum(Hrr[sl], 1e-12)
        ray_norm = np.linalg.norm(_rays(kf.uv, window.K), axis=1)
        sig = ray_norm * np.sqrt(var) / kf.inv_depth ** 2
        kf.sigma = np.where(obs, sig, kf.sigma)
    return BAReport(E0, E, history, it, n_out)


def slide_window(window: SlidingWindow) -> SlidingWindow:
    """Drop the oldest keyframes (and their points) beyond capacity; no marginalization prior."""
    while len(window.keyframes) > window.cfg.capacity:
        window.keyframes.pop(0)
    return window
