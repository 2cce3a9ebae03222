"""Rigid-body transforms, pinhole camera and robust norm.

Camera convention: x right, y down, z forward. The ground plane is x-z and
yaw is a rotation about the camera y axis, so ``yaw_rotation(a)`` maps the
object x axis to ``(cos a, 0, -sin a)`` as in the KITTI label format.

Twists are ordered ``(rho, omega)``: three translational then three
rotational coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

_SMALL = 1e-8


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]]) * 0.5


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))
    return float(out) if out.ndim == 0 else out


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_rotation_derivative(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def yaw_of(rotation: np.ndarray) -> float:
    """Yaw from the planar components of a rotation (roll = pitch = 0 assumed)."""
    return wrap_angle(np.arctan2(rotation[0, 2], rotation[0, 0]))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite rigid transform")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation)))


def _so3_exp(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and left Jacobian V for rotation vector w."""
    th2 = float(w @ w)
    th = np.sqrt(th2)
    W = hat(w)
    W2 = W @ W
    if th < 1e-5:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
        c = 1.0 / 6.0 - th2 / 120.0
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
        c = (th - np.sin(th)) / (th2 * th)
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return R, V


def se3_exp(twist) -> RigidTransform:
    xi = np.asarray(twist, dtype=float).reshape(6)
    R, V = _so3_exp(xi[3:])
    return RigidTransform(R, V @ xi[:3])


def so3_log(R: np.ndarray) -> np.ndarray:
    s = 0.5 * vee(R - R.T)  # sin(theta) * axis
    sin_th = float(np.linalg.norm(s))
    cos_th = 0.5 * (np.trace(R) - 1.0)
    th = np.arctan2(sin_th, cos_th)
    if th > np.pi - 1e-6:
        # sin(theta) carries no axis information here; read it off R + I = 2 k k^T (near pi)
        B = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(B)))
        k = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        k /= np.linalg.norm(k)
        if k @ s < 0:
            k = -k
        return th * k
    if th < 1e-5:
        return s * (1.0 + th * th / 6.0)
    return s * (th / sin_th)


def se3_log(T: RigidTransform) -> np.ndarray:
    w = so3_log(T.rotation)
    th2 = float(w @ w)
    th = np.sqrt(th2)
    W = hat(w)
    if th < 1e-5:
        c = 1.0 / 12.0 + th2 / 720.0
    else:
        c = (1.0 - th * np.sin(th) / (2.0 * (1.0 - np.cos(th)))) / th2
    V_inv = np.eye(3) - 0.5 * W + c * (W @ W)
    return np.concatenate([V_inv @ T.translation, w])


def se3_generators_at(points: np.ndarray) -> np.ndarray:
    """d(exp(xi) * X)/d(xi) at xi = 0 for each row of ``points``; shape (N, 3, 6)."""
    P = np.atleast_2d(points)
    n = P.shape[0]
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    # -[X]_x
    J[:, 0, 4] = z
    J[:, 0, 5] = -y
    J[:, 1, 3] = -z
    J[:, 1, 5] = x
    J[:, 2, 3] = y
    J[:, 2, 4] = -x
    return J


@dataclass(frozen=True)
class Pose4DoF:
    translation: np.ndarray
    yaw: float

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def from_params(cls, params) -> Pose4DoF:
        p = np.asarray(params, dtype=float)
        return cls(p[:3], p[3])

    @classmethod
    def from_transform(cls, T: RigidTransform) -> Pose4DoF:
        return cls(T.translation, yaw_of(T.rotation))

    def params(self) -> np.ndarray:
        return np.array([*self.translation, self.yaw])

    def to_transform(self) -> RigidTransform:
        return RigidTransform(yaw_rotation(self.yaw), self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def at_level(self, level: int) -> CameraIntrinsics:
        """Intrinsics of a pyramid level built by 2x2 block averaging."""
        s = 2 ** level
        return CameraIntrinsics(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            max(1, self.width // s),
            max(1, self.height // s),
        )


def project(p, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise DomainError(f"cannot project point with depth {p[2]}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def backproject(uv, depth: float, K: CameraIntrinsics) -> np.ndarray:
    if depth is None or not np.isfinite(depth) or depth <= 0:
        raise DomainError(f"invalid depth {depth}")
    u, v = uv
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def project_points(P: np.ndarray, K: CameraIntrinsics, min_depth: float = 1e-6):
    """Vectorized projection; returns (uv, valid) with ``valid`` false for z <= min_depth."""
    P = np.atleast_2d(P)
    z = P[:, 2]
    valid = z > min_depth
    zs = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * P[:, 0] / zs + K.cx, K.fy * P[:, 1] / zs + K.cy], axis=1)
    return uv, valid


def backproject_points(uv: np.ndarray, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    uv = np.atleast_2d(uv)
    d = np.asarray(depth, dtype=float)
    return np.stack([(uv[:, 0] - K.cx) / K.fx * d, (uv[:, 1] - K.cy) / K.fy * d, d], axis=1)


def projection_jacobian(P: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d(pi)/dX for each row of P; shape (N, 2, 3)."""
    P = np.atleast_2d(P)
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    iz = 1.0 / z
    J = np.zeros((P.shape[0], 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz * iz
    return J


def huber(r, gamma: float):
    """Huber cost and IRLS weight, elementwise.

    cost = r^2/2 inside the threshold, gamma*(|r| - gamma/2) outside;
    weight = min(1, gamma/|r|).
    """
    if gamma <= 0:
        raise ValueError("huber threshold must be positive")
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    inside = a <= gamma
    cost = np.where(inside, 0.5 * r * r, gamma * (a - 0.5 * gamma))
    weight = np.where(inside, 1.0, gamma / np.maximum(a, _SMALL))
    if cost.ndim == 0:
        return float(cost), float(weight)
    return cost, weight
