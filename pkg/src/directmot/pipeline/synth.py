"""Ray-cast renderer for textured cuboids in front of a textured background plane.

Produces exact depth, instance masks, amodal 2D boxes and 3D ground truth,
so every stage of the tracker can be checked against known geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose4DoF, RigidTransform, project_points, wrap_angle
from ..metrics.boxes import Box3D
from .sequence import Detection2D, FrameRecord, SequenceBundle


@dataclass
class SynthObject:
    dims: tuple[float, float, float] = (1.8, 1.5, 4.2)  # width, height, length
    center: tuple[float, float, float] = (0.0, 0.9, 10.0)
    yaw: float = 0.5
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0
    texture_seed: int = 0

    def pose(self, t: int) -> Pose4DoF:
        c = np.asarray(self.center, float) + t * np.asarray(self.velocity, float)
        return Pose4DoF(c, self.yaw + t * self.yaw_rate)


@dataclass
class Scenario:
    n_frames: int = 10
    width: int = 480
    height: int = 240
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 239.5
    cy: float = 119.5
    objects: list[SynthObject] = field(default_factory=lambda: [SynthObject()])
    noise_sigma: float = 0.0
    background_depth: float = 30.0
    background_seed: int = 1000
    seed: int = 0
    color: bool = False
    dims_prior: bool = False
    sequence_id: str = "synth"
    supersample: int = 3  # rays per pixel side for the intensity image

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class GroundTruth:
    """Per frame: list of (track id, Box3D, amodal 2D box (l, t, r, b))."""

    frames: list[list[tuple[int, Box3D, tuple[float, float, float, float]]]]
    motions: dict[int, list[RigidTransform]]

    def box(self, frame: int, track_id: int) -> Box3D:
        for tid, box, _ in self.frames[frame]:
            if tid == track_id:
                return box
        raise KeyError((frame, track_id))


class _Texture:
    """Band-limited random texture: a sum of plane waves in metric coordinates."""

    def __init__(self, seed: int, wavelengths: tuple[float, float], n: int = 14):
        rng = np.random.default_rng(seed)
        ang = rng.uniform(0, np.pi, n)
        lam = np.exp(rng.uniform(np.log(wavelengths[0]), np.log(wavelengths[1]), n))
        self.k = np.stack([np.cos(ang), np.sin(ang)], axis=1) * (2 * np.pi / lam)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, n)
        self.amp = rng.uniform(0.5, 1.0, n)
        self.amp /= np.sqrt(0.5 * np.sum(self.amp ** 2))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        arg = a[:, None] * self.k[:, 0] + b[:, None] * self.k[:, 1] + self.phase
        return np.clip((np.sin(arg) * self.amp).sum(axis=1) / 2.5, -1.0, 1.0)


# flat shading per face: +x, -x, +y, -y, +z, -z in object coordinates
_FACE_SHADE = np.array([0.95, 0.75, 0.55, 0.85, 1.0, 0.65])
_FACE_TINT = np.array([[1.0, 0.8, 0.7], [0.8, 1.0, 0.8], [0.9, 0.9, 1.0],
                       [1.0, 1.0, 0.8], [0.7, 0.9, 1.0], [1.0, 0.7, 0.9]])


def box_extents(dims) -> np.ndarray:
    """Object-frame half extents along (x, y, z) = (length, height, width) / 2."""
    w, h, l = dims
    return 0.5 * np.array([l, h, w])


def box_corners(dims) -> np.ndarray:
    e = box_extents(dims)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    return signs * e


def ray_box_intersection(origin: np.ndarray, dirs: np.ndarray, T: RigidTransform, dims):
    """Entry distance along each ray (inf when missed) and the entered face index."""
    Tinv = T.inverse()
    o = Tinv.apply(origin)
    d = dirs @ Tinv.rotation.T
    e = box_extents(dims)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-e - o) * inv
        t2 = (e - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    local = o + np.where(hit, t_near, 0.0)[:, None] * d
    face = axis * 2 + (local[np.arange(len(local)), axis] < 0)
    return np.where(hit, t_near, np.inf), face, local


def _trace(scenario: Scenario, t: int, dirs: np.ndarray, C: int):
    """Intensity (N, C), depth and instance id along each ray."""
    origin = np.zeros(3)
    bg_tex = _Texture(scenario.background_seed, (0.6, 4.0))
    zb = scenario.background_depth
    depth = np.full(len(dirs), zb)
    ids = np.zeros(len(dirs), dtype=np.int32)
    shade = 110.0 + 70.0 * bg_tex(dirs[:, 0] * zb, dirs[:, 1] * zb)
    image = np.repeat(shade[:, None], C, axis=1)

    for k, obj in enumerate(scenario.objects):
        T = obj.pose(t).to_transform()
        dist, face, local = ray_box_intersection(origin, dirs, T, obj.dims)
        z = dist * dirs[:, 2]
        closer = np.isfinite(dist) & (z < depth)
        if not closer.any():
            continue
        depth[closer] = z[closer]
        ids[closer] = k + 1
        f = face[closer]
        loc = local[closer]
        val = np.empty(closer.sum())
        for fi in range(6):
            sel = f == fi
            if not sel.any():
                continue
            ax = fi // 2
            a, b = [loc[sel, i] for i in range(3) if i != ax]
            tex = _Texture(obj.texture_seed * 6 + fi + 1, (0.3, 1.2))
            val[sel] = _FACE_SHADE[fi] * (128.0 + 90.0 * tex(a, b))
        if C == 1:
            image[closer, 0] = val
        else:
            image[closer] = val[:, None] * _FACE_TINT[f]
    return image, depth, ids


def render(scenario: Scenario, t: int):
    """Noise-free render of frame ``t``: (image HxWxC, depth HxW, ids HxW).

    Depth and ids come from the pixel-center ray; intensities average
    ``supersample``^2 rays per pixel, like a sensor integrating over its area.
    """
    K = scenario.intrinsics
    H, W = scenario.height, scenario.width
    C = 3 if scenario.color else 1

    def rays(du, dv):
        v, u = np.mgrid[0:H, 0:W]
        return np.stack([(u.ravel() + du - K.cx) / K.fx, (v.ravel() + dv - K.cy) / K.fy, np.ones(H * W)], axis=1)

    image, depth, ids = _trace(scenario, t, rays(0.0, 0.0), C)
    n = max(1, int(scenario.supersample))
    if n > 1:
        offs = (np.arange(n) + 0.5) / n - 0.5
        image = np.mean([_trace(scenario, t, rays(du, dv), C)[0] for dv in offs for du in offs], axis=0)
    return image.reshape(H, W, C), depth.reshape(H, W), ids.reshape(H, W)


def amodal_box(obj: SynthObject, t: int, K: CameraIntrinsics):
    P = obj.pose(t).to_transform().apply(box_corners(obj.dims))
    uv, front = project_points(P, K)
    return P, uv, front


def synth_generate(scenario: Scenario) -> tuple[SequenceBundle, GroundTruth]:
    K = scenario.intrinsics
    bad = []
    for t in range(scenario.n_frames):
        for obj in scenario.objects:
            P, uv, front = amodal_box(obj, t, K)
            inside = (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
            if not (np.all(P[:, 2] > 0.1) and front.all() and inside.all()):
                bad.append(t)
                break
    if bad:
        raise ValueError(f"object leaves the camera frustum in frames {sorted(set(bad))}")

    rng = np.random.default_rng(scenario.seed)
    records = []
    gt_frames = []
    for t in range(scenario.n_frames):
        image, depth, ids = render(scenario, t)
        if scenario.noise_sigma > 0:
            image = image + rng.normal(0.0, scenario.noise_sigma, image.shape)
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        depth = np.round(depth * 1000.0) / 1000.0
        dets = []
        gt = []
        for k, obj in enumerate(scenario.objects):
            _, uv, _ = amodal_box(obj, t, K)
            b2 = (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))
            w, h, l = obj.dims
            dets.append(Detection2D(b2, 1.0, (h, w, l) if scenario.dims_prior else None))
            p = obj.pose(t)
            gt.append((k + 1, Box3D(p.translation, wrap_angle(p.yaw), obj.dims), b2))
        records.append(FrameRecord(t, detections=dets,
                                   arrays=(image[..., 0] if image.shape[2] == 1 else image,
                                           depth, ids.astype(np.uint16))))
        gt_frames.append(gt)

    motions = {}
    for k, obj in enumerate(scenario.objects):
        poses = [obj.pose(t).to_transform() for t in range(scenario.n_frames)]
        motions[k + 1] = [poses[t] @ poses[t - 1].inverse() for t in range(1, scenario.n_frames)]
    bundle = SequenceBundle(records, K, scenario.sequence_id)
    return bundle, GroundTruth(gt_frames, motions)
