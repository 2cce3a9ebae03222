"""Per-frame orchestration: alignment, association, windowed BA, box detection and fusion.

Per-object stages run on a thread pool and are gathered in object order, so
results do not depend on the number of workers. Association and output
emission are the serial points of each frame.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..alignment import align, fallback_track_2d, propose_candidates
from ..association import Track, TrackerState, TrackStatus, associate, update_tracks
from ..detection import BoxObservation, Detection3D, PointSet, fuse_proposals, refine_box, regress_bev_box
from ..errors import Diverged, InsufficientGeometry, NotEnoughData, TrackLost
from ..geometry import CameraIntrinsics, RigidTransform, project_points
from ..imaging import Frame, InstanceMask, build_pyramid, mask_iou, warp_mask
from ..metrics.boxes import Box2D, iou_2d
from ..pipeline.synth import box_corners
from ..window_ba import Keyframe, SlidingWindow, optimize_window, select_points, should_create_keyframe, slide_window
from .config import PipelineConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameOutput:
    frame_id: int
    track_id: int
    box2d: tuple[float, float, float, float]
    box3d: Detection3D  # camera frame of ``frame_id``
    mode: str  # "3d", "2d" or "pending"


@dataclass
class Trajectory:
    """Pose bookkeeping of one track.

    Every frame pose maps that frame's camera coordinates into the reference
    frame and is stored relative to a keyframe anchor, so BA refinements of
    keyframes carry over to the frames between them.
    """

    anchors: dict[int, tuple[int, RigidTransform]] = field(default_factory=dict)
    kf_poses: dict[int, RigidTransform] = field(default_factory=dict)
    modes: dict[int, str] = field(default_factory=dict)
    accumulated: float = 0.0
    dims_prior: tuple[float, float, float] | None = None
    last_detection: tuple[float, float, float, float] | None = None

    def pose(self, frame: int) -> RigidTransform:
        anchor, rel = self.anchors[frame]
        return self.kf_poses[anchor] @ rel

    def extend(self, frame: int, motion: RigidTransform):
        """Chain ``motion`` (frame -> previous frame) onto the latest earlier pose."""
        last = max(f for f in self.anchors if f < frame)
        anchor, rel = self.anchors[last]
        self.anchors[frame] = (anchor, rel @ motion)


@dataclass
class _Task:
    key: tuple[int, int]  # (0, object index) or (1, track id) for pending tracks
    mask: InstanceMask
    init: RigidTransform | None
    prev_mask: InstanceMask | None


@dataclass
class _Result:
    key: tuple[int, int]
    motion: RigidTransform | None = None
    warped: InstanceMask | None = None  # the object's mask moved to the previous frame
    mode: str = "lost"
    error: str | None = None


def _enclosing_box(det: Detection3D, K: CameraIntrinsics) -> tuple[float, float, float, float] | None:
    corners = det.pose.to_transform().apply(box_corners(det.dims))
    if np.any(corners[:, 2] <= 0.1):
        return None
    uv, _ = project_points(corners, K)
    l, t = np.clip(uv.min(axis=0), 0, [K.width - 1, K.height - 1])
    r, b = np.clip(uv.max(axis=0), 0, [K.width - 1, K.height - 1])
    return float(l), float(t), float(r), float(b)


def _mask_box(mask: InstanceMask) -> Box2D:
    u0, v0, u1, v1 = mask.bbox
    return Box2D.from_ltrb(u0, v0, u1 + 1, v1 + 1)


def match_detections(masks: dict[int, InstanceMask], boxes, threshold: float = 0.3) -> dict[int, int]:
    """Greedy pairing of 2D detections to mask bounding rectangles by IoU."""
    pairs = []
    for key, m in masks.items():
        if m.empty:
            continue
        mb = _mask_box(m)
        for j, b in enumerate(boxes):
            s = iou_2d(mb, Box2D.from_ltrb(*b))
            if s >= threshold:
                pairs.append((-s, key, j))
    out: dict[int, int] = {}
    used = set()
    for _, key, j in sorted(pairs):
        if key in out or j in used:
            continue
        out[key] = j
        used.add(j)
    return out


class Tracker:
    def __init__(self, K: CameraIntrinsics, cfg: PipelineConfig | None = None):
        self.K = K
        self.cfg = cfg or PipelineConfig()
        self.state = TrackerState()
        self.traj: dict[int, Trajectory] = {}
        self.prev: Frame | None = None
        self.frames_seen: list[int] = []

    # -- helpers ---------------------------------------------------------
    def _map(self, fn, items):
        n = self.cfg.tracker.parallelism
        if n <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))

    def _predict_mask(self, tr: Track) -> InstanceMask | None:
        """The track's latest mask moved forward one frame by its motion model."""
        M = tr.last_motion()
        if tr.mask is None or tr.mask.empty:
            return None
        if M is None:
            return tr.mask
        try:
            return warp_mask(tr.mask, self.prev.depth, M.inverse(), self.K)
        except (NotEnoughData, ValueError):
            return None

    def _track_object(self, task: _Task, cur: Frame) -> _Result:
        prev = self.prev
        cfg = self.cfg
        res = _Result(task.key)
        try:
            pyr = build_pyramid(cur, task.mask, self.K, cfg.tracker.s_min, cfg.align.channels)
            init = task.init
            if init is None:
                init = propose_candidates(prev, pyr, task.prev_mask, cfg.align)[0]
            out = align(prev, cur, pyr, init, cfg.align)
            if out.converged:
                res.motion = out.pose
                res.warped = warp_mask(task.mask, cur.depth, out.pose, self.K)
                res.mode = "3d"
                return res
            res.error = "alignment did not converge"
        except (NotEnoughData, Diverged, ValueError) as e:
            res.error = str(e)
        except Exception as e:  # contain any per-object failure
            logger.exception("object %s: alignment crashed", task.key)
            res.error = repr(e)
        if cfg.tracker.fallback_2d:
            try:
                res.warped = fallback_track_2d(cur.gray, prev.gray, task.mask)
                res.mode = "2d"
            except (TrackLost, ValueError) as e:
                res.error = str(e)
            except Exception as e:
                logger.exception("object %s: 2D fallback crashed", task.key)
                res.error = repr(e)
        return res

    # -- per-frame -------------------------------------------------------
    def process_frame(self, frame: Frame) -> list[FrameOutput]:
        t = frame.frame_id
        masks = {k: m for k, m in enumerate(frame.masks) if not m.empty}
        live = self.state.live()
        results: dict[tuple[int, int], _Result] = {}
        predicted: dict[int, InstanceMask | None] = {}

        if self.prev is not None:
            predicted = {tr.id: self._predict_mask(tr) for tr in live}
            tasks = []
            for k, m in masks.items():
                best, best_iou = None, 0.0
                for tr in live:
                    p = predicted.get(tr.id)
                    if p is None:
                        continue
                    s = mask_iou(p, m)
                    if s > best_iou:
                        best, best_iou = tr, s
                init = best.last_motion() if best is not None else None
                tasks.append(_Task((0, k), m, init, best.mask if best is not None else None))
            for tr in live:
                if tr.status is TrackStatus.PENDING and predicted.get(tr.id) is not None:
                    tasks.append(_Task((1, tr.id), predicted[tr.id], tr.last_motion(), None))
            for r in self._map(lambda task: self._track_object(task, frame), tasks):
                results[r.key] = r

        warped = []
        for k, m in masks.items():
            r = results.get((0, k))
            warped.append((k, r.warped if r is not None and r.warped is not None else m))
        track_masks = [(tr.id, tr.mask) for tr in live if tr.mask is not None]
        assoc = associate(warped, track_masks, self.cfg.assoc)

        motions = {k: results[(0, k)].motion if (0, k) in results else None for k in masks}
        pending = {tid: predicted.get(tid) for tid in assoc.unmatched_tracks}
        owner = update_tracks(assoc, self.state, t, masks, motions, pending, self.cfg.assoc)

        det_match = match_detections({tid: self.state.tracks[tid].mask for tid in owner.values()},
                                     frame.detections, self.cfg.detect.match_iou)

        # trajectory bookkeeping
        ba_jobs = []
        for k, tid in sorted(owner.items(), key=lambda x: x[1]):
            tr = self.state.tracks[tid]
            tj = self.traj.get(tid)
            if tj is None or tr.first_frame == t:
                tj = self.traj[tid] = Trajectory()
                tj.anchors[t] = (t, RigidTransform.identity())
                tj.kf_poses[t] = RigidTransform.identity()
                tj.modes[t] = "new"
                ba_jobs.append((tid, True))
            else:
                r = results.get((0, k))
                motion = motions.get(k)
                if motion is not None:
                    tj.extend(t, motion)
                    tj.accumulated += float(np.linalg.norm(motion.translation))
                    tj.modes[t] = "3d"
                    ba_jobs.append((tid, should_create_keyframe(
                        len(tr.window.keyframes) if tr.window else 0, tj.accumulated,
                        self.cfg.ba.keyframe_threshold)))
                else:
                    tj.extend(t, self._last_3d_motion(tr, t))
                    tj.modes[t] = r.mode if r is not None else "2d"
            j = det_match.get(tid)
            if j is not None:
                tj.last_detection = tuple(frame.detections[j])
                if j < len(frame.dims_priors) and frame.dims_priors[j] is not None and tj.dims_prior is None:
                    tj.dims_prior = tuple(frame.dims_priors[j])
            else:
                tj.last_detection = None

        for tid in assoc.unmatched_tracks:
            tr = self.state.tracks[tid]
            if tr.status is not TrackStatus.PENDING or tid not in self.traj:
                continue
            tj = self.traj[tid]
            r = results.get((1, tid))
            if r is not None and r.motion is not None:
                tr.motions[t] = r.motion
                tj.extend(t, r.motion)
            else:
                m = tr.last_motion() or RigidTransform.identity()
                tr.motions[t] = m
                tj.extend(t, m)
            tj.modes[t] = "pending"
            tj.last_detection = None

        jobs = [(tid, frame) for tid, make_kf in ba_jobs if make_kf]
        self._map(lambda job: self._keyframe_step(*job), jobs)

        self.prev = frame
        self.frames_seen.append(t)
        return self._emit(t)

    def _last_3d_motion(self, tr: Track, t: int) -> RigidTransform:
        for f in sorted(tr.motions, reverse=True):
            if f < t and tr.motions[f] is not None:
                return tr.motions[f]
        return RigidTransform.identity()

    def _keyframe_step(self, tid: int, frame: Frame):
        """Add a keyframe, run BA and refresh the box estimate; failures stay local."""
        tr = self.state.tracks[tid]
        tj = self.traj[tid]
        cfg = self.cfg
        t = frame.frame_id
        try:
            if tr.window is None:
                tr.window = SlidingWindow(self.K, cfg.ba)
            win: SlidingWindow = tr.window
            pose = tj.pose(t)
            kf = Keyframe(t, frame.gray, tr.mask, pose, tj.last_detection)
            kf.set_points(select_points(frame.gray, frame.depth, tr.mask, self.K, cfg.ba.points_per_keyframe,
                                        cfg.ba.gradient_floor, t, cfg.ba.sigma_depth_coeff), frame.depth)
            win.add(kf)
            tj.kf_poses[t] = pose
            tj.anchors[t] = (t, RigidTransform.identity())
            tj.accumulated = 0.0
            if len(win) >= 2:
                try:
                    optimize_window(win)
                except NotEnoughData as e:
                    logger.debug("track %d frame %d: BA skipped (%s)", tid, t, e)
                slide_window(win)
                for k in win.keyframes:
                    tj.kf_poses[k.frame_id] = k.pose
            self._detect(tr, tj, t)
        except Exception:
            logger.exception("track %d frame %d: keyframe processing failed", tid, t)

    def _detect(self, tr: Track, tj: Trajectory, t: int):
        win: SlidingWindow = tr.window
        cfg = self.cfg
        sets = [PointSet(kf.pose, pts, sig) for kf, pts, sig in win.visible_points(2) if len(pts)]
        obs = [BoxObservation(kf.pose, kf.detection) for kf in win.keyframes if kf.detection is not None]
        prior: Detection3D | None = tr.state
        if prior is None:
            if not sets:
                return
            points = np.concatenate([s.pose.apply(s.points) for s in sets])
            margin = cfg.detect.bev_margin_px * float(np.median(points[:, 2])) / self.K.fx
            try:
                initial = regress_bev_box(points, cfg.detect.bev_cell, cfg.detect.bev_min_count,
                                          cfg.detect.car_height, tj.dims_prior, trim=cfg.detect.bev_trim,
                                          margin=margin)
            except InsufficientGeometry as e:
                logger.debug("track %d frame %d: detection deferred (%s)", tr.id, t, e)
                return
        else:
            initial = prior
        if not sets and not obs:
            return
        result = refine_box(initial, sets, obs, prior.pose if prior is not None else None, self.K, cfg.refine)
        meas = Detection3D(result.detection.center, result.detection.yaw, result.detection.dims,
                           result.detection.cov, result.detection.yaw_var, t, tr.id)
        tr.state = fuse_proposals(prior, meas) if prior is not None else meas

    def _row(self, tid: int, t: int) -> FrameOutput | None:
        tr = self.state.tracks[tid]
        tj = self.traj.get(tid)
        if tr.state is None or tj is None or t not in tj.anchors:
            return None
        det = tr.state.transformed(tj.pose(t).inverse())
        det = Detection3D(det.center, det.yaw, det.dims, det.cov, det.yaw_var, t, tid)
        box = _enclosing_box(det, self.K)
        if box is None:
            return None
        return FrameOutput(t, tid, box, det, tj.modes.get(t, "3d"))

    def _emit(self, t: int) -> list[FrameOutput]:
        rows = []
        for tid in sorted(self.traj):
            if t in self.traj[tid].anchors and self.state.tracks[tid].status is not TrackStatus.TERMINATED:
                row = self._row(tid, t)
                if row is not None:
                    rows.append(row)
        return rows

    def finalize(self) -> list[FrameOutput]:
        """All rows re-expressed with each track's latest fused box and refined keyframe poses."""
        rows = []
        for t in self.frames_seen:
            for tid in sorted(self.traj):
                if t in self.traj[tid].anchors:
                    row = self._row(tid, t)
                    if row is not None:
                        rows.append(row)
        return rows


def run_sequence(bundle, cfg: PipelineConfig | None = None) -> list[FrameOutput]:
    tracker = Tracker(bundle.intrinsics, cfg)
    for rec in bundle.frames:
        tracker.process_frame(rec.load())
    return tracker.finalize()
