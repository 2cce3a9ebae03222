"""Mask-to-track association and trajectory lifecycle."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConsistencyError
from .geometry import RigidTransform
from .imaging import InstanceMask, mask_iou


class TrackStatus(enum.Enum):
    ACTIVE = "active"
    PENDING = "pending"  # lost by the segmentation, kept alive on its warped mask
    TERMINATED = "terminated"


@dataclass
class AssociationConfig:
    min_iou: float = 0.05
    age_max: int = 2

    def __post_init__(self):
        if not 0.0 < self.min_iou < 1.0:
            raise ValueError("min_iou must lie in (0, 1)")
        if self.age_max < 0:
            raise ValueError("age_max must be non-negative")


@dataclass
class Track:
    """One object's lifecycle. Per-frame fields are keyed by frame id."""

    id: int
    first_frame: int
    status: TrackStatus = TrackStatus.ACTIVE
    age: int = 0
    mask: InstanceMask | None = None  # latest mask (at the last processed frame)
    mask_frame: int = -1
    masks: dict[int, InstanceMask] = field(default_factory=dict)
    motions: dict[int, RigidTransform | None] = field(default_factory=dict)  # T_t^{t-1} per frame
    tracked_3d: bool = False
    window: object | None = None  # SlidingWindow, attached by the tracker
    state: object | None = None  # fused Detection3D in the reference frame

    @property
    def alive(self) -> bool:
        return self.status is not TrackStatus.TERMINATED

    def last_motion(self) -> RigidTransform | None:
        if not self.motions:
            return None
        return self.motions[max(self.motions)]


@dataclass
class AssociationResult:
    matches: list[tuple[int, int]]  # (object index, track id)
    unmatched_objects: list[int]
    unmatched_tracks: list[int]


def iou_matrix(objects: list[tuple[int, InstanceMask]], tracks: list[tuple[int, InstanceMask]]) -> np.ndarray:
    M = np.zeros((len(objects), len(tracks)))
    for a, (_, m) in enumerate(objects):
        for b, (_, n) in enumerate(tracks):
            M[a, b] = mask_iou(m, n)
    return M


def assign(iou: np.ndarray, min_iou: float = 0.05) -> list[tuple[int, int]]:
    """Row/column pairs of the maximum-total-IoU assignment with weak pairs removed."""
    iou = np.asarray(iou, dtype=float)
    if iou.size == 0:
        return []
    rows, cols = linear_sum_assignment(1.0 - iou)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= min_iou]


def associate(warped: list[tuple[int, InstanceMask]], tracks: list[tuple[int, InstanceMask]],
              cfg: AssociationConfig | None = None) -> AssociationResult:
    """Match objects (masks warped to the previous frame) to tracks (their previous-frame masks).

    Inputs are sorted by object index and track id first, so equal inputs
    always produce equal matches.
    """
    cfg = cfg or AssociationConfig()
    warped = sorted(warped, key=lambda x: x[0])
    tracks = sorted(tracks, key=lambda x: x[0])
    pairs = assign(iou_matrix(warped, tracks), cfg.min_iou)
    matches = sorted((warped[r][0], tracks[c][0]) for r, c in pairs)
    got_o = {o for o, _ in matches}
    got_t = {t for _, t in matches}
    return AssociationResult(matches, [o for o, _ in warped if o not in got_o],
                             [t for t, _ in tracks if t not in got_t])


@dataclass
class TrackerState:
    tracks: dict[int, Track] = field(default_factory=dict)
    next_id: int = 1

    def live(self) -> list[Track]:
        return [self.tracks[k] for k in sorted(self.tracks) if self.tracks[k].alive]


def update_tracks(result: AssociationResult, state: TrackerState, frame_id: int,
                  masks: dict[int, InstanceMask], motions: dict[int, RigidTransform | None],
                  pending_masks: dict[int, InstanceMask | None], cfg: AssociationConfig | None = None
                  ) -> dict[int, int]:
    """Apply one frame's association to the tracker state.

    ``masks`` and ``motions`` are keyed by object index (motion None when the
    object was not tracked in 3D); ``pending_masks`` holds the forward-warped
    mask of each unmatched track, if one could be computed. Returns the
    object index -> track id mapping, new tracks included.
    """
    cfg = cfg or AssociationConfig()
    ids = [t for _, t in result.matches]
    if len(ids) != len(set(ids)):
        raise ConsistencyError(f"track matched twice in frame {frame_id}: {ids}")
    owner: dict[int, int] = {}
    for obj, tid in result.matches:
        tr = state.tracks.get(tid)
        if tr is None or not tr.alive:
            raise ConsistencyError(f"match to unknown or terminated track {tid}")
        tr.status = TrackStatus.ACTIVE
        tr.age = 0
        tr.mask = masks[obj]
        tr.mask_frame = frame_id
        tr.masks[frame_id] = masks[obj]
        tr.motions[frame_id] = motions.get(obj)
        if motions.get(obj) is not None:
            tr.tracked_3d = True
        owner[obj] = tid

    for tid in result.unmatched_tracks:
        tr = state.tracks[tid]
        if not tr.alive:
            continue
        tr.age += 1
        if tr.age > cfg.age_max:
            tr.status = TrackStatus.TERMINATED
            continue
        warped = pending_masks.get(tid)
        if tr.tracked_3d and warped is not None and not warped.empty:
            tr.status = TrackStatus.PENDING
            tr.mask = warped
            tr.mask_frame = frame_id
            tr.masks[frame_id] = warped
        elif tr.tracked_3d:
            tr.status = TrackStatus.TERMINATED

    for obj in result.unmatched_objects:
        tid = state.next_id
        state.next_id += 1
        state.tracks[tid] = Track(tid, frame_id, mask=masks[obj], mask_frame=frame_id, masks={frame_id: masks[obj]})
        owner[obj] = tid
    return owner
