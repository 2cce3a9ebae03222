"""HOTA and CLEARMOT over arbitrary similarity kernels.

Both follow the TrackEval reference implementation: HOTA matches each frame
once by Hungarian assignment on global-alignment-weighted similarity and then
thresholds the matches per alpha; CLEARMOT prefers continuing the previous
frame's matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import Box2D, Box3D, giou_3d_normalized, iou_2d, iou_3d

_EPS = np.finfo(float).eps
ALPHAS = np.arange(0.05, 0.99, 0.05)


@dataclass
class TrackedObject:
    track_id: int
    box2d: Box2D | None = None
    box3d: Box3D | None = None
    cls: str = "Car"
    score: float | None = None


@dataclass
class TrackingData:
    """Per-frame object lists; index = frame id."""

    frames: list[list[TrackedObject]] = field(default_factory=list)
    sequence_id: str = ""

    def __post_init__(self):
        for f, objs in enumerate(self.frames):
            ids = [o.track_id for o in objs]
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate track id in frame {f}")


Similarity = Callable[[TrackedObject, TrackedObject], float]

SIMILARITIES: dict[str, Similarity] = {
    "iou2d": lambda a, b: iou_2d(a.box2d, b.box2d),
    "iou3d": lambda a, b: iou_3d(a.box3d, b.box3d),
    "giou3d": lambda a, b: giou_3d_normalized(a.box3d, b.box3d),
}


@dataclass
class HotaReport:
    HOTA: float
    DetA: float
    AssA: float
    DetRe: float
    DetPr: float
    AssRe: float
    AssPr: float
    LocA: float
    alphas: np.ndarray = field(repr=False, default_factory=lambda: ALPHAS.copy())
    per_alpha: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA")}


@dataclass
class ClearMotReport:
    MOTA: float
    MOTP: float
    IDSW: int
    FP: int
    FN: int
    TP: int

    def as_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in ("MOTA", "MOTP", "IDSW", "FP", "FN", "TP")}


def _prepare(gt: TrackingData, pred: TrackingData, sim: Similarity | str):
    if gt.sequence_id and pred.sequence_id and gt.sequence_id != pred.sequence_id:
        raise ValueError(f"sequence mismatch: {gt.sequence_id!r} vs {pred.sequence_id!r}")
    if isinstance(sim, str):
        sim = SIMILARITIES[sim]
    n = max(len(gt.frames), len(pred.frames))
    g_frames = gt.frames + [[]] * (n - len(gt.frames))
    p_frames = pred.frames + [[]] * (n - len(pred.frames))
    g_map = {k: i for i, k in enumerate(sorted({o.track_id for f in g_frames for o in f}))}
    p_map = {k: i for i, k in enumerate(sorted({o.track_id for f in p_frames for o in f}))}
    frames = []
    for g, p in zip(g_frames, p_frames):
        S = np.array([[sim(a, b) for b in p] for a in g], dtype=float).reshape(len(g), len(p))
        frames.append((np.array([g_map[o.track_id] for o in g], dtype=int),
                       np.array([p_map[o.track_id] for o in p], dtype=int), S))
    return frames, len(g_map), len(p_map)


def hota(gt: TrackingData, pred: TrackingData, similarity: Similarity | str = "giou3d",
         alphas: np.ndarray | None = None) -> HotaReport:
    alphas = ALPHAS if alphas is None else np.asarray(alphas, dtype=float)
    frames, ng, npred = _prepare(gt, pred, similarity)
    na = len(alphas)
    TP, FN, FP, loc = (np.zeros(na) for _ in range(4))

    potential = np.zeros((ng, npred))
    g_count = np.zeros((ng, 1))
    p_count = np.zeros((1, npred))
    for gi, pi, S in frames:
        if len(gi) and len(pi):
            denom = S.sum(0)[None, :] + S.sum(1)[:, None] - S
            s_iou = np.zeros_like(S)
            ok = denom > _EPS
            s_iou[ok] = S[ok] / denom[ok]
            potential[gi[:, None], pi[None, :]] += s_iou
        g_count[gi] += 1
        p_count[0, pi] += 1
    global_score = potential / np.maximum(g_count + p_count - potential, _EPS)

    counts = np.zeros((na, ng, npred))
    for gi, pi, S in frames:
        if len(gi) == 0:
            FP += len(pi)
            continue
        if len(pi) == 0:
            FN += len(gi)
            continue
        score = global_score[gi[:, None], pi[None, :]] * S
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(alphas):
            ok = S[rows, cols] >= alpha - _EPS
            r, c = rows[ok], cols[ok]
            m = len(r)
            TP[a] += m
            FN[a] += len(gi) - m
            FP[a] += len(pi) - m
            if m:
                loc[a] += S[r, c].sum()
                counts[a, gi[r], pi[c]] += 1

    AssA, AssRe, AssPr = (np.zeros(na) for _ in range(3))
    for a in range(na):
        mc = counts[a]
        ass_a = mc / np.maximum(1, g_count + p_count - mc)
        AssA[a] = np.sum(mc * ass_a) / max(1, TP[a])
        AssRe[a] = np.sum(mc * (mc / np.maximum(1, g_count))) / max(1, TP[a])
        AssPr[a] = np.sum(mc * (mc / np.maximum(1, p_count))) / max(1, TP[a])
    LocA = np.maximum(1e-10, loc) / np.maximum(1e-10, TP)
    DetRe = TP / np.maximum(1, TP + FN)
    DetPr = TP / np.maximum(1, TP + FP)
    DetA = TP / np.maximum(1, TP + FN + FP)
    H = np.sqrt(DetA * AssA)
    per = dict(HOTA=H, DetA=DetA, AssA=AssA, DetRe=DetRe, DetPr=DetPr, AssRe=AssRe, AssPr=AssPr, LocA=LocA)
    return HotaReport(**{k: float(np.mean(v)) for k, v in per.items()}, alphas=alphas, per_alpha=per)


def clearmot(gt: TrackingData, pred: TrackingData, similarity: Similarity | str = "iou2d",
             threshold: float = 0.5) -> ClearMotReport:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    frames, ng, _ = _prepare(gt, pred, similarity)
    TP = FN = FP = IDSW = 0
    motp = 0.0
    prev_id = np.full(ng, np.nan)
    prev_step = np.full(ng, np.nan)
    for gi, pi, S in frames:
        if len(gi) == 0:
            FP += len(pi)
            continue
        if len(pi) == 0:
            FN += len(gi)
            continue
        score = 1000.0 * (pi[None, :] == prev_step[gi[:, None]]) + S
        score[S < threshold - _EPS] = 0.0
        rows, cols = linear_sum_assignment(-score)
        ok = score[rows, cols] > _EPS
        rows, cols = rows[ok], cols[ok]
        mg, mp = gi[rows], pi[cols]
        before = prev_id[mg]
        IDSW += int(np.sum(~np.isnan(before) & (mp != before)))
        prev_id[mg] = mp
        prev_step[:] = np.nan
        prev_step[mg] = mp
        m = len(rows)
        TP += m
        FN += len(gi) - m
        FP += len(pi) - m
        motp += float(S[rows, cols].sum())
    mota = (TP - FP - IDSW) / max(1, TP + FN)
    return ClearMotReport(float(mota), motp / max(1, TP), IDSW, FP, FN, TP)
