"""KITTI tracking label writer for tracker outputs and synthetic ground truth."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from ..geometry import wrap_angle
from ..metrics.boxes import Box3D
from .tracker import FrameOutput


def kitti_line(frame: int, track_id: int, box2d, center, yaw: float, dims, score: float = 1.0,
               cls: str = "Car") -> str:
    """One label line; ``center`` is the geometric center, ``dims`` is (w, h, l)."""
    w, h, l = (float(d) for d in dims)
    x, y, z = (float(c) for c in center)
    ry = wrap_angle(float(yaw))
    alpha = wrap_angle(ry - np.arctan2(x, z))
    vals = [alpha, *map(float, box2d), h, w, l, x, y + h / 2.0, z, ry, score]
    return f"{frame} {track_id} {cls} -1 -1 " + " ".join(f"{v:.6f}" for v in vals)


def _line(row) -> tuple[tuple[int, int], str]:
    if isinstance(row, FrameOutput):
        d = row.box3d
        return (row.frame_id, row.track_id), kitti_line(row.frame_id, row.track_id, row.box2d, d.center, d.yaw,
                                                         d.dims)
    frame, tid, box2d, box3d = row[:4]
    score = row[4] if len(row) > 4 else 1.0
    if not isinstance(box3d, Box3D):
        raise TypeError("expected FrameOutput or (frame, id, ltrb, Box3D[, score])")
    return (frame, tid), kitti_line(frame, tid, box2d, box3d.center, box3d.yaw, box3d.dims, score)


def write_kitti_tracks(rows: Iterable, path) -> Path:
    """Write rows sorted by (frame, id); a repeated (frame, id) pair raises ValueError."""
    keyed = [_line(r) for r in rows]
    keyed.sort(key=lambda kv: kv[0])
    keys = [k for k, _ in keyed]
    if len(keys) != len(set(keys)):
        raise ValueError("more than one record for a (frame, id) pair")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for _, line in keyed))
    return path


def ground_truth_rows(gt) -> list[tuple]:
    """Synthetic ground truth as writer rows."""
    return [(t, tid, b2, box) for t, objs in enumerate(gt.frames) for tid, box, b2 in objs]
