"""KITTI tracking label files.

One object per line::

    frame id type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]

``(x, y, z)`` is the bottom center of the box in camera coordinates; boxes
are converted to geometric centers on read.
"""

from __future__ import annotations

from pathlib import Path

from .boxes import Box2D, Box3D
from .hota import TrackedObject, TrackingData


def parse_line(line: str) -> tuple[int, TrackedObject] | None:
    parts = line.split()
    if not parts:
        return None
    if len(parts) < 17:
        raise ValueError(f"expected at least 17 fields, got {len(parts)}")
    frame, tid, cls = int(parts[0]), int(parts[1]), parts[2]
    l, t, r, b = map(float, parts[6:10])
    h, w, ln = map(float, parts[10:13])
    x, y, z, ry = map(float, parts[13:17])
    score = float(parts[17]) if len(parts) > 17 else None
    box3d = Box3D((x, y - h / 2.0, z), ry, (w, h, ln)) if min(h, w, ln) > 0 else None
    return frame, TrackedObject(tid, Box2D.from_ltrb(l, t, r, b), box3d, cls, score)


def read_kitti_tracking(path, classes: tuple[str, ...] | None = ("Car",), sequence_id: str | None = None,
                        n_frames: int | None = None) -> TrackingData:
    """Read one sequence's labels; ``classes=None`` keeps every type except DontCare."""
    path = Path(path)
    per_frame: dict[int, list[TrackedObject]] = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        try:
            parsed = parse_line(line)
        except ValueError as e:
            raise ValueError(f"{path.name}:{ln}: {e}") from None
        if parsed is None:
            continue
        frame, obj = parsed
        if obj.cls == "DontCare" or (classes is not None and obj.cls not in classes):
            continue
        per_frame.setdefault(frame, []).append(obj)
    n = max(per_frame, default=-1) + 1
    if n_frames is not None:
        n = max(n, n_frames)
    frames = [per_frame.get(f, []) for f in range(n)]
    return TrackingData(frames, sequence_id if sequence_id is not None else path.stem)
