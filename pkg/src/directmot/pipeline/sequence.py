"""Sequence bundles: on-disk layout, lazy loading and writing.

Layout of a sequence directory::

    image_02/{frame:06}.png   8-bit gray or RGB
    depth/{frame:06}.png      16-bit depth in millimeters, 0 = invalid
    masks/{frame:06}.png      16-bit instance ids, 0 = background
    detections_2d.txt         frame left top right bottom score
    detections_3d.txt         frame h w l   (optional; i-th line of a frame
                              pairs with that frame's i-th 2D detection)
    calib.txt                 fx fy cx cy
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from ..geometry import CameraIntrinsics
from ..imaging import Frame, InstanceMask


@dataclass
class Detection2D:
    box: tuple[float, float, float, float]  # left, top, right, bottom
    score: float = 1.0
    dims: tuple[float, float, float] | None = None  # h, w, l prior


@dataclass
class FrameRecord:
    frame_id: int
    image_path: Path | None = None
    depth_path: Path | None = None
    mask_path: Path | None = None
    detections: list[Detection2D] = field(default_factory=list)
    arrays: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def read_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(image uint8, depth in meters, instance ids)."""
        if self.arrays is not None:
            return self.arrays
        img = cv2.imread(str(self.image_path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise FileNotFoundError(f"frame {self.frame_id}: cannot read image {self.image_path}")
        if img.ndim == 3:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        depth_raw = cv2.imread(str(self.depth_path), cv2.IMREAD_UNCHANGED)
        ids = cv2.imread(str(self.mask_path), cv2.IMREAD_UNCHANGED)
        if depth_raw is None or ids is None:
            raise FileNotFoundError(f"frame {self.frame_id}: cannot read depth or mask")
        return img, depth_raw.astype(float) / 1000.0, ids

    def load(self) -> Frame:
        img, depth, ids = self.read_arrays()
        if depth.shape != img.shape[:2] or ids.shape != img.shape[:2]:
            raise ValueError(f"frame {self.frame_id}: dimension mismatch between image, depth and mask")
        masks = [InstanceMask(ids == i) for i in np.unique(ids) if i != 0]
        return Frame(self.frame_id, img.astype(float), depth, masks,
                     [d.box for d in self.detections], [d.dims for d in self.detections])


@dataclass
class SequenceBundle:
    frames: list[FrameRecord]
    intrinsics: CameraIntrinsics
    sequence_id: str = "0000"

    def __len__(self) -> int:
        return len(self.frames)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def _read_rows(path: Path, ncols: int) -> list[list[float]]:
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.replace(",", " ").split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) < ncols:
            raise ValueError(f"{path.name}:{ln}: expected {ncols} fields, got {len(parts)}")
        rows.append([float(p) for p in parts[:ncols]])
    return rows


def load_sequence(root, config=None) -> SequenceBundle:
    """Index a sequence directory and validate it without decoding pixel data."""
    root = Path(root)
    calib = _read_rows(root / "calib.txt", 4)
    if not calib:
        raise ValueError("calib.txt is empty")
    fx, fy, cx, cy = calib[0]
    images = sorted((root / "image_02").glob("*.png"))
    if not images:
        raise FileNotFoundError(f"no images under {root / 'image_02'}")
    ids = [int(p.stem) for p in images]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError("frame ids must be strictly increasing")
    width, height = _image_size(images[0])

    dets: dict[int, list[Detection2D]] = defaultdict(list)
    det_file = root / "detections_2d.txt"
    if det_file.exists():
        for f, l, t, r, b, s in _read_rows(det_file, 6):
            dets[int(f)].append(Detection2D((l, t, r, b), s))
    dims_file = root / "detections_3d.txt"
    if dims_file.exists():
        seen: dict[int, int] = defaultdict(int)
        for f, h, w, l in _read_rows(dims_file, 4):
            f = int(f)
            k = seen[f]
            if k >= len(dets[f]):
                raise ValueError(f"detections_3d.txt: frame {f} has more 3D than 2D entries")
            dets[f][k].dims = (h, w, l)
            seen[f] += 1
    known = set(ids)
    for f in dets:
        if f not in known:
            raise ValueError(f"detections reference frame {f}, outside the {len(ids)}-frame sequence")

    records = []
    for fid, img in zip(ids, images):
        rec = FrameRecord(fid, img, root / "depth" / img.name, root / "masks" / img.name, dets.get(fid, []))
        for kind, p in (("depth", rec.depth_path), ("mask", rec.mask_path)):
            if not p.exists():
                raise FileNotFoundError(f"frame {fid}: missing {kind} file {p}")
            if _image_size(p) != (width, height):
                raise ValueError(f"frame {fid}: {kind} size {_image_size(p)} != image size {(width, height)}")
        if _image_size(img) != (width, height):
            raise ValueError(f"frame {fid}: image size differs from frame {ids[0]}")
        records.append(rec)
    K = CameraIntrinsics(fx, fy, cx, cy, width, height)
    return SequenceBundle(records, K, root.name)


def write_sequence(bundle: SequenceBundle, out_dir) -> Path:
    out = Path(out_dir)
    for sub in ("image_02", "depth", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    K = bundle.intrinsics
    (out / "calib.txt").write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
    det_lines, dim_lines = [], []
    for rec in bundle.frames:
        img, depth, ids = rec.read_arrays()
        name = f"{rec.frame_id:06d}.png"
        if img.ndim == 3:
            img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
        cv2.imwrite(str(out / "image_02" / name), img)
        cv2.imwrite(str(out / "depth" / name), np.clip(np.rint(depth * 1000.0), 0, 65535).astype(np.uint16))
        cv2.imwrite(str(out / "masks" / name), ids.astype(np.uint16))
        for d in rec.detections:
            det_lines.append(f"{rec.frame_id} {d.box[0]!r} {d.box[1]!r} {d.box[2]!r} {d.box[3]!r} {d.score!r}")
            if d.dims is not None:
                dim_lines.append(f"{rec.frame_id} {d.dims[0]!r} {d.dims[1]!r} {d.dims[2]!r}")
    (out / "detections_2d.txt").write_text("".join(s + "\n" for s in det_lines))
    if dim_lines:
        (out / "detections_3d.txt").write_text("".join(s + "\n" for s in dim_lines))
    return out
