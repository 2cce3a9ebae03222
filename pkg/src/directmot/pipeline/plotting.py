"""Figures for evaluation reports and track inspection (rendered off-screen to files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..geometry import CameraIntrinsics, Pose4DoF, project_points  # noqa: E402
from ..metrics.boxes import Box3D  # noqa: E402
from ..metrics.hota import HotaReport  # noqa: E402
from .synth import box_corners  # noqa: E402

# corner index pairs of the 12 cuboid edges, matching box_corners ordering
_EDGES = [(i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1]


def plot_hota_curves(report: HotaReport, path, title: str = "") -> Path:
    """HOTA, DetA and AssA against the similarity threshold alpha."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("HOTA", "DetA", "AssA", "LocA"):
        ax.plot(report.alphas, report.per_alpha[key], marker="o", ms=3, label=f"{key} {getattr(report, key):.3f}")
    ax.set_xlabel("alpha")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _color(track_id: int):
    return plt.get_cmap("tab10")(track_id % 10)


def plot_overlay(image: np.ndarray, boxes: list[tuple[int, Box3D]], K: CameraIntrinsics, path,
                 title: str = "") -> Path:
    """Project 3D boxes (camera frame) into the image and draw their edges with track ids."""
    h, w = image.shape[:2]
    fig = plt.figure(figsize=(w / 100.0, h / 100.0), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(image.astype(np.uint8) if image.ndim == 3 else image, cmap="gray", vmin=0, vmax=255)
    for tid, box in boxes:
        P = _corners(box)
        if np.any(P[:, 2] <= 0.1):
            continue
        uv, _ = project_points(P, K)
        c = _color(tid)
        for i, j in _EDGES:
            ax.plot(uv[[i, j], 0], uv[[i, j], 1], color=c, lw=1.2)
        ax.text(uv[:, 0].min(), uv[:, 1].min() - 2, str(tid), color=c, fontsize=8)
    if title:
        ax.text(4, 12, title, color="yellow", fontsize=8)
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _corners(box: Box3D) -> np.ndarray:
    return Pose4DoF(np.asarray(box.center, float), box.yaw).to_transform().apply(box_corners(box.dims))
