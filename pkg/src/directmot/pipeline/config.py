"""Pipeline configuration: nested dataclasses read from a ``section.key = value`` file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..alignment import AlignmentConfig
from ..association import AssociationConfig
from ..detection import RefinementConfig
from ..window_ba import BAConfig


@dataclass
class DetectionConfig:
    bev_cell: float = 0.15
    bev_min_count: int = 1
    bev_trim: float = 0.01  # quantile cut on each side of the point extents
    bev_margin_px: float = 2.5  # selected points keep this distance from the mask edge
    car_height: float = 1.53
    match_iou: float = 0.3  # 2D detection to mask-box pairing


@dataclass
class TrackerConfig:
    s_min: float = 16.0
    parallelism: int = 1
    fallback_2d: bool = True


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    assoc: AssociationConfig = field(default_factory=AssociationConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    detect: DetectionConfig = field(default_factory=DetectionConfig)
    refine: RefinementConfig = field(default_factory=RefinementConfig)
    output_dir: str = ""


_SECTIONS = ("tracker", "align", "assoc", "ba", "detect", "refine")

_NOTES = {
    "assoc.min_iou": "minimum 2D IoU for a mask-to-track match",
    "assoc.age_max": "frames a track may stay unmatched",
    "ba.capacity": "keyframes in the sliding window",
    "ba.keyframe_threshold": "meters of accumulated translation between keyframes",
    "refine.w1": "3D-2D box term weight",
    "refine.w2": "3D-3D point term weight cap",
    "refine.w3": "regularizer weight",
    "refine.lam": "dynamic weight knee",
    "align.huber_photo": "intensity levels",
    "tracker.parallelism": "worker threads for per-object stages",
}


def _convert(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> PipelineConfig:
    """Build a config from ``key = value`` lines; unknown keys raise ValueError."""
    cfg = PipelineConfig()
    values: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "output_dir":
            cfg.output_dir = raw
            continue
        section, _, name = key.partition(".")
        if section not in values:
            raise ValueError(f"line {ln}: unknown key {key!r}")
        defaults = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(defaults)}
        if name not in names:
            raise ValueError(f"line {ln}: unknown key {key!r}")
        values[section][name] = _convert(raw, getattr(defaults, name), key)
    for section, kv in values.items():
        if kv:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **kv))
    if cfg.tracker.parallelism < 1:
        raise ValueError("tracker.parallelism must be at least 1")
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: PipelineConfig | None = None) -> str:
    """Render every key with its value; the output parses back to the same config."""
    cfg = cfg or PipelineConfig()
    lines = []
    for section in _SECTIONS:
        lines.append(f"# [{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            key = f"{section}.{f.name}"
            value = getattr(getattr(cfg, section), f.name)
            note = _NOTES.get(key)
            lines.append(f"{key} = {value}" + (f"  # {note}" if note else ""))
    if cfg.output_dir:
        lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"
