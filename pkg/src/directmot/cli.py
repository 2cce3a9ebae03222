"""Command line entry point: ``directmot {track,eval,synth,render-overlay}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .metrics.hota import SIMILARITIES, clearmot, hota
from .metrics.kitti import read_kitti_tracking

logger = logging.getLogger("directmot")


def _cmd_track(args) -> int:
    from .pipeline.config import PipelineConfig, dump_config, load_config
    from .pipeline.output import write_kitti_tracks
    from .pipeline.sequence import load_sequence
    from .pipeline.tracker import run_sequence

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.parallelism is not None:
        cfg.tracker = dataclasses.replace(cfg.tracker, parallelism=args.parallelism)
    out = Path(args.out or cfg.output_dir or ".")
    bundle = load_sequence(args.sequence, cfg)
    rows = run_sequence(bundle, cfg)
    path = write_kitti_tracks(rows, out / f"{bundle.sequence_id}.txt")
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"frames={len(bundle)}")
    print(f"records={len(rows)}")
    print(f"tracks={len({r.track_id for r in rows})}")
    print(f"output={path}")
    return 0


def _cmd_eval(args) -> int:
    gt = read_kitti_tracking(args.gt, sequence_id="")
    pred = read_kitti_tracking(args.pred, sequence_id="", n_frames=len(gt.frames))
    rep = hota(gt, pred, args.similarity)
    print(f"HOTA ({args.similarity}) on {args.gt}")
    print("  " + "  ".join(f"{k} {v * 100:7.3f}" for k, v in rep.as_dict().items()))
    values = {f"hota.{k}": v for k, v in rep.as_dict().items()}
    if args.clearmot:
        cm = clearmot(gt, pred, args.similarity)
        print("CLEARMOT")
        print(f"  MOTA {cm.MOTA * 100:7.3f}  MOTP {cm.MOTP * 100:7.3f}  IDSW {cm.IDSW}  FP {cm.FP}  FN {cm.FN}")
        values.update({f"clearmot.{k}": v for k, v in cm.as_dict().items()})
    for k, v in values.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    if args.plot:
        from .pipeline.plotting import plot_hota_curves

        path = plot_hota_curves(rep, args.plot, title=f"HOTA-{args.similarity}")
        print(f"figure={path}")
    return 0


_SCENARIO_KEYS = ("n_frames", "width", "height", "fx", "fy", "cx", "cy", "noise_sigma", "background_depth",
                  "background_seed", "seed", "color", "dims_prior", "sequence_id", "supersample")
_OBJECT_KEYS = ("dims", "center", "yaw", "velocity", "yaw_rate", "texture_seed")


def _value(raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        parts = [float(p) for p in raw.replace(",", " ").split()]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} numbers, got {raw!r}")
        return tuple(parts)
    return type(default)(raw)


def parse_scenario(text: str):
    """``key = value`` lines; objects are ``object.<k>.<field>`` with k counting from 0."""
    from .pipeline.synth import Scenario, SynthObject

    sc = Scenario(objects=[])
    objects: dict[int, dict] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        try:
            if len(parts) == 1 and key in _SCENARIO_KEYS:
                setattr(sc, key, _value(raw, getattr(sc, key)))
            elif len(parts) == 3 and parts[0] == "object" and parts[2] in _OBJECT_KEYS:
                objects.setdefault(int(parts[1]), {})[parts[2]] = _value(raw, getattr(SynthObject(), parts[2]))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise ValueError(f"line {ln}: {e}") from None
    sc.objects = [SynthObject(**objects[k]) for k in sorted(objects)] or [SynthObject()]
    return sc


def _cmd_synth(args) -> int:
    from .pipeline.output import ground_truth_rows, write_kitti_tracks
    from .pipeline.sequence import write_sequence
    from .pipeline.synth import synth_generate

    sc = parse_scenario(Path(args.spec).read_text())
    bundle, gt = synth_generate(sc)
    out = write_sequence(bundle, args.out)
    gt_path = write_kitti_tracks(ground_truth_rows(gt), Path(args.out) / "gt_tracks.txt")
    print(f"frames={len(bundle)}")
    print(f"objects={len(sc.objects)}")
    print(f"sequence={out}")
    print(f"ground_truth={gt_path}")
    return 0


def _cmd_overlay(args) -> int:
    from .pipeline.plotting import plot_overlay
    from .pipeline.sequence import load_sequence

    bundle = load_sequence(args.sequence)
    tracks = read_kitti_tracking(args.tracks, classes=None, n_frames=len(bundle))
    out = Path(args.out)
    n = 0
    for rec in bundle.frames:
        img, _, _ = rec.read_arrays()
        objs = tracks.frames[rec.frame_id] if rec.frame_id < len(tracks.frames) else []
        boxes = [(o.track_id, o.box3d) for o in objs if o.box3d is not None]
        plot_overlay(img, boxes, bundle.intrinsics, out / f"{rec.frame_id:06d}.png", title=f"frame {rec.frame_id}")
        n += 1
    print(f"figures={n}")
    print(f"output={out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="directmot", description="Direct 3D multi-object tracking from images and depth")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="run the tracker on a sequence directory")
    t.add_argument("sequence")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--parallelism", type=int)
    t.set_defaults(func=_cmd_track)

    e = sub.add_parser("eval", help="HOTA (and CLEARMOT) of a KITTI-format track file")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--similarity", choices=sorted(SIMILARITIES), default="giou3d")
    e.add_argument("--clearmot", action="store_true")
    e.add_argument("--plot", help="write a HOTA-vs-alpha figure to this file")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="render a synthetic sequence and its ground truth")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    r = sub.add_parser("render-overlay", help="draw tracked 3D boxes onto the sequence images")
    r.add_argument("sequence")
    r.add_argument("--tracks", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_overlay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
