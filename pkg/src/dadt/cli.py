"""``dadt`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure,
3 a self-check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dadt import __version__
from dadt.beam import generate_pseudo_low_beam
from dadt.bev import pool_object, rasterize
from dadt.boxes import CLASS_IDS, CLASS_NAMES, load_labels
from dadt.dataset import load_dataset
from dadt.fileio import atomic_write_bytes, atomic_write_json, atomic_write_text
from dadt.pointcloud import load_frame, write_frame

log = logging.getLogger("dadt")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3
GRAY = 128  # pixel value of a constant non-zero map


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def _provenance(command: str, args: argparse.Namespace, **extra) -> dict:
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k not in ("func", "corrupt", "verbose")}
    return {"tool_version": __version__, "command": command, "args": resolved, **extra}


def cmd_simulate(args) -> int:
    from dadt.simlidar import SceneRandomization, SceneSpec, make_dataset

    doc = json.loads(Path(args.scene).read_text()) if args.scene else {}
    ranges = doc.pop("randomization", {})
    if not isinstance(ranges, dict):
        raise ValueError("randomization must be an object")
    ranges = SceneRandomization(**{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in ranges.items()})
    out = make_dataset(SceneSpec.from_json(doc), args.frames, args.seed, args.out, ranges)
    print(f"wrote {args.frames} frames to {out}")
    return EXIT_OK


def cmd_resample(args) -> int:
    cloud = load_frame(args.input)
    pseudo = generate_pseudo_low_beam(cloud, args.source_beams, args.target_beams, args.seed)
    write_frame(pseudo.cloud, args.out)
    stats = {"source_beams": args.source_beams, "target_beams": args.target_beams,
             "points_in": len(cloud), "points_out": len(pseudo.cloud),
             "kept_beams": [int(b) for b in pseudo.kept_beams]}
    if pseudo.model is not None:
        stats["beam_counts"] = [int(c) for c in pseudo.model.counts()]
        stats["beam_centers"] = [float(c) for c in pseudo.model.centers]
        stats["inertia"] = float(pseudo.model.inertia)
    if args.stats:
        atomic_write_json(args.stats, _provenance("resample", args, stats=stats))
    atomic_write_json(_sidecar(args.out), _provenance("resample", args))
    print(f"kept {len(stats['kept_beams'])} beams, {stats['points_out']}/{stats['points_in']} points")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from dadt import config as cfgmod
    from dadt.distill.train import load_teacher, train

    rc = cfgmod.load(args.config)
    train_cfg = rc.train if args.mode is None else replace(rc.train, mode=args.mode)
    data = args.data or rc.paths.data
    teacher_path = args.teacher if args.teacher is not None else rc.paths.teacher
    if teacher_path in ("none", ""):
        teacher_path = None
    if data is None:
        raise ValueError("no training data: pass --data or set paths.data")
    if train_cfg.mode == "dadt" and teacher_path is None:
        raise ValueError("dadt mode needs a teacher checkpoint (--teacher)")
    if train_cfg.mode == "vanilla" and rc.explicit & {"loss.lambda_c", "loss.lambda_o"}:
        log.warning("vanilla mode ignores loss.lambda_c and loss.lambda_o")
    rc = replace(rc, train=train_cfg, paths=cfgmod.PathsConfig(str(data), teacher_path))
    teacher = load_teacher(teacher_path) if teacher_path else None
    result, report = train(data, train_cfg, teacher, args.out,
                           resolved_config=rc.to_json())
    print(f"final loss {report.loss_curve[-1]['total']:.6f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def _rows_to_csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_eval(args) -> int:
    from dadt import config as cfgmod
    from dadt.distill.evaluate import evaluate

    rc = cfgmod.load(args.config)
    ev = rc.eval
    report = evaluate(args.ckpt, args.data, ev.thresholds_by_id(), ev.score_threshold,
                      ev.nms_iou)
    atomic_write_text(args.report, _rows_to_csv(report.csv_rows()))
    atomic_write_json(_sidecar(args.report),
                      _provenance("eval", args, config=rc.to_json()))
    for name, ap in report.ap.items():
        print(f"{name:<11s} AP {ap:8.3f}")
    print(f"{'mAP':<11s}    {report.map:8.3f}")
    return EXIT_OK


def context_map(checkpoint, cloud, boxes, class_id: int) -> np.ndarray:
    """Similarity map of the class's pooled features against the BEV features."""
    from dadt.distill.model import forward
    from dadt.losses import context_similarity_map

    spec = checkpoint.grid
    F, _ = forward(rasterize(cloud, spec), checkpoint.state)
    zs = [pool_object(F, b, spec) for b in boxes
          if b.class_id == class_id and spec.contains_xy(b.cx, b.cy)]
    if not zs:
        raise ValueError(f"class {CLASS_NAMES[class_id]!r} has no object inside the grid")
    return context_similarity_map(np.stack(zs), F)


def to_pgm(m: np.ndarray) -> tuple[bytes, float, float]:
    """8-bit P5 image of ``m`` (rows along x), min-max normalized.

    A constant map renders mid-gray, or black when it is zero everywhere.
    """
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        pix = np.rint((m - lo) / (hi - lo) * 255.0)
    else:
        pix = np.full(m.shape, 0 if hi == 0 else GRAY)
    H, W = m.shape
    return f"P5\n{W} {H}\n255\n".encode() + pix.astype(np.uint8).tobytes(), lo, hi


def cmd_export_context(args) -> int:
    from dadt.distill.model import load_checkpoint

    if args.class_name not in CLASS_IDS:
        raise ValueError(f"unknown class {args.class_name!r}; expected one of {CLASS_NAMES}")
    ckpt = load_checkpoint(args.ckpt)
    m = context_map(ckpt, load_frame(args.frame), load_labels(args.labels),
                    CLASS_IDS[args.class_name])
    data, lo, hi = to_pgm(m)
    atomic_write_bytes(args.out, data)
    atomic_write_json(_sidecar(args.out), _provenance("export-context", args, bounds=[lo, hi],
                                                      shape=list(m.shape)))
    print(f"wrote {args.out} ({m.shape[0]}x{m.shape[1]}), bounds [{lo:.6g}, {hi:.6g}]")
    return EXIT_OK


def feature_rows(checkpoint, frames) -> list[list]:
    from dadt.distill.model import forward

    spec = checkpoint.grid
    d = checkpoint.state.encoder.d
    rows = [["frame_id", "class"] + [f"z{i}" for i in range(d)]]
    for frame in frames:
        F, _ = forward(rasterize(frame.cloud, spec), checkpoint.state)
        for b in frame.boxes:
            if spec.contains_xy(b.cx, b.cy):
                rows.append([frame.frame_id, b.class_name]
                            + [repr(float(v)) for v in pool_object(F, b, spec)])
    return rows


def cmd_export_features(args) -> int:
    from dadt.distill.model import load_checkpoint

    rows = feature_rows(load_checkpoint(args.ckpt), load_dataset(args.data))
    atomic_write_text(args.out, _rows_to_csv(rows))
    atomic_write_json(_sidecar(args.out), _provenance("export-features", args))
    print(f"wrote {len(rows) - 1} feature rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from dadt import gradcheck

    results = gradcheck.run(args.seed, args.instances, corrupt=args.corrupt)
    for r in results:
        flag = "ok" if r.ok else "FAIL"
        print(f"{r.component:<10s} max rel err {r.max_rel_error:.3e}  "
              f"({r.instances} instances, {r.entries} entries)  {flag}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


class _Parser(argparse.ArgumentParser):
    # usage mistakes are invalid input, not I/O failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dadt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic labeled dataset")
    s.add_argument("--scene", help="scene JSON (sensor fields, optional 'randomization')")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("resample", help="pseudo low-beam version of one frame")
    s.add_argument("--input", required=True)
    s.add_argument("--source-beams", type=int, required=True)
    s.add_argument("--target-beams", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--stats", help="write per-beam statistics JSON here")
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("train", help="finetune a student (or train from scratch)")
    s.add_argument("--config", help="run config JSON; defaults when omitted")
    s.add_argument("--data", help="dataset directory (overrides paths.data)")
    s.add_argument("--teacher", help="teacher checkpoint, or 'none'")
    s.add_argument("--mode", choices=("vanilla", "dadt"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="40-point AP of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="CSV output")
    s.add_argument("--config", help="run config JSON (eval section is used)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-context", help="context similarity heatmap as PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--frame", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--class", dest="class_name", required=True, choices=CLASS_NAMES)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_context)

    s = sub.add_parser("export-features", help="pooled object features as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_features)

    s = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--corrupt", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError, ArithmeticError) as e:
        print(f"dadt {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"dadt {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
