"""Command-line entry point: ``weakseg <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .annotate import (
    AnnotationPlan,
    compute_presegmentation,
    read_annotations,
    simulate_annotations,
    write_annotations,
)
from .experiment import (
    ExperimentConfig,
    emit_reports,
    load_config,
    run_grid,
    significance,
    smoke_config,
    build_cohort,
    presegment_cohort,
)
from .fusion import segment_weak
from .phantom import default_spec, generate_cohort, load_cohort, save_cohort
from .qc import AtlasDatabase, QCConfig, detection_scores, dice, filter_database, write_qc_report
from .volgrid import write_volume


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("dims must be X,Y,Z with positive integers")
    nx, ny, nz = parts
    return nz, ny, nx


def _plan_args(p: argparse.ArgumentParser, types=("rr", "bd", "ps")):
    p.add_argument("--type", choices=types, default="rr")
    p.add_argument("--ar", type=float, default=1.0)
    p.add_argument("--err", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)


def _locate_subject(path: Path):
    # a subject is addressed by its image header inside a cohort directory
    db = load_cohort(path.parent)
    for s in db.subjects:
        if f"subject_{s.id:03d}.mhd" == path.name:
            return db, s
    raise ValueError(f"{path} is not a subject image listed in {path.parent / 'cohort.txt'}")


def _annotated(subject, args):
    plan = AnnotationPlan(args.ar, args.err, args.type, seed=args.seed)
    preseg = compute_presegmentation(subject.volume) if args.type == "ps" else None
    return simulate_annotations(subject, plan, preseg)


def cmd_gen_cohort(args) -> int:
    db = generate_cohort(default_spec(args.dims), args.count, args.seed)
    path = save_cohort(db, args.out)
    print(f"wrote {len(db)} subjects to {path}")
    return 0


def cmd_annotate(args) -> int:
    _, subject = _locate_subject(Path(args.subject))
    path = write_annotations(args.out, _annotated(subject, args))
    print(f"wrote {path}")
    return 0


def cmd_segment(args) -> int:
    _, subject = _locate_subject(Path(args.subject))
    if args.annotations:
        sid, anns = read_annotations(args.annotations)
        if sid != subject.id:
            raise ValueError(f"annotations belong to subject {sid}, not {subject.id}")
        subject = subject.with_annotations(anns)
    else:
        subject = _annotated(subject, args)
    result = segment_weak(subject)
    out = write_volume(args.out, result.mask.astype("u1"), subject.volume.spacing)
    status = "failed (no samples)" if result.failed else f"dsc {dice(result.mask, subject.target_mask):.4f}"
    print(f"wrote {out}: {status}")
    return 0


def cmd_qc(args) -> int:
    db = load_cohort(args.db)
    subjects = []
    for s in db.subjects:
        manifest = Path(args.db) / f"annotations_{s.id:03d}.txt"
        if manifest.exists():
            subjects.append(s.with_annotations(read_annotations(manifest)[1]))
        else:
            subjects.append(_annotated(s, args))
    cfg = QCConfig(n_similar=args.n_similar, n_iterations=args.n_iterations)
    _, records = filter_database(AtlasDatabase(subjects), cfg)
    write_qc_report(args.report, records)
    precision, recall = detection_scores(records)
    rejected = sum(r.rejected for r in records)
    print(f"{rejected}/{len(records)} rejected; precision {precision:.3f} recall {recall:.3f}")
    return 0


def cmd_run(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = smoke_config() if args.smoke else ExperimentConfig()
    db = build_cohort(cfg)
    presegs = presegment_cohort(cfg, db) if "ps" in cfg.types else None

    def progress(t, ar, err, cell):
        if not args.quiet:
            print(f"{t} ar={ar:g} err={err:g} mean={cell.mean:.4f}", file=sys.stderr)

    raw = run_grid(cfg, False, db, presegs, progress)
    matrices, tests = {"raw": raw}, {}
    if args.corrected:
        corrected = run_grid(cfg, True, db, presegs, progress)
        matrices["corrected"] = corrected
        tests = significance(corrected, raw)
    written = emit_reports(matrices, tests, args.out, cfg)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-cohort", help="generate a phantom cohort")
    p.add_argument("--count", type=int, default=30)
    p.add_argument("--dims", type=_dims, default=(64, 64, 64), help="X,Y,Z")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_cohort)

    p = sub.add_parser("annotate", help="simulate weak annotations for one subject")
    p.add_argument("--subject", required=True, help="subject image header in a cohort directory")
    _plan_args(p, ("sc", "rr", "bd", "ps"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("segment", help="segment one subject from weak annotations")
    p.add_argument("--subject", required=True, help="subject image header in a cohort directory")
    _plan_args(p, ("sc", "rr", "bd", "ps"))
    p.add_argument("--annotations", help="annotation manifest to use instead of simulating")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("qc", help="detect erroneous annotations in a cohort")
    p.add_argument("--db", required=True, help="cohort directory")
    p.add_argument("--report", required=True)
    _plan_args(p, ("sc", "rr", "bd", "ps"))
    p.add_argument("--n-similar", type=int, default=30)
    p.add_argument("--n-iterations", type=int, default=2)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("run", help="run the AR x ERR experiment grid")
    p.add_argument("--config")
    p.add_argument("--smoke", action="store_true", help="use the small smoke profile")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--corrected", action="store_true", help="also run with outlier correction")
    mode.add_argument("--raw", dest="corrected", action="store_false")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"weakseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
