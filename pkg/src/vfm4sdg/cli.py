"""Command-line front end.

Every subcommand prints a small aligned table for humans and can write
the full machine-readable report as JSON. Reports are deterministic:
identical inputs (and seed, where one applies) produce byte-identical
JSON. All failures exit non-zero with a single parsable line of the form
``ERROR:<module>:<kind>: message``.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import (
    DEFAULT_BETA,
    DEFAULT_HEADS,
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_LAMBDA,
    DEFAULT_SCORE_THRESHOLD,
    RunConfig,
)
from .errors import ConfigurationError, VfmError
from .io import dump_json

_MODULE = "cli"


def _parse_levels(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigurationError(_MODULE, f"bad --levels value {text!r}") from exc


def _parse_floats(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigurationError(_MODULE, f"bad float list {text!r}") from exc


def _emit(report: dict, out_path) -> None:
    if out_path:
        dump_json(report, out_path)


def _cmd_distill_loss(args) -> int:
    levels = _parse_levels(args.levels) if args.levels else None
    sweep = _parse_floats(args.lambda_sweep) if args.lambda_sweep else None
    report = pipeline.distill_loss_report(
        student_paths=args.students,
        teacher_path=args.teacher,
        levels=levels,
        beta=args.beta,
        lambda_=args.lambda_,
        det_loss=args.det_loss,
        lambda_sweep=sweep,
    )
    print(f"{'level':<8}{'loss':>16}")
    for level, value in sorted(report["levels"].items(), key=lambda kv: int(kv[0])):
        print(f"{level:<8}{value:>16.10f}")
    print(f"{'total':<8}{report['distill_loss']:>16.10f}")
    if "total_loss" in report:
        print(f"combined: det {report['det_loss']} + lambda {report['lambda']} -> {report['total_loss']:.10f}")
    if "lambda_sweep" in report:
        for entry in report["lambda_sweep"]:
            print(f"lambda {entry['lambda']:<6} total {entry['total_loss']:.10f}")
    _emit(report, args.out)
    return 0


def _cmd_build_prototypes(args) -> int:
    config = RunConfig()
    report = pipeline.build_prototypes_report(
        features_dir=args.features_dir,
        annotations_path=args.annotations,
        out_path=args.out,
        threads=config.threads,
    )
    print(f"bank written to {report['bank_path']}")
    print(f"{'category':<12}{'name':<12}{'instances':>10}")
    for cid, info in sorted(report["categories"].items(), key=lambda kv: int(kv[0])):
        print(f"{cid:<12}{info['name']:<12}{info['instances']:>10}")
    print(f"K = {report['num_categories']}, channels = {report['channels']}")
    _emit(report, args.report)
    return 0


def _cmd_enhance_queries(args) -> int:
    report = pipeline.enhance_queries_report(
        queries_path=args.queries,
        bank_path=args.bank,
        teacher_path=args.teacher,
        out_path=args.out,
        heads=args.heads,
        seed=args.seed,
        params_dir=args.params_dir,
        save_params_dir=args.save_params_dir,
    )
    print(f"enhanced queries written to {report['out_path']}")
    print(f"stage {report['stage']}, shape {report['shape']}, params {report['params_source']}")
    _emit(report, args.report)
    return 0


def _cmd_eval_map(args) -> int:
    report = pipeline.eval_map_report(
        detections_path=args.detections,
        ground_truth_path=args.ground_truth,
        iou_threshold=args.iou_threshold,
    )
    print(f"{'class':<8}{'name':<12}{'AP':>10}")
    for cid, entry in sorted(report["per_class_ap"].items(), key=lambda kv: int(kv[0])):
        print(f"{cid:<8}{entry['name']:<12}{entry['ap']:>10.4f}")
    print(f"{'mAP@' + format(args.iou_threshold, 'g'):<20}{report['map50']:>10.4f}")
    _emit(report, args.out)
    return 0


def _cmd_analyze_errors(args) -> int:
    domains = [d for d in args.domains.split(",")] if args.domains else None
    report = pipeline.analyze_errors_report(
        detections_path=args.detections,
        ground_truth_path=args.ground_truth,
        score_threshold=args.score_threshold,
        iou_threshold=args.iou_threshold,
        domains=domains,
    )
    print(f"{'domain':<14}{'fn':>8}{'confusion':>11}{'fp':>8}{'mAP':>8}")
    for entry in report["domains"]:
        tag = entry["domain_tag"] or "(untagged)"
        print(
            f"{tag:<14}{entry['fn_rate']:>8.3f}{entry['confusion_rate']:>11.3f}"
            f"{entry['fp_rate']:>8.3f}{entry['map50']:>8.3f}"
        )
    _emit(report, args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    report = pipeline.gradcheck_report(seed=args.seed, instances=args.instances)
    status = "passed" if report["passed"] else "FAILED"
    print(
        f"gradient suite {status}: {report['num_checks']} checks "
        f"in {report['elapsed_seconds']:.1f}s (tol {report['tol']:g})"
    )
    if not report["passed"]:
        for name, entry in report["checks"].items():
            if not entry["passed"]:
                print(f"  FAIL {name}: max rel error {entry['max_rel_error']:.3e}")
    _emit(report, args.out)
    return 0 if report["passed"] else 1


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfm4sdg",
        description="Relational distillation, prototype banks, query enhancement, and detection metrics over dumped tensors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill-loss", help="multi-level relational distillation loss")
    p.add_argument("students", nargs="+", help="per-level student tensor files, level 0 first")
    p.add_argument("--teacher", required=True, help="teacher tensor file (C x H x W)")
    p.add_argument("--levels", default=None, help="comma list of level indices (default: all given)")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--lambda", dest="lambda_", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--det-loss", type=float, default=None, help="detection loss to combine with")
    p.add_argument("--lambda-sweep", default=None, help="comma list of weights to sweep")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=_cmd_distill_loss)

    p = sub.add_parser("build-prototypes", help="build and save a category prototype bank")
    p.add_argument("--features-dir", required=True, help="directory of <image_id>.vfmt teacher dumps")
    p.add_argument("--annotations", required=True, help="annotation JSON (images/annotations/categories)")
    p.add_argument("--out", required=True, help="bank output path (tensor + .json sidecar)")
    p.add_argument("--report", default=None, help="write the JSON summary here")
    p.set_defaults(func=_cmd_build_prototypes)

    p = sub.add_parser("enhance-queries", help="run prototype- and teacher-guided query enhancement")
    p.add_argument("--queries", required=True, help="query tensor file (N_q x C_q)")
    p.add_argument("--bank", required=True, help="prototype bank path")
    p.add_argument("--teacher", required=True, help="teacher tensor file (C x H x W)")
    p.add_argument("--out", required=True, help="enhanced query tensor output path")
    p.add_argument("--heads", type=int, default=DEFAULT_HEADS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params-dir", default=None, help="load parameters from this directory")
    p.add_argument("--save-params-dir", default=None, help="save the used parameters here")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.set_defaults(func=_cmd_enhance_queries)

    p = sub.add_parser("eval-map", help="per-class AP and mAP at an IoU threshold")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--iou-threshold", type=float, default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval_map)

    p = sub.add_parser("analyze-errors", help="miss/spurious/confusion rates per domain")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--score-threshold", type=float, default=DEFAULT_SCORE_THRESHOLD)
    p.add_argument("--iou-threshold", type=float, default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--domains", default=None, help="comma list fixing the severity order")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_analyze_errors)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VfmError as exc:
        print(exc.cli_line(), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
