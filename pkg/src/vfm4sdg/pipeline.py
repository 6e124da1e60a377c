"""Report-producing pipeline entry points.

The CLI subcommands and the HTTP service both delegate here; every
function takes plain paths/values and returns a JSON-serializable dict,
so reports are identical no matter which front end produced them.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as tio
from .checks import gradient_suite
from .config import RunConfig
from .distill import FeaturePyramid, TeacherFeature, combine_losses, csrpd_loss, per_level_losses
from .enhance import QuerySet, init_enhancer_params, load_params, save_params, scpqe
from .errors import ContractViolation, LookupFailure
from .metrics import domain_sweep, error_taxonomy, evaluate_detections
from .prototypes import build_bank_from_set, load_bank, save_bank
from .tensor import Tensor

_MODULE = "pipeline"


def _load_teacher(path) -> TeacherFeature:
    tensor = tio.read_tensor(path)
    return TeacherFeature(map=tensor.data, source_tag=str(path))


def distill_loss_report(
    student_paths: Sequence,
    teacher_path,
    levels: Optional[Sequence[int]] = None,
    beta: float = 1.0,
    lambda_: float = 1.0,
    det_loss: Optional[float] = None,
    lambda_sweep: Optional[Sequence[float]] = None,
) -> dict:
    """Distillation loss of per-level student maps against one teacher map."""
    RunConfig(lambda_=lambda_, beta=beta)  # validates both ranges
    if not student_paths:
        raise ContractViolation(_MODULE, "need at least one student tensor file")
    teacher = _load_teacher(teacher_path)
    maps = [tio.read_tensor(p) for p in student_paths]
    pyramid = FeaturePyramid(levels=list(enumerate(maps)))
    selected = sorted(set(levels)) if levels else pyramid.indices()
    breakdown = per_level_losses(pyramid, teacher, levels=selected, beta=beta)
    total = csrpd_loss(pyramid, teacher, levels=selected, beta=beta)
    report = {
        "teacher": {"path": str(teacher_path), "shape": list(teacher.map.shape)},
        "levels": {str(k): v for k, v in breakdown.items()},
        "distill_loss": float(total.data),
        "beta": beta,
        "lambda": lambda_,
    }
    if det_loss is not None:
        combined = combine_losses(Tensor(np.asarray(float(det_loss))), total, lambda_)
        report["det_loss"] = float(det_loss)
        report["total_loss"] = float(combined.data)
    if lambda_sweep:
        sweep = []
        for w in lambda_sweep:
            base = float(det_loss) if det_loss is not None else 0.0
            combined = combine_losses(Tensor(np.asarray(base)), total, float(w))
            sweep.append({"lambda": float(w), "total_loss": float(combined.data)})
        report["lambda_sweep"] = sweep
    return report


def build_prototypes_report(features_dir, annotations_path, out_path, threads: int = 1) -> dict:
    """Build a prototype bank from per-image feature dumps and save it.

    Feature files are looked up as ``<features_dir>/<image_id>.vfmt``.
    """
    ann_set = tio.parse_annotations(annotations_path)
    features_dir = Path(features_dir)
    teacher_features = {}
    needed = sorted({ann.image_id for ann in ann_set.annotations})
    for image_id in needed:
        path = features_dir / f"{image_id}.vfmt"
        if not path.exists():
            raise LookupFailure(_MODULE, f"no feature file for image_id {image_id} at {path}")
        teacher_features[image_id] = _load_teacher(path)
    bank = build_bank_from_set(teacher_features, ann_set, threads=threads)
    save_bank(bank, out_path)
    names = {c.id: c.name for c in ann_set.categories}
    return {
        "bank_path": str(out_path),
        "num_categories": bank.num_categories,
        "channels": bank.channels,
        "categories": {
            str(cid): {"name": names.get(cid, ""), "instances": count}
            for cid, count in zip(bank.category_ids, bank.instance_counts)
        },
    }


def enhance_queries_report(
    queries_path,
    bank_path,
    teacher_path,
    out_path,
    heads: int = 8,
    seed: int = 0,
    params_dir=None,
    save_params_dir=None,
) -> dict:
    """Run the two-stage query enhancement and write the result tensor."""
    RunConfig(heads=heads, seed=seed)
    queries = tio.read_tensor(queries_path)
    bank = load_bank(bank_path)
    teacher = _load_teacher(teacher_path)
    if params_dir is not None:
        params = load_params(params_dir)
    else:
        params = init_enhancer_params(
            query_width=queries.shape[1], teacher_width=bank.channels, heads=heads, seed=seed
        )
    result = scpqe(QuerySet(queries=queries), bank, teacher, params)
    tio.write_tensor(out_path, result.queries.data)
    if save_params_dir is not None:
        save_params(params, save_params_dir)
    return {
        "queries_path": str(queries_path),
        "out_path": str(out_path),
        "stage": result.stage_tag,
        "shape": list(result.queries.shape),
        "heads": params.heads,
        "seed": seed,
        "params_source": str(params_dir) if params_dir is not None else f"seed:{seed}",
    }


def eval_map_report(detections_path, ground_truth_path, iou_threshold: float = 0.5) -> dict:
    """Per-class AP at the given IoU threshold plus the class mean."""
    RunConfig(iou_threshold=iou_threshold)
    detections = tio.parse_detections(detections_path)
    ann_set = tio.parse_annotations(ground_truth_path)
    scored = evaluate_detections(detections, ann_set.annotations, iou_threshold)
    names = {c.id: c.name for c in ann_set.categories}
    return {
        "iou_threshold": iou_threshold,
        "per_class_ap": {
            str(cid): {"name": names.get(cid, ""), "ap": ap}
            for cid, ap in sorted(scored["per_class_ap"].items())
        },
        "map50": scored["map50"],
        "num_detections": len(detections),
        "num_ground_truth": len(ann_set.annotations),
    }


def analyze_errors_report(
    detections_path,
    ground_truth_path,
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
    domains: Optional[Sequence[str]] = None,
) -> dict:
    """Error taxonomy per domain, ordered along the given severity axis."""
    RunConfig(score_threshold=score_threshold, iou_threshold=iou_threshold)
    detections = tio.parse_detections(detections_path)
    ann_set = tio.parse_annotations(ground_truth_path)

    seen: list = []
    for im in ann_set.images:
        if im.domain_tag not in seen:
            seen.append(im.domain_tag)
    ordering = list(domains) if domains else seen

    per_domain = {}
    for tag in set(ordering):
        image_ids = {im.id for im in ann_set.images if im.domain_tag == tag}
        per_domain[tag] = (
            [d for d in detections if d.image_id in image_ids],
            [g for g in ann_set.annotations if g.image_id in image_ids],
        )
    reports = domain_sweep(
        per_domain,
        ordering=ordering,
        score_threshold=score_threshold,
        iou_threshold=iou_threshold,
    )
    return {
        "score_threshold": score_threshold,
        "iou_threshold": iou_threshold,
        "ordering": list(ordering),
        "domains": [r.to_json() for r in reports],
    }


def error_taxonomy_report(
    detections_path,
    ground_truth_path,
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
) -> dict:
    """Single combined error report across all images (no domain split)."""
    detections = tio.parse_detections(detections_path)
    ann_set = tio.parse_annotations(ground_truth_path)
    report = error_taxonomy(
        detections,
        ann_set.annotations,
        score_threshold=score_threshold,
        iou_threshold=iou_threshold,
    )
    return report.to_json()


def gradcheck_report(seed: int = 0, instances: int = 20, tol: float = 1e-4, step: float = 1e-4) -> dict:
    """Full finite-difference suite; ``passed`` is the overall verdict."""
    results, elapsed = gradient_suite(seed=seed, instances=instances, tol=tol, step=step)
    worst: dict = {}
    for r in results:
        if r.name not in worst or r.max_rel_error > worst[r.name]["max_rel_error"]:
            worst[r.name] = {"max_rel_error": r.max_rel_error, "passed": r.passed}
    return {
        "seed": seed,
        "instances": instances,
        "tol": tol,
        "step": step,
        "elapsed_seconds": elapsed,
        "num_checks": len(results),
        "passed": all(r.passed for r in results),
        "checks": {name: worst[name] for name in sorted(worst)},
    }
