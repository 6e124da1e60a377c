"""Detection quality metrics: per-class AP at a fixed IoU threshold and a
three-way error decomposition (missed objects, spurious detections,
class confusion) per domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation, LookupFailure
from .io import BoxAnnotation, Detection

_MODULE = "metrics"


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax0 + aw, bx0 + bw), min(ay0 + ah, by0 + bh)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 1.0
    # Rounding can push inter a few ulps past the union for near-identical boxes.
    return min(1.0, inter / union)


def _sorted_by_score(detections: Sequence[Detection]) -> list:
    # Descending score; ties broken by input position for determinism.
    return [d for _, d in sorted(enumerate(detections), key=lambda t: (-t[1].score, t[0]))]


def _greedy_match(
    detections: Sequence[Detection],
    ground_truth: Sequence[BoxAnnotation],
    iou_threshold: float,
):
    """Score-ordered one-to-one matching, class-agnostic.

    Returns (pairs, unmatched_detections) where pairs maps detection ->
    ground-truth index. Each detection takes the still-unmatched box with
    the highest IoU >= threshold in its own image.
    """
    gt_by_image: dict = {}
    for gi, gt in enumerate(ground_truth):
        gt_by_image.setdefault(gt.image_id, []).append(gi)
    taken = [False] * len(ground_truth)
    pairs = []
    unmatched = []
    for det in _sorted_by_score(detections):
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(det.image_id, ()):
            if taken[gi]:
                continue
            overlap = iou(det.bbox, ground_truth[gi].bbox)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0:
            taken[best_gi] = True
            pairs.append((det, best_gi))
        else:
            unmatched.append(det)
    return pairs, unmatched


def ap50(
    detections: Sequence[Detection],
    ground_truth: Sequence[BoxAnnotation],
    iou_threshold: float = 0.5,
) -> float:
    """Average precision for one class (all-point interpolation).

    Both lists must already be restricted to a single class; matching is
    greedy in descending score with each ground-truth box consumed at
    most once.
    """
    npos = len(ground_truth)
    if npos == 0:
        return 0.0
    if not detections:
        return 0.0
    gt_by_image: dict = {}
    for gi, gt in enumerate(ground_truth):
        gt_by_image.setdefault(gt.image_id, []).append(gi)
    taken = [False] * npos
    tp = []
    for det in _sorted_by_score(detections):
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(det.image_id, ()):
            if taken[gi]:
                continue
            overlap = iou(det.bbox, ground_truth[gi].bbox)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0:
            taken[best_gi] = True
            tp.append(1.0)
        else:
            tp.append(0.0)

    tp = np.cumsum(tp)
    fp = np.arange(1, len(tp) + 1) - tp
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    # Precision envelope over recall, integrated across recall changes.
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def evaluate_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[BoxAnnotation],
    iou_threshold: float = 0.5,
) -> dict:
    """Per-class AP plus their mean; classes without ground truth are skipped."""
    classes = sorted({gt.category_id for gt in ground_truth})
    per_class = {}
    for cid in classes:
        dets = [d for d in detections if d.category_id == cid]
        gts = [g for g in ground_truth if g.category_id == cid]
        per_class[cid] = ap50(dets, gts, iou_threshold)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"per_class_ap": per_class, "map50": mean}


@dataclass
class ErrorReport:
    domain_tag: str
    fn_rate: float
    fp_rate: float
    confusion_rate: float
    per_class_ap: dict = field(default_factory=dict)
    map50: float = 0.0
    gt_count: int = 0
    detection_count: int = 0

    def to_json(self) -> dict:
        return {
            "domain_tag": self.domain_tag,
            "fn_rate": self.fn_rate,
            "fp_rate": self.fp_rate,
            "confusion_rate": self.confusion_rate,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map50": self.map50,
            "gt_count": self.gt_count,
            "detection_count": self.detection_count,
        }


def error_taxonomy(
    detections: Sequence[Detection],
    ground_truth: Sequence[BoxAnnotation],
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
    domain_tag: str = "all",
) -> ErrorReport:
    """Decompose errors into miss / spurious / confusion rates.

    Detections below the score threshold are dropped, the rest are
    matched to ground truth class-agnostically. A matched box of the
    same class is correct, a matched box of another class is confusion,
    an unmatched ground-truth box is a miss, an unmatched detection is
    spurious. Miss and confusion are normalized by the ground-truth
    count, spurious detections by the kept-detection count.
    """
    for name, value in (("score_threshold", score_threshold), ("iou_threshold", iou_threshold)):
        if not 0.0 < value <= 1.0:
            raise ContractViolation(_MODULE, f"{name} must lie in (0, 1], got {value}")
    kept = [d for d in detections if d.score >= score_threshold]
    pairs, unmatched_dets = _greedy_match(kept, ground_truth, iou_threshold)

    confusion = sum(1 for det, gi in pairs if det.category_id != ground_truth[gi].category_id)
    matched_gt = len(pairs)
    fn = len(ground_truth) - matched_gt
    fp = len(unmatched_dets)

    gt_count = len(ground_truth)
    det_count = len(kept)
    report = ErrorReport(
        domain_tag=domain_tag,
        fn_rate=fn / gt_count if gt_count else 0.0,
        confusion_rate=confusion / gt_count if gt_count else 0.0,
        fp_rate=fp / det_count if det_count else 0.0,
        gt_count=gt_count,
        detection_count=det_count,
    )
    scored = evaluate_detections(detections, ground_truth, iou_threshold)
    report.per_class_ap = scored["per_class_ap"]
    report.map50 = scored["map50"]
    return report


def domain_sweep(
    per_domain: Mapping[str, tuple],
    ordering: Optional[Sequence[str]] = None,
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
) -> list:
    """One error report per domain, in the given severity order.

    ``per_domain`` maps a domain tag to a (detections, ground_truth)
    pair. The default ordering is the mapping's own order.
    """
    if not per_domain:
        raise ContractViolation(_MODULE, "domain_sweep needs at least one domain")
    tags = list(per_domain) if ordering is None else list(ordering)
    if len(set(tags)) != len(tags):
        raise ContractViolation(_MODULE, f"duplicate domain tags in ordering {tags}")
    reports = []
    for tag in tags:
        if tag not in per_domain:
            raise LookupFailure(_MODULE, f"no inputs for domain {tag!r}")
        dets, gts = per_domain[tag]
        reports.append(
            error_taxonomy(
                dets,
                gts,
                score_threshold=score_threshold,
                iou_threshold=iou_threshold,
                domain_tag=tag,
            )
        )
    return reports
