"""Category-level semantic prototypes pooled from teacher features.

Each prototype is the arithmetic mean of the teacher feature vectors
pooled inside every ground-truth box of that category across the source
set. Banks are built offline, frozen, and persisted as one tensor file
plus a JSON sidecar.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io as tio
from .distill import TeacherFeature
from .errors import (
    ContractViolation,
    FormatError,
    LookupFailure,
    ValidationFailure,
    VersionError,
)
from .io import BoxAnnotation

_MODULE = "prototypes"

BANK_FORMAT_VERSION = 1


@dataclass
class PrototypeBank:
    """K x C_t prototype rows plus the category bookkeeping."""

    prototypes: np.ndarray
    category_ids: list
    instance_counts: list

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        k = self.prototypes.shape[0] if self.prototypes.ndim == 2 else -1
        if k != len(self.category_ids) or k != len(self.instance_counts):
            raise ContractViolation(
                _MODULE,
                f"bank rows ({k}), category_ids ({len(self.category_ids)}) and "
                f"instance_counts ({len(self.instance_counts)}) must agree",
            )
        if any(c < 1 for c in self.instance_counts):
            raise ContractViolation(_MODULE, "every stored category needs >= 1 instance")

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0]

    @property
    def channels(self) -> int:
        return self.prototypes.shape[1]

    def row_for(self, category_id: int) -> np.ndarray:
        try:
            return self.prototypes[self.category_ids.index(category_id)]
        except ValueError:
            raise LookupFailure(_MODULE, f"bank has no category {category_id}") from None


def _grid_span(lo: float, hi: float, pixels: float, cells: int) -> tuple:
    # Proportional pixel -> cell mapping, rounded outward so a valid box
    # always covers at least one cell.
    a = int(np.floor(lo * cells / pixels))
    b = int(np.ceil(hi * cells / pixels))
    a = max(0, min(a, cells - 1))
    b = max(1, min(b, cells))
    if b <= a:
        center = min(cells - 1, max(0, int((lo + hi) * cells / (2 * pixels))))
        a, b = center, center + 1
    return a, b


def pool_box_feature(teacher: TeacherFeature, bbox, image_size) -> np.ndarray:
    """Mean teacher feature over the grid cells covered by a pixel box."""
    img_h, img_w = int(image_size[0]), int(image_size[1])
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ContractViolation(_MODULE, f"box {bbox} has non-positive size")
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, float(img_w)), min(y + h, float(img_h))
    if x0 >= x1 or y0 >= y1:
        raise ContractViolation(_MODULE, f"box {bbox} lies fully outside the {img_h}x{img_w} image")
    _, grid_h, grid_w = teacher.map.shape
    r0, r1 = _grid_span(y0, y1, img_h, grid_h)
    c0, c1 = _grid_span(x0, x1, img_w, grid_w)
    return teacher.map[:, r0:r1, c0:c1].mean(axis=(1, 2))


def build_bank(
    teacher_features: Mapping[int, TeacherFeature],
    annotations: Sequence[BoxAnnotation],
    image_sizes: Mapping[int, tuple],
    threads: int = 1,
) -> PrototypeBank:
    """Pool every annotated instance and average per category.

    Instances are pooled independently (optionally in parallel); the
    per-category reduction uses correctly rounded summation (fsum), so
    the bank is exact at 64-bit and invariant to annotation order.
    """
    if not annotations:
        raise ContractViolation(_MODULE, "build_bank: need at least one annotation")
    for ann in annotations:
        if ann.image_id not in teacher_features:
            raise LookupFailure(_MODULE, f"no teacher feature for image_id {ann.image_id}")
        if ann.image_id not in image_sizes:
            raise LookupFailure(_MODULE, f"no image size for image_id {ann.image_id}")

    def pooled(ann: BoxAnnotation) -> np.ndarray:
        return pool_box_feature(teacher_features[ann.image_id], ann.bbox, image_sizes[ann.image_id])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vectors = list(pool.map(pooled, annotations))
    else:
        vectors = [pooled(ann) for ann in annotations]

    by_category: dict = {}
    for ann, vec in zip(annotations, vectors):
        by_category.setdefault(ann.category_id, []).append(vec)

    category_ids = sorted(by_category)
    # fsum gives the correctly rounded sum, so the mean is exact at 64-bit
    # and independent of summation order.
    rows = [
        np.array([math.fsum(v[j] for v in by_category[cid]) for j in range(len(by_category[cid][0]))])
        / len(by_category[cid])
        for cid in category_ids
    ]
    counts = [len(by_category[cid]) for cid in category_ids]
    return PrototypeBank(
        prototypes=np.stack(rows),
        category_ids=list(category_ids),
        instance_counts=counts,
    )


def build_bank_from_set(
    teacher_features: Mapping[int, TeacherFeature],
    annotation_set: tio.AnnotationSet,
    threads: int = 1,
) -> PrototypeBank:
    sizes = {im.id: (im.height, im.width) for im in annotation_set.images}
    return build_bank(teacher_features, annotation_set.annotations, sizes, threads=threads)


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_bank(bank: PrototypeBank, path) -> None:
    """Write the prototype tensor file and its JSON sidecar."""
    if bank.num_categories < 1:
        raise ContractViolation(_MODULE, "refusing to save an empty bank (K = 0)")
    tio.write_tensor(path, bank.prototypes)
    meta = {
        "format_version": BANK_FORMAT_VERSION,
        "category_ids": list(bank.category_ids),
        "instance_counts": list(bank.instance_counts),
        "channels": bank.channels,
    }
    _sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_bank(path) -> PrototypeBank:
    values = tio.read_tensor(path).data
    if values.ndim != 2:
        raise FormatError(_MODULE, f"bank tensor must be 2-D, got shape {values.shape}")
    sidecar = _sidecar_path(path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(_MODULE, f"cannot read bank sidecar {sidecar}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(_MODULE, f"bank sidecar {sidecar} is not valid JSON: {exc}") from exc
    version = meta.get("format_version")
    if version != BANK_FORMAT_VERSION:
        raise VersionError(_MODULE, f"bank format version {version} (expected {BANK_FORMAT_VERSION})")
    for key in ("category_ids", "instance_counts", "channels"):
        if key not in meta:
            raise FormatError(_MODULE, f"bank sidecar missing field {key!r}")
    if meta["channels"] != values.shape[1]:
        raise ValidationFailure(
            _MODULE,
            f"sidecar channels {meta['channels']} disagree with tensor width {values.shape[1]}",
        )
    return PrototypeBank(
        prototypes=values,
        category_ids=[int(c) for c in meta["category_ids"]],
        instance_counts=[int(c) for c in meta["instance_counts"]],
    )
