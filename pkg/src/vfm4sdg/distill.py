"""Relational prior distillation over multi-level encoder features.

Student feature maps are aligned to the teacher's spatial resolution,
both sides are turned into masked token-pair cosine-similarity matrices,
and the per-level Smooth-L1 residuals over the off-diagonal entries are
summed uniformly across the selected levels. The teacher is a constant:
gradients only ever reach student features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractViolation, DimensionMismatch, LookupFailure
from .tensor import Tensor

_MODULE = "distill"


@dataclass
class FeaturePyramid:
    """Ordered per-level feature maps for one image.

    ``levels`` maps level index -> C x H_l x W_l tensor; indices are
    distinct and ascending, and every level shares the channel count.
    """

    levels: list  # list of (level_index, Tensor)

    def __post_init__(self):
        indices = [idx for idx, _ in self.levels]
        if sorted(indices) != indices or len(set(indices)) != len(indices):
            raise ContractViolation(_MODULE, f"level indices must be distinct ascending, got {indices}")
        channels = set()
        for idx, fmap in self.levels:
            if fmap.data.ndim != 3:
                raise DimensionMismatch(_MODULE, f"level {idx} map must be C x H x W, got {fmap.shape}")
            c, h, w = fmap.shape
            if h < 1 or w < 1:
                raise ContractViolation(_MODULE, f"level {idx} has empty spatial extent")
            channels.add(c)
        if len(channels) > 1:
            raise ContractViolation(_MODULE, f"levels disagree on channel count: {sorted(channels)}")

    def level(self, index: int) -> Tensor:
        for idx, fmap in self.levels:
            if idx == index:
                return fmap
        raise LookupFailure(_MODULE, f"pyramid has no level {index}")

    def indices(self) -> list:
        return [idx for idx, _ in self.levels]


@dataclass
class TeacherFeature:
    """A frozen C_t x H_t x W_t feature map dumped by an exporter."""

    map: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        arr = np.asarray(self.map, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DimensionMismatch(_MODULE, f"teacher map must be C x H x W, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(_MODULE, "teacher map contains non-finite values")
        self.map = arr

    @property
    def resolution(self) -> tuple:
        return self.map.shape[1], self.map.shape[2]


@dataclass
class RelationMatrix:
    """Masked token-pair cosine-similarity matrix for one feature map."""

    values: Tensor  # N x N, zero diagonal
    mask_diagonal: bool = True

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]


def reconstruct_pyramid(tokens, level_shapes: Sequence) -> FeaturePyramid:
    """Rebuild per-level C x H x W maps from a flat token sequence.

    ``tokens`` is total_tokens x C with levels concatenated in order and
    row-major spatial layout inside each level. The operation is
    differentiable, so loss gradients reach the token tensor.
    """
    tokens = T.as_tensor(tokens)
    if tokens.data.ndim != 2:
        raise DimensionMismatch(_MODULE, f"tokens must be 2-D, got {tokens.shape}")
    if not level_shapes:
        raise ContractViolation(_MODULE, "level_shapes must be non-empty")
    expected = sum(int(h) * int(w) for h, w in level_shapes)
    total, c = tokens.shape
    if total != expected:
        raise DimensionMismatch(
            _MODULE,
            f"token count mismatch: level shapes need {expected} tokens, got {total}",
        )
    levels = []
    offset = 0
    for idx, (h, w) in enumerate(level_shapes):
        h, w = int(h), int(w)
        chunk = T.rows(tokens, offset, offset + h * w)  # (H*W) x C
        fmap = T.reshape(T.transpose(chunk), (c, h, w))
        levels.append((idx, fmap))
        offset += h * w
    return FeaturePyramid(levels=levels)


def flatten_pyramid(pyramid: FeaturePyramid) -> Tensor:
    """Inverse of :func:`reconstruct_pyramid`: concatenated spatial tokens."""
    chunks = []
    for _, fmap in pyramid.levels:
        c, h, w = fmap.shape
        chunks.append(T.reshape(fmap, (c, h * w)))
    return T.transpose(T.concat_cols(chunks))


def align_resolution(fmap, target_hw: tuple) -> Tensor:
    """Resize a C x H x W map onto the teacher grid.

    Adaptive average pooling when the map is at least as large as the
    target in both axes, bilinear interpolation otherwise, identity when
    the sizes already match.
    """
    fmap = T.as_tensor(fmap)
    if fmap.data.ndim != 3:
        raise DimensionMismatch(_MODULE, f"feature map must be C x H x W, got {fmap.shape}")
    _, h, w = fmap.shape
    ht, wt = int(target_hw[0]), int(target_hw[1])
    if ht < 1 or wt < 1:
        raise ContractViolation(_MODULE, f"target resolution must be positive, got {target_hw}")
    if (h, w) == (ht, wt):
        return fmap
    if h >= ht and w >= wt:
        return T.adaptive_avg_pool2d(fmap, (ht, wt))
    return T.bilinear_resize(fmap, (ht, wt))


def _offdiag_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def relation_matrix(fmap) -> RelationMatrix:
    """Masked pairwise-cosine matrix of the spatial tokens of one map."""
    fmap = T.as_tensor(fmap)
    if fmap.data.ndim != 3:
        raise DimensionMismatch(_MODULE, f"feature map must be C x H x W, got {fmap.shape}")
    c, h, w = fmap.shape
    n = h * w
    z = T.l2_normalize_columns(T.reshape(fmap, (c, n)))
    # Products of unit vectors may overshoot the cosine range by a few ulps.
    sim = T.clip_passthrough(T.matmul(T.transpose(z), z), -1.0, 1.0)
    masked = T.mul(sim, Tensor(_offdiag_mask(n).astype(np.float64)))
    return RelationMatrix(values=masked)


def csrpd_loss(
    student: FeaturePyramid,
    teacher: TeacherFeature,
    levels: Optional[Iterable] = None,
    beta: float = 1.0,
) -> Tensor:
    """Sum of per-level masked relational Smooth-L1 terms for one image.

    The teacher relation matrix depends only on the teacher map, so it is
    computed once and reused across levels. The Smooth-L1 mean runs over
    the off-diagonal entries only.
    """
    level_set = sorted(set(student.indices() if levels is None else (int(l) for l in levels)))
    if not level_set:
        raise ContractViolation(_MODULE, "csrpd_loss: empty level set")
    target_hw = teacher.resolution
    teacher_rel = relation_matrix(Tensor(teacher.map)).values
    n = teacher_rel.shape[0]
    mask = _offdiag_mask(n)

    total = None
    for idx in level_set:
        fmap = student.level(idx)
        aligned = align_resolution(fmap, target_hw)
        student_rel = relation_matrix(aligned).values
        term = T.smooth_l1(student_rel, teacher_rel, beta=beta, mask=mask)
        total = term if total is None else T.add(total, term)
    return total


def csrpd_loss_batch(
    students: Sequence[FeaturePyramid],
    teachers: Sequence[TeacherFeature],
    levels: Optional[Iterable] = None,
    beta: float = 1.0,
) -> Tensor:
    """Batch mean of the per-image loss (relation matrices never mix images)."""
    if len(students) != len(teachers) or not students:
        raise ContractViolation(_MODULE, "batch needs equal, non-zero pyramid/teacher counts")
    total = None
    for pyramid, teacher in zip(students, teachers):
        term = csrpd_loss(pyramid, teacher, levels=levels, beta=beta)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(students))


def per_level_losses(
    student: FeaturePyramid,
    teacher: TeacherFeature,
    levels: Optional[Iterable] = None,
    beta: float = 1.0,
) -> dict:
    """Per-level loss values (floats) for reporting; same terms as the sum."""
    level_set = sorted(set(student.indices() if levels is None else (int(l) for l in levels)))
    if not level_set:
        raise ContractViolation(_MODULE, "per_level_losses: empty level set")
    out = {}
    for idx in level_set:
        out[idx] = float(csrpd_loss(student, teacher, levels=[idx], beta=beta).data)
    return out


def combine_losses(det_loss, distill_loss, weight: float) -> Tensor:
    """Total objective: detection loss plus ``weight`` times the distill term."""
    if weight < 0:
        raise ContractViolation(_MODULE, f"combine_losses: weight must be >= 0, got {weight}")
    det_loss = T.as_tensor(det_loss)
    distill_loss = T.as_tensor(distill_loss)
    if det_loss.data.ndim != 0 or distill_loss.data.ndim != 0:
        raise ContractViolation(_MODULE, "combine_losses: both losses must be scalars")
    return T.add(det_loss, T.scale(distill_loss, weight))
