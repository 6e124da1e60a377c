"""Pyramid reconstruction, resolution alignment, relation matrices, and the
multi-level relational distillation loss."""

import itertools
import math

import numpy as np
import pytest

from oracles import block_mean_pool, cosine_relation_bruteforce
from vfm4sdg import tensor as T
from vfm4sdg.distill import (
    FeaturePyramid,
    TeacherFeature,
    align_resolution,
    combine_losses,
    csrpd_loss,
    csrpd_loss_batch,
    flatten_pyramid,
    per_level_losses,
    reconstruct_pyramid,
    relation_matrix,
)
from vfm4sdg.errors import ContractViolation, DimensionMismatch, LookupFailure
from vfm4sdg.tensor import Tensor, backward, grad_check

RNG = np.random.default_rng(77)


class TestReconstructPyramid:
    def test_single_level_row_major(self):
        tokens = Tensor(np.arange(8.0).reshape(4, 2))  # 4 tokens, C=2
        pyramid = reconstruct_pyramid(tokens, [(2, 2)])
        fmap = pyramid.level(0).data
        assert fmap.shape == (2, 2, 2)
        # Token k lands at spatial (k // W, k % W).
        for k in range(4):
            np.testing.assert_array_equal(fmap[:, k // 2, k % 2], tokens.data[k])

    def test_two_level_split(self):
        tokens = Tensor(RNG.uniform(-1, 1, size=(5, 3)))
        pyramid = reconstruct_pyramid(tokens, [(2, 2), (1, 1)])
        assert pyramid.level(0).shape == (3, 2, 2)
        assert pyramid.level(1).shape == (3, 1, 1)
        np.testing.assert_array_equal(pyramid.level(1).data[:, 0, 0], tokens.data[4])
        np.testing.assert_array_equal(pyramid.level(0).data[:, 1, 0], tokens.data[2])

    def test_round_trip(self):
        tokens = Tensor(RNG.uniform(-1, 1, size=(14, 4)))
        pyramid = reconstruct_pyramid(tokens, [(3, 3), (2, 2), (1, 1)])
        np.testing.assert_array_equal(flatten_pyramid(pyramid).data, tokens.data)

    def test_token_count_mismatch_lists_both(self):
        with pytest.raises(DimensionMismatch) as err:
            reconstruct_pyramid(Tensor(np.zeros((3, 2))), [(2, 2)])
        assert "4" in str(err.value) and "3" in str(err.value)

    def test_gradient_flows_to_tokens(self):
        tokens = Tensor(RNG.uniform(-1, 1, size=(5, 3)), requires_grad=True)
        pyramid = reconstruct_pyramid(tokens, [(2, 2), (1, 1)])
        backward(T.tsum(pyramid.level(0)))
        assert tokens.grad is not None
        np.testing.assert_array_equal(tokens.grad[4], np.zeros(3))
        np.testing.assert_array_equal(tokens.grad[:4], np.ones((4, 3)))


class TestAlignResolution:
    def test_pooling_preserves_constants(self):
        fmap = Tensor(np.full((3, 4, 4), 2.5))
        out = align_resolution(fmap, (2, 2))
        np.testing.assert_array_equal(out.data, np.full((3, 2, 2), 2.5))

    def test_exact_block_means(self):
        fmap = Tensor(np.arange(16.0).reshape(1, 4, 4))
        out = align_resolution(fmap, (2, 2))
        np.testing.assert_array_equal(out.data, [[[2.5, 4.5], [10.5, 12.5]]])

    def test_identity_when_sizes_match(self):
        fmap = Tensor(RNG.uniform(-1, 1, size=(2, 2, 2)))
        out = align_resolution(fmap, (2, 2))
        assert out is fmap

    @pytest.mark.parametrize("shape,target", [((4, 4), (2, 2)), ((6, 4), (3, 2)), ((9, 3), (3, 3))])
    def test_divisible_ratio_matches_block_oracle(self, shape, target):
        fmap = RNG.uniform(-1, 1, size=(3, *shape))
        out = align_resolution(Tensor(fmap), target)
        np.testing.assert_allclose(out.data, block_mean_pool(fmap, *target), atol=1e-12)

    def test_windows_tile_input_when_divisible(self):
        # Pooling gradient of a sum distributes 1/window over a perfect tiling.
        fmap = Tensor(RNG.uniform(-1, 1, size=(1, 4, 4)), requires_grad=True)
        backward(T.tsum(align_resolution(fmap, (2, 2))))
        np.testing.assert_allclose(fmap.grad, np.full((1, 4, 4), 0.25), atol=1e-15)

    def test_bilinear_reproduces_bilinear_function_interior(self):
        h, w = 3, 4
        y, x = np.mgrid[0:h, 0:w].astype(float)
        fmap = (0.7 + 0.3 * y + 0.2 * x + 0.11 * y * x)[None]
        ho, wo = 5, 7
        out = align_resolution(Tensor(fmap), (ho, wo)).data
        src_y = (np.arange(ho) + 0.5) * h / ho - 0.5
        src_x = (np.arange(wo) + 0.5) * w / wo - 0.5
        for i, sy in enumerate(src_y):
            for j, sx in enumerate(src_x):
                if 0 <= sy <= h - 1 and 0 <= sx <= w - 1:
                    expected = 0.7 + 0.3 * sy + 0.2 * sx + 0.11 * sy * sx
                    assert out[0, i, j] == pytest.approx(expected, abs=1e-12)

    def test_mixed_aspect_uses_bilinear(self):
        fmap = Tensor(RNG.uniform(-1, 1, size=(2, 4, 2)))
        out = align_resolution(fmap, (2, 3))
        np.testing.assert_array_equal(out.data, T.bilinear_resize(fmap, (2, 3)).data)


class TestRelationMatrix:
    def test_identical_tokens_give_ones(self):
        fmap = Tensor(np.tile(np.array([1.0, 2.0, 3.0])[:, None, None], (1, 2, 2)))
        rel = relation_matrix(fmap)
        expected = 1.0 - np.eye(4)
        np.testing.assert_allclose(rel.values.data, expected, atol=1e-12)

    def test_orthogonal_tokens_give_zero(self):
        fmap = np.zeros((2, 1, 2))
        fmap[0, 0, 0] = 1.0
        fmap[1, 0, 1] = 1.0
        rel = relation_matrix(Tensor(fmap))
        np.testing.assert_allclose(rel.values.data, np.zeros((2, 2)), atol=1e-15)

    def test_matches_bruteforce_cosine(self):
        fmap = RNG.uniform(-1, 1, size=(4, 1, 3))
        rel = relation_matrix(Tensor(fmap))
        np.testing.assert_allclose(rel.values.data, cosine_relation_bruteforce(fmap), atol=1e-9)

    def test_structure(self):
        fmap = RNG.uniform(-1, 1, size=(5, 3, 3))
        values = relation_matrix(Tensor(fmap)).values.data
        np.testing.assert_array_equal(np.diag(values), np.zeros(9))
        np.testing.assert_allclose(values, values.T, atol=1e-6)
        assert np.all(values >= -1.0) and np.all(values <= 1.0)

    def test_per_token_scale_invariance(self):
        fmap = RNG.uniform(0.2, 1.0, size=(4, 2, 3)) * np.sign(RNG.uniform(-1, 1, size=(4, 2, 3)))
        scales = RNG.uniform(0.05, 20.0, size=(1, 2, 3))
        base = relation_matrix(Tensor(fmap)).values.data
        scaled = relation_matrix(Tensor(fmap * scales)).values.data
        np.testing.assert_allclose(base, scaled, atol=1e-9)


def _pyramid_from_teacher(teacher_map, copies=3):
    return FeaturePyramid(levels=[(i, Tensor(teacher_map.copy())) for i in range(copies)])


class TestCsrpdLoss:
    def test_zero_when_student_equals_teacher(self):
        teacher_map = RNG.uniform(-1, 1, size=(4, 2, 2))
        teacher = TeacherFeature(map=teacher_map)
        pyramid = _pyramid_from_teacher(teacher_map, copies=5)
        for size in range(1, 6):
            for subset in itertools.combinations(range(5), size):
                assert csrpd_loss(pyramid, teacher, levels=subset).item() == 0.0

    def test_two_token_hand_case_quadratic(self):
        # Student tokens orthogonal (cos 0), teacher tokens at 45 degrees
        # (cos sqrt(1/2)); both off-diagonal residuals are sqrt(1/2) < beta,
        # so the loss is 0.5 * (1/2) / 1 = 0.25.
        student = np.zeros((2, 1, 2))
        student[0, 0, 0] = 1.0
        student[1, 0, 1] = 1.0
        teacher = np.zeros((2, 1, 2))
        teacher[0, 0, 0] = 1.0
        teacher[:, 0, 1] = 1.0 / math.sqrt(2.0)
        loss = csrpd_loss(
            FeaturePyramid(levels=[(0, Tensor(student))]),
            TeacherFeature(map=teacher),
            levels=[0],
            beta=1.0,
        )
        assert loss.item() == pytest.approx(0.25, abs=1e-12)

    def test_two_token_hand_case_knee(self):
        # Student cos 0 vs teacher cos 1: residual exactly at the knee,
        # so each off-diagonal entry contributes 0.5 * beta = 0.5.
        student = np.zeros((2, 1, 2))
        student[0, 0, 0] = 1.0
        student[1, 0, 1] = 1.0
        teacher = np.zeros((2, 1, 2))
        teacher[0] = 1.0
        loss = csrpd_loss(
            FeaturePyramid(levels=[(0, Tensor(student))]),
            TeacherFeature(map=teacher),
            levels=[0],
            beta=1.0,
        )
        assert loss.item() == pytest.approx(0.5, abs=1e-12)

    def test_channel_counts_may_differ(self):
        student = FeaturePyramid(levels=[(0, Tensor(RNG.uniform(-1, 1, size=(3, 2, 2))))])
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(7, 2, 2)))
        assert csrpd_loss(student, teacher, levels=[0]).item() >= 0.0

    def test_empty_level_set_rejected(self):
        student = _pyramid_from_teacher(RNG.uniform(-1, 1, size=(3, 2, 2)))
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(3, 2, 2)))
        with pytest.raises(ContractViolation):
            csrpd_loss(student, teacher, levels=[])

    def test_missing_level_rejected(self):
        student = _pyramid_from_teacher(RNG.uniform(-1, 1, size=(3, 2, 2)))
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(3, 2, 2)))
        with pytest.raises(LookupFailure):
            csrpd_loss(student, teacher, levels=[9])

    def test_monotone_under_level_inclusion(self):
        student = FeaturePyramid(
            levels=[(i, Tensor(RNG.uniform(-1, 1, size=(3, 2 + i, 2 + i)))) for i in range(3)]
        )
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(5, 2, 2)))
        previous = 0.0
        for size in range(1, 4):
            value = csrpd_loss(student, teacher, levels=range(size)).item()
            assert value >= previous
            previous = value

    def test_per_level_breakdown_sums_to_total(self):
        student = FeaturePyramid(
            levels=[(i, Tensor(RNG.uniform(-1, 1, size=(3, 3, 3)))) for i in range(3)]
        )
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(4, 2, 2)))
        breakdown = per_level_losses(student, teacher)
        total = csrpd_loss(student, teacher).item()
        assert total == pytest.approx(sum(breakdown.values()), abs=1e-12)

    def test_per_token_scaling_leaves_loss_unchanged(self):
        base = RNG.uniform(0.2, 1.0, size=(4, 3, 3)) * np.sign(RNG.uniform(-1, 1, size=(4, 3, 3)))
        scales = RNG.uniform(0.1, 10.0, size=(1, 3, 3))
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(5, 3, 3)))
        plain = csrpd_loss(FeaturePyramid(levels=[(0, Tensor(base))]), teacher, levels=[0]).item()
        scaled = csrpd_loss(
            FeaturePyramid(levels=[(0, Tensor(base * scales))]), teacher, levels=[0]
        ).item()
        assert plain == pytest.approx(scaled, abs=1e-9)

    def test_gradient_reaches_student_only(self):
        student_map = Tensor(RNG.uniform(-1, 1, size=(4, 3, 3)), requires_grad=True)
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(5, 2, 2)))
        loss = csrpd_loss(FeaturePyramid(levels=[(0, student_map)]), teacher, levels=[0])
        backward(loss)
        assert student_map.grad is not None and np.any(student_map.grad != 0)

    def test_teacher_perturbation_changes_value_without_gradient(self):
        student_map = Tensor(RNG.uniform(-1, 1, size=(4, 2, 2)), requires_grad=True)
        base_map = RNG.uniform(-1, 1, size=(5, 2, 2))
        pyramid = FeaturePyramid(levels=[(0, student_map)])
        a = csrpd_loss(pyramid, TeacherFeature(map=base_map), levels=[0]).item()
        b = csrpd_loss(pyramid, TeacherFeature(map=base_map + 0.3), levels=[0]).item()
        assert a != b

    def test_gradient_matches_finite_differences(self):
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(5, 2, 2)))

        def f(t):
            return csrpd_loss(FeaturePyramid(levels=[(0, t)]), teacher, levels=[0], beta=4.0)

        report = grad_check(f, Tensor(RNG.uniform(-1, 1, size=(4, 3, 3))), step=1e-4, tol=1e-4)
        assert report.passed, report

    def test_batch_is_mean_of_per_image_losses(self):
        teachers = [TeacherFeature(map=RNG.uniform(-1, 1, size=(4, 2, 2))) for _ in range(3)]
        pyramids = [
            FeaturePyramid(levels=[(0, Tensor(RNG.uniform(-1, 1, size=(3, 2, 2))))])
            for _ in range(3)
        ]
        singles = [csrpd_loss(p, t, levels=[0]).item() for p, t in zip(pyramids, teachers)]
        batched = csrpd_loss_batch(pyramids, teachers, levels=[0]).item()
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)


class TestCombineLosses:
    def test_switch_off(self):
        out = combine_losses(Tensor(np.asarray(2.0)), Tensor(np.asarray(3.0)), 0.0)
        assert out.item() == 2.0

    def test_arithmetic(self):
        out = combine_losses(Tensor(np.asarray(2.0)), Tensor(np.asarray(3.0)), 0.5)
        assert out.item() == 3.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ContractViolation):
            combine_losses(Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0)), -0.1)

    def test_gradient_split(self):
        det = Tensor(np.asarray(2.0), requires_grad=True)
        distill = Tensor(np.asarray(3.0), requires_grad=True)
        backward(combine_losses(det, distill, 0.25))
        assert det.grad == pytest.approx(1.0)
        assert distill.grad == pytest.approx(0.25)

    def test_linear_in_weight(self):
        det, distill = 1.25, 0.75
        values = [
            combine_losses(Tensor(np.asarray(det)), Tensor(np.asarray(distill)), w).item()
            for w in (0.1, 0.3, 0.5, 0.8, 1.0, 1.2, 1.5)
        ]
        for w, v in zip((0.1, 0.3, 0.5, 0.8, 1.0, 1.2, 1.5), values):
            assert v == det + w * distill


class TestPyramidValidation:
    def test_channel_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            FeaturePyramid(levels=[(0, Tensor(np.zeros((3, 2, 2)))), (1, Tensor(np.zeros((4, 2, 2))))])

    def test_unsorted_levels_rejected(self):
        with pytest.raises(ContractViolation):
            FeaturePyramid(levels=[(1, Tensor(np.zeros((3, 2, 2)))), (0, Tensor(np.zeros((3, 2, 2))))])

    def test_teacher_must_be_finite(self):
        bad = np.zeros((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ContractViolation):
            TeacherFeature(map=bad)
