"""Box pooling, bank construction against brute-force averaging, and the
bank file round trip."""

import numpy as np
import pytest

from oracles import mean_per_category
from vfm4sdg.distill import TeacherFeature
from vfm4sdg.errors import ContractViolation, LookupFailure, TruncationError, ValidationFailure, VersionError
from vfm4sdg.io import BoxAnnotation
from vfm4sdg.prototypes import (
    PrototypeBank,
    build_bank,
    load_bank,
    pool_box_feature,
    save_bank,
)

RNG = np.random.default_rng(4242)


def random_teacher(c=6, h=4, w=4):
    return TeacherFeature(map=RNG.uniform(-1, 1, size=(c, h, w)))


class TestPoolBoxFeature:
    def test_full_cover_is_global_average(self):
        teacher = random_teacher()
        out = pool_box_feature(teacher, (0, 0, 32, 32), (32, 32))
        np.testing.assert_allclose(out, teacher.map.mean(axis=(1, 2)), atol=1e-15)

    def test_constant_map_gives_constant(self):
        teacher = TeacherFeature(map=np.full((3, 4, 4), 1.5))
        out = pool_box_feature(teacher, (3, 5, 10, 7), (32, 32))
        np.testing.assert_array_equal(out, np.full(3, 1.5))

    def test_left_half_on_2x2_grid(self):
        teacher = TeacherFeature(map=RNG.uniform(-1, 1, size=(5, 2, 2)))
        out = pool_box_feature(teacher, (0, 0, 16, 32), (32, 32))
        np.testing.assert_allclose(out, teacher.map[:, :, 0].mean(axis=1), atol=1e-15)

    def test_locality(self):
        base = RNG.uniform(-1, 1, size=(4, 4, 4))
        # Box maps onto the top-left cell only; trash everything else.
        modified = base.copy()
        modified[:, 1:, :] = 99.0
        modified[:, :, 1:] = -99.0
        a = pool_box_feature(TeacherFeature(map=base), (0, 0, 8, 8), (32, 32))
        b = pool_box_feature(TeacherFeature(map=modified), (0, 0, 8, 8), (32, 32))
        np.testing.assert_array_equal(a, b)

    def test_thin_box_snaps_to_one_cell(self):
        teacher = random_teacher(c=3, h=2, w=2)
        out = pool_box_feature(teacher, (15.9, 15.9, 0.2, 0.2), (32, 32))
        assert out.shape == (3,)
        assert np.all(np.isfinite(out))

    def test_box_outside_image_rejected(self):
        with pytest.raises(ContractViolation):
            pool_box_feature(random_teacher(), (40, 40, 5, 5), (32, 32))

    def test_partially_outside_box_is_clamped(self):
        teacher = random_teacher(c=2, h=2, w=2)
        out = pool_box_feature(teacher, (-10, -10, 26, 26), (32, 32))
        np.testing.assert_allclose(out, teacher.map[:, 0, 0], atol=1e-15)


class TestBuildBank:
    def test_singleton_category(self):
        teacher = random_teacher()
        ann = BoxAnnotation(image_id=1, bbox=(0, 0, 8, 8), category_id=3)
        bank = build_bank({1: teacher}, [ann], {1: (32, 32)})
        assert bank.category_ids == [3]
        assert bank.instance_counts == [1]
        np.testing.assert_array_equal(
            bank.prototypes[0], pool_box_feature(teacher, ann.bbox, (32, 32))
        )

    def test_two_instance_mean(self):
        teacher = random_teacher()
        anns = [
            BoxAnnotation(image_id=1, bbox=(0, 0, 8, 8), category_id=1),
            BoxAnnotation(image_id=1, bbox=(16, 16, 8, 8), category_id=1),
        ]
        bank = build_bank({1: teacher}, anns, {1: (32, 32)})
        u = pool_box_feature(teacher, anns[0].bbox, (32, 32))
        v = pool_box_feature(teacher, anns[1].bbox, (32, 32))
        np.testing.assert_allclose(bank.prototypes[0], (u + v) / 2, atol=1e-15)

    def _random_instances(self, n, categories, images=4):
        teachers = {i: random_teacher() for i in range(images)}
        sizes = {i: (32, 32) for i in range(images)}
        anns = []
        for _ in range(n):
            x, y = RNG.uniform(0, 20, size=2)
            w, h = RNG.uniform(2, 10, size=2)
            anns.append(
                BoxAnnotation(
                    image_id=int(RNG.integers(images)),
                    bbox=(float(x), float(y), float(w), float(h)),
                    category_id=int(RNG.choice(categories)),
                )
            )
        return teachers, sizes, anns

    def test_matches_bruteforce_averaging(self):
        teachers, sizes, anns = self._random_instances(10, [1, 2, 3])
        bank = build_bank(teachers, anns, sizes)
        grouped = {}
        for ann in anns:
            vec = pool_box_feature(teachers[ann.image_id], ann.bbox, sizes[ann.image_id])
            grouped.setdefault(ann.category_id, []).append(vec)
        expected = mean_per_category(grouped)
        for cid, count in zip(bank.category_ids, bank.instance_counts):
            assert count == len(grouped[cid])
            np.testing.assert_array_equal(bank.row_for(cid), expected[cid])

    def test_permutation_invariance_is_exact(self):
        teachers, sizes, anns = self._random_instances(20, [1, 2, 3, 4])
        bank_a = build_bank(teachers, anns, sizes)
        shuffled = list(anns)
        RNG.shuffle(shuffled)
        bank_b = build_bank(teachers, shuffled, sizes)
        assert bank_a.category_ids == bank_b.category_ids
        np.testing.assert_array_equal(bank_a.prototypes, bank_b.prototypes)

    def test_threads_do_not_change_result(self):
        teachers, sizes, anns = self._random_instances(16, [1, 2])
        a = build_bank(teachers, anns, sizes, threads=1)
        b = build_bank(teachers, anns, sizes, threads=4)
        np.testing.assert_array_equal(a.prototypes, b.prototypes)

    def test_convex_hull(self):
        teachers, sizes, anns = self._random_instances(12, [1, 2])
        bank = build_bank(teachers, anns, sizes)
        grouped = {}
        for ann in anns:
            vec = pool_box_feature(teachers[ann.image_id], ann.bbox, sizes[ann.image_id])
            grouped.setdefault(ann.category_id, []).append(vec)
        for cid in bank.category_ids:
            stack = np.stack(grouped[cid])
            row = bank.row_for(cid)
            assert np.all(row >= stack.min(axis=0) - 1e-12)
            assert np.all(row <= stack.max(axis=0) + 1e-12)

    def test_missing_feature_names_the_image(self):
        ann = BoxAnnotation(image_id=7, bbox=(0, 0, 4, 4), category_id=1)
        with pytest.raises(LookupFailure) as err:
            build_bank({}, [ann], {7: (32, 32)})
        assert "7" in str(err.value)

    def test_no_annotations_rejected(self):
        with pytest.raises(ContractViolation):
            build_bank({}, [], {})


class TestBankPersistence:
    def test_round_trip_is_bit_identical_at_32_bit(self, tmp_path):
        teachers = {1: random_teacher()}
        anns = [
            BoxAnnotation(image_id=1, bbox=(0, 0, 8, 8), category_id=1),
            BoxAnnotation(image_id=1, bbox=(4, 4, 12, 12), category_id=2),
        ]
        bank = build_bank(teachers, anns, {1: (32, 32)})
        path = tmp_path / "test.bank"
        save_bank(bank, path)
        loaded = load_bank(path)
        np.testing.assert_array_equal(
            loaded.prototypes.astype(np.float32), bank.prototypes.astype(np.float32)
        )
        assert loaded.category_ids == bank.category_ids
        assert loaded.instance_counts == bank.instance_counts
        # A second save of the loaded bank reproduces the file bytes.
        path2 = tmp_path / "again.bank"
        save_bank(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_is_structured_error(self, tmp_path):
        bank = PrototypeBank(np.ones((2, 3)), [1, 2], [1, 1])
        path = tmp_path / "t.bank"
        save_bank(bank, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncationError):
            load_bank(path)

    def test_empty_bank_rejected_on_save(self, tmp_path):
        bank = PrototypeBank(np.zeros((0, 4)), [], [])
        with pytest.raises(ContractViolation):
            save_bank(bank, tmp_path / "empty.bank")

    def test_version_mismatch(self, tmp_path):
        bank = PrototypeBank(np.ones((1, 2)), [5], [3])
        path = tmp_path / "v.bank"
        save_bank(bank, path)
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(sidecar.read_text().replace('"format_version": 1', '"format_version": 9'))
        with pytest.raises(VersionError):
            load_bank(path)

    def test_channel_mismatch_in_sidecar(self, tmp_path):
        bank = PrototypeBank(np.ones((1, 2)), [5], [3])
        path = tmp_path / "c.bank"
        save_bank(bank, path)
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(sidecar.read_text().replace('"channels": 2', '"channels": 3'))
        with pytest.raises(ValidationFailure):
            load_bank(path)

    def test_recomputation_matches_stored_rows(self):
        teachers = {1: random_teacher(), 2: random_teacher()}
        sizes = {1: (32, 32), 2: (32, 32)}
        anns = [
            BoxAnnotation(image_id=1, bbox=(0, 0, 10, 10), category_id=1),
            BoxAnnotation(image_id=2, bbox=(5, 5, 10, 10), category_id=1),
            BoxAnnotation(image_id=2, bbox=(1, 1, 4, 4), category_id=2),
        ]
        bank = build_bank(teachers, anns, sizes)
        regrouped = {}
        for ann in anns:
            vec = pool_box_feature(teachers[ann.image_id], ann.bbox, sizes[ann.image_id])
            regrouped.setdefault(ann.category_id, []).append(vec)
        for cid in bank.category_ids:
            recomputed = np.stack(regrouped[cid]).mean(axis=0)
            np.testing.assert_allclose(bank.row_for(cid), recomputed, atol=1e-6)
