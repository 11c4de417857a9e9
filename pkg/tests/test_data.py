"""Tests for phantom generation, ingestion, splits, mixing, and augmentation."""

import numpy as np
import pytest
from PIL import Image

from lesionsynth.curvature import curvature_stats, welch_t_test
from lesionsynth.data import (
    AugmentParams,
    ClassTooSmall,
    DatasetRecord,
    EmptyMask,
    MissingMask,
    PhantomParams,
    PoolExhausted,
    SplitSpec,
    TumorClass,
    UnreadableFile,
    apply_augment,
    bounding_rectangle,
    generate_phantom,
    generate_phantom_set,
    load_dataset_dir,
    load_directory,
    mix_synthetic,
    ordinary_augment,
    rectangle_map,
    save_dataset,
    split,
)


def make_records(n_benign, n_malignant, source="real", tag=""):
    out = []
    for i in range(n_benign + n_malignant):
        k = TumorClass.BENIGN if i < n_benign else TumorClass.MALIGNANT
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:10, 4:10] = 1
        out.append(
            DatasetRecord(
                record_id=f"{source}{tag}-{i:04d}",
                image=np.full((16, 16), 0.5),
                mask=mask,
                tumor_class=k,
                source=source,
            )
        )
    return out


class TestGeneratePhantom:
    def test_image_in_unit_range(self):
        rec = generate_phantom(PhantomParams(), seed=0)
        assert rec.image.min() >= 0.0 and rec.image.max() <= 1.0
        assert rec.image.shape == (64, 64)

    def test_same_seed_identical(self):
        a = generate_phantom(PhantomParams(), seed=42)
        b = generate_phantom(PhantomParams(), seed=42)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.tumor_class == b.tumor_class

    def test_mask_binary_and_nonempty(self):
        for seed in range(20):
            rec = generate_phantom(PhantomParams(), seed=seed)
            assert set(np.unique(rec.mask)) <= {0, 1}
            assert rec.mask.sum() >= 16

    def test_lesion_respects_edge_margin(self):
        for seed in range(30):
            rec = generate_phantom(PhantomParams(), seed=seed)
            r, c, h, w = bounding_rectangle(rec.mask)
            assert r >= 2 and c >= 2
            assert r + h <= 62 and c + w <= 62

    def test_benign_curvature_below_malignant(self):
        benign = [
            generate_phantom(PhantomParams(tumor_class=TumorClass.BENIGN), seed=s).mask
            for s in range(100)
        ]
        malignant = [
            generate_phantom(PhantomParams(tumor_class=TumorClass.MALIGNANT), seed=s).mask
            for s in range(100, 200)
        ]
        sb = curvature_stats(benign)
        sm = curvature_stats(malignant)
        assert sb.mean < sm.mean
        assert welch_t_test(sb, sm) < 0.01

    def test_texture_variant_changes_image_not_contract(self):
        a = generate_phantom(PhantomParams(texture_variant="coarse"), seed=3)
        assert a.image.min() >= 0.0 and a.image.max() <= 1.0


class TestLoadDirectory:
    def test_empty_directory(self, tmp_path):
        (tmp_path / "benign").mkdir()
        result = load_directory(tmp_path)
        assert result.records == [] and result.errors == []

    def test_fixture_with_corrupt_and_missing(self, tmp_path):
        # 10 candidate images; 1 unreadable, 1 without mask -> 8 records
        rng = np.random.default_rng(0)
        for cls in ("benign", "malignant"):
            (tmp_path / cls).mkdir()
        names = [("benign", f"b{i}") for i in range(5)] + [
            ("malignant", f"m{i}") for i in range(5)
        ]
        for idx, (cls, stem) in enumerate(names):
            img = (rng.random((32, 32)) * 255).astype(np.uint8)
            mask = np.zeros((32, 32), dtype=np.uint8)
            mask[8:20, 8:20] = 255
            img_path = tmp_path / cls / f"{stem}.png"
            if idx == 0:
                img_path.write_bytes(b"not a png")
            else:
                Image.fromarray(img).save(img_path)
            if idx != 3:  # drop one mask
                Image.fromarray(mask).save(tmp_path / cls / f"{stem}_mask.png")
        result = load_directory(tmp_path, resolution=16)
        assert len(result.records) == 8
        assert len(result.errors) == 2
        kinds = {type(e) for _, e in result.errors}
        assert kinds == {MissingMask, UnreadableFile}

    def test_all_zero_mask_flagged_and_excluded(self, tmp_path):
        (tmp_path / "benign").mkdir()
        Image.fromarray(np.full((32, 32), 128, dtype=np.uint8)).save(
            tmp_path / "benign" / "a.png"
        )
        Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(
            tmp_path / "benign" / "a_mask.png"
        )
        result = load_directory(tmp_path, resolution=16)
        assert result.records == []
        assert len(result.errors) == 1
        assert isinstance(result.errors[0][1], EmptyMask)

    def test_records_normalized_and_resized(self, tmp_path):
        (tmp_path / "malignant").mkdir()
        Image.fromarray((np.eye(40) * 255).astype(np.uint8)).save(
            tmp_path / "malignant" / "x.png"
        )
        mask = np.zeros((40, 40), dtype=np.uint8)
        mask[10:30, 10:30] = 255
        Image.fromarray(mask).save(tmp_path / "malignant" / "x_mask.png")
        result = load_directory(tmp_path, resolution=20)
        rec = result.records[0]
        assert rec.image.shape == (20, 20)
        assert 0.0 <= rec.image.min() and rec.image.max() <= 1.0
        assert set(np.unique(rec.mask)) <= {0, 1}
        assert rec.tumor_class == TumorClass.MALIGNANT


class TestSplit:
    def test_80_20_counts_per_class(self):
        records = make_records(50, 50)
        train, test = split(records, SplitSpec(seed=0))
        assert len(train) == 80 and len(test) == 20
        for group, counts in ((train, 40), (test, 10)):
            for k in TumorClass:
                assert sum(r.tumor_class == k for r in group) == counts

    def test_deterministic_and_disjoint(self):
        records = make_records(30, 20)
        t1, s1 = split(records, SplitSpec(seed=5))
        t2, s2 = split(records, SplitSpec(seed=5))
        assert [r.record_id for r in t1] == [r.record_id for r in t2]
        assert [r.record_id for r in s1] == [r.record_id for r in s2]
        assert not {r.record_id for r in t1} & {r.record_id for r in s1}

    def test_different_seed_different_split(self):
        records = make_records(30, 30)
        t1, _ = split(records, SplitSpec(seed=0))
        t2, _ = split(records, SplitSpec(seed=1))
        assert {r.record_id for r in t1} != {r.record_id for r in t2}

    def test_small_class_rejected(self):
        with pytest.raises(ClassTooSmall):
            split(make_records(10, 1), SplitSpec(seed=0))


class TestMixSynthetic:
    def test_arm_arithmetic(self):
        real = make_records(60, 40)
        pool = make_records(200, 200, source="synthetic")
        for ratio, total in ((0.0, 100), (0.25, 125), (0.5, 150), (1.0, 200), (2.0, 300)):
            mixed = mix_synthetic(real, pool, ratio)
            assert len(mixed) == total

    def test_class_proportions_within_one(self):
        real = make_records(60, 40)
        pool = make_records(300, 300, source="synthetic")
        for ratio in (0.25, 0.5, 1.0, 2.0):
            mixed = mix_synthetic(real, pool, ratio)
            added = [r for r in mixed if r.source == "synthetic"]
            n_add = len(added)
            for k, frac in ((TumorClass.BENIGN, 0.6), (TumorClass.MALIGNANT, 0.4)):
                got = sum(r.tumor_class == k for r in added)
                assert abs(got - frac * n_add) <= 1.0

    def test_ratio_zero_returns_real_only(self):
        real = make_records(5, 5)
        mixed = mix_synthetic(real, [], 0.0)
        assert [r.record_id for r in mixed] == [r.record_id for r in real]

    def test_deterministic_pool_order(self):
        real = make_records(10, 10)
        pool = make_records(50, 50, source="synthetic")
        a = mix_synthetic(real, pool, 1.0)
        b = mix_synthetic(real, pool, 1.0)
        assert [r.record_id for r in a] == [r.record_id for r in b]

    def test_pool_exhausted(self):
        real = make_records(50, 50)
        with pytest.raises(PoolExhausted):
            mix_synthetic(real, make_records(5, 5, source="synthetic"), 1.0)


class TestOrdinaryAugment:
    def disk_record(self):
        mask = np.zeros((64, 64), dtype=np.uint8)
        yy, xx = np.mgrid[0:64, 0:64]
        mask[(yy - 32) ** 2 + (xx - 32) ** 2 <= 144] = 1
        return DatasetRecord(
            record_id="d", image=np.clip(mask * 0.4 + 0.3, 0, 1),
            mask=mask, tumor_class=TumorClass.BENIGN, source="phantom",
        )

    def test_identity_params_unchanged(self):
        rec = self.disk_record()
        out = apply_augment(rec, AugmentParams())
        assert np.array_equal(out.image, rec.image)
        assert np.array_equal(out.mask, rec.mask)

    def test_double_flip_restores_original(self):
        rec = self.disk_record()
        params = AugmentParams(flip=True)
        out = apply_augment(apply_augment(rec, params), params)
        assert np.array_equal(out.image, rec.image)
        assert np.array_equal(out.mask, rec.mask)

    def test_mask_area_stable_over_draws(self):
        rec = self.disk_record()
        area = int(rec.mask.sum())
        rng = np.random.default_rng(0)
        for _ in range(1000):
            out = ordinary_augment(rec, rng)
            assert abs(int(out.mask.sum()) - area) / area < 0.10

    def test_outputs_stay_in_contract(self):
        rec = self.disk_record()
        rng = np.random.default_rng(1)
        for _ in range(50):
            out = ordinary_augment(rec, rng)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0
            assert set(np.unique(out.mask)) <= {0, 1}

    def test_draw_ranges(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = AugmentParams.draw(rng)
            assert -15.0 <= p.angle_deg <= 15.0
            assert all(abs(s) <= 0.05 for s in p.shift_frac)
            assert 0.8 <= p.brightness <= 1.2


class TestRectangles:
    def test_bounding_rectangle(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[5:15, 8:20] = 1
        assert bounding_rectangle(mask) == (5, 8, 10, 12)

    def test_rectangle_map_roundtrip(self):
        rect = (5, 8, 10, 12)
        m = rectangle_map((32, 32), rect)
        assert bounding_rectangle(m) == rect
        assert m.sum() == 120

    def test_rectangle_margin_enforced(self):
        with pytest.raises(ValueError):
            rectangle_map((32, 32), (0, 5, 10, 10))
        with pytest.raises(ValueError):
            rectangle_map((32, 32), (25, 5, 10, 10))

    def test_rectangle_min_area(self):
        with pytest.raises(ValueError):
            rectangle_map((32, 32), (5, 5, 3, 3))


class TestDatasetDirIO:
    def test_roundtrip(self, tmp_path):
        records = generate_phantom_set(PhantomParams(resolution=32), 6, 0)
        save_dataset(records, tmp_path / "ds")
        loaded = load_dataset_dir(tmp_path / "ds")
        assert len(loaded) == 6
        by_id = {r.record_id: r for r in loaded}
        for rec in records:
            got = by_id[rec.record_id.replace("/", "_")]
            assert got.tumor_class == rec.tumor_class
            assert np.array_equal(got.mask, rec.mask)
            # 8-bit quantization on the image
            assert np.abs(got.image - rec.image).max() <= 1.0 / 255.0 + 1e-9
