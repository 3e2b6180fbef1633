import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfg import imageio
from lfg.errors import ConfigError, DataError
from lfg.imageio import (DatasetSplit, IntensityGrid, LesionMask, PhantomConfig,
                         SliceRecord, extract_liver_roi, filter_small_lesions,
                         generate_phantoms, nearest_index_map, read_dataset,
                         read_grid, resize, split_patients, window_normalize,
                         write_dataset, write_grid, write_raw_grid)


def make_record(img, liver, lesions, pid="A"):
    return SliceRecord(image=IntensityGrid(img), liver=LesionMask(liver),
                       lesions=[LesionMask(m) for m in lesions], patient_id=pid)


class TestWindowNormalize:
    def test_lower_endpoint_maps_to_zero(self):
        grid = window_normalize(np.full((8, 8), -100.0))
        assert grid.values.max() == 0.0

    def test_midpoint_maps_to_half(self):
        grid = window_normalize(np.full((8, 8), 50.0))
        np.testing.assert_allclose(grid.values, 0.5)

    def test_below_window_clamps(self):
        # oracle: clamp((-250 - (-100)) / 300, 0, 1) = clamp(-0.5) = 0
        grid = window_normalize(np.full((8, 8), -250.0))
        assert grid.values.max() == 0.0

    def test_bad_window_rejected(self):
        with pytest.raises(ConfigError):
            window_normalize(np.zeros((8, 8)), lo=200, hi=-100)

    @given(st.floats(min_value=-2000, max_value=2000, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_output_in_unit_interval(self, hu):
        grid = window_normalize(np.full((8, 8), hu))
        assert 0.0 <= grid.values.min() and grid.values.max() <= 1.0

    @given(st.floats(min_value=-500, max_value=500), st.floats(min_value=0.01, max_value=500))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_hu(self, hu, delta):
        lo = window_normalize(np.full((8, 8), hu)).values[0, 0]
        hi = window_normalize(np.full((8, 8), hu + delta)).values[0, 0]
        assert hi >= lo


class TestResize:
    def test_constant_grid_stays_constant(self):
        grid = IntensityGrid(np.full((8, 8), 0.37, dtype=np.float32))
        out = resize(grid, (20, 12))
        np.testing.assert_allclose(out.values, np.float32(0.37), rtol=1e-6)

    def test_identity_is_bitwise_equal(self, rng):
        g = IntensityGrid(rng.random((10, 14)).astype(np.float32))
        out = resize(g, (10, 14))
        np.testing.assert_array_equal(out.values, g.values)
        m = LesionMask((rng.random((10, 14)) > 0.5).astype(np.uint8))
        np.testing.assert_array_equal(resize(m, (10, 14)).bits, m.bits)

    def test_checkerboard_mask_nearest_index_oracle(self):
        board = np.indices((16, 16)).sum(axis=0) % 2
        mask = LesionMask(board.astype(np.uint8))
        out = resize(mask, (8, 8))
        ri = nearest_index_map(16, 8)
        ci = nearest_index_map(16, 8)
        expected = board[np.ix_(ri, ci)]
        np.testing.assert_array_equal(out.bits, expected)
        # explicit index map for halving: floor((i+0.5)*2) = 2i+1
        np.testing.assert_array_equal(ri, 2 * np.arange(8) + 1)

    @given(st.integers(min_value=8, max_value=24), st.integers(min_value=8, max_value=24))
    @settings(max_examples=30, deadline=None)
    def test_mask_resize_stays_binary(self, th, tw):
        rng = np.random.default_rng(th * 100 + tw)
        mask = LesionMask((rng.random((13, 17)) > 0.5).astype(np.uint8))
        out = resize(mask, (th, tw))
        assert set(np.unique(out.bits)) <= {0, 1}

    def test_small_target_rejected(self):
        g = IntensityGrid(np.zeros((8, 8), dtype=np.float32))
        with pytest.raises(ConfigError):
            resize(g, (4, 8))


class TestLiverRoi:
    def test_full_liver_leaves_image_unchanged(self, rng):
        img = rng.random((8, 8)).astype(np.float32)
        rec = make_record(img, np.ones((8, 8), np.uint8), [])
        np.testing.assert_array_equal(extract_liver_roi(rec).values, img)

    def test_empty_liver_rejected(self, rng):
        rec = make_record(rng.random((8, 8)).astype(np.float32),
                          np.zeros((8, 8), np.uint8), [])
        with pytest.raises(DataError):
            extract_liver_roi(rec)

    def test_elementwise_multiply_oracle(self):
        img = np.arange(64, dtype=np.float32).reshape(8, 8) / 64.0
        liver = np.zeros((8, 8), np.uint8)
        liver[:, :3] = 1
        rec = make_record(img, liver, [])
        out = extract_liver_roi(rec)
        np.testing.assert_array_equal(out.values, img * liver)
        assert out.values[:, 3:].max() == 0.0


class TestFilterSmallLesions:
    def _record_with_areas(self, areas):
        img = np.zeros((32, 32), dtype=np.float32)
        liver = np.ones((32, 32), np.uint8)
        lesions = []
        col = 0
        for a in areas:
            m = np.zeros((32, 32), np.uint8)
            m.flat[col:col + a] = 1
            col += a
            lesions.append(m)
        return make_record(img, liver, lesions)

    def test_exactly_ten_pixels_removed(self):
        out = filter_small_lesions([self._record_with_areas([10])])
        assert out[0].lesions == [] and not out[0].has_lesion

    def test_eleven_pixels_kept(self):
        out = filter_small_lesions([self._record_with_areas([11])])
        assert len(out[0].lesions) == 1 and out[0].has_lesion

    def test_mixed_areas(self):
        out = filter_small_lesions([self._record_with_areas([5, 40])])
        assert len(out[0].lesions) == 1
        assert out[0].lesions[0].area == 40

    @given(st.lists(st.integers(min_value=1, max_value=60), min_size=0, max_size=5))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, areas):
        rec = self._record_with_areas(areas)
        once = filter_small_lesions([rec])
        twice = filter_small_lesions(once)
        assert [m.area for m in once[0].lesions] == [m.area for m in twice[0].lesions]


class TestSplitPatients:
    def _records(self, pids):
        return [make_record(np.zeros((8, 8), np.float32), np.ones((8, 8), np.uint8),
                            [], pid=p) for p in pids]

    def test_single_patient_all_train(self):
        split = split_patients(self._records(["A"] * 4), ratios=(1, 0, 0))
        assert len(split.train) == 4 and not split.validation and not split.test

    def test_explicit_lists_route_by_id(self):
        recs = self._records(["A", "B", "C", "A"])
        split = split_patients(recs, explicit=(["A"], ["B"], ["C"]))
        assert {r.patient_id for r in split.train} == {"A"} and len(split.train) == 2
        assert {r.patient_id for r in split.validation} == {"B"}
        assert {r.patient_id for r in split.test} == {"C"}

    def test_ten_patients_five_folds(self):
        recs = self._records([f"P{i}" for i in range(10)])
        split = split_patients(recs, ratios=(1, 0, 0), k_folds=5)
        # partition-check oracle: folds cover all train patients, 2 each
        counts = {}
        for pid, fold in split.folds.items():
            counts[fold] = counts.get(fold, 0) + 1
        assert sorted(counts) == [0, 1, 2, 3, 4]
        assert all(c == 2 for c in counts.values())

    def test_duplicate_patient_rejected(self):
        with pytest.raises(DataError):
            split_patients(self._records(["A", "B"]), explicit=(["A"], ["A"], []))

    def test_disjointness_enforced_exactly(self):
        recs = self._records(["A", "B", "C", "D", "E", "F"])
        split = split_patients(recs, ratios=(0.5, 0.25, 0.25), seed=3)
        ids = [imageio.patient_ids(part) for part in (split.train, split.validation, split.test)]
        assert ids[0] & ids[1] == set() and ids[0] & ids[2] == set() and ids[1] & ids[2] == set()

    def test_overlap_in_constructed_split_raises(self):
        recs = self._records(["A", "B"])
        with pytest.raises(DataError):
            DatasetSplit(train=recs[:1], validation=recs[:1], test=[])


class TestPhantoms:
    def test_same_seed_bitwise_identical(self):
        a = generate_phantoms(3, 8, PhantomConfig(dims=(32, 32)))
        b = generate_phantoms(3, 8, PhantomConfig(dims=(32, 32)))
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.image.values, rb.image.values)
            np.testing.assert_array_equal(ra.liver.bits, rb.liver.bits)
            assert len(ra.lesions) == len(rb.lesions)

    def test_zero_rate_means_no_lesions(self):
        recs = generate_phantoms(1, 6, PhantomConfig(dims=(32, 32), lesion_rate=0.0))
        assert all(not r.has_lesion for r in recs)

    def test_counting_oracle_seed7(self):
        recs = generate_phantoms(7, 10, PhantomConfig(dims=(64, 64), lesion_rate=0.5))
        assert sum(1 for r in recs if r.has_lesion) == 5  # floor(10 * 0.5)

    def test_lesions_inside_liver_and_dark(self):
        recs = generate_phantoms(11, 10, PhantomConfig(dims=(64, 64), lesion_rate=1.0))
        for r in recs:
            for m in r.lesions:
                assert not np.any(m.bits & ~r.liver.bits)
                inside = r.image.values[m.bits == 1].mean()
                ring = r.image.values[(r.liver.bits == 1) & (m.bits == 0)].mean()
                assert inside < ring

    def test_small_dims_rejected(self):
        with pytest.raises(ConfigError):
            generate_phantoms(0, 2, PhantomConfig(dims=(16, 16)))


class TestContainerAndManifest:
    def test_grid_round_trip(self, tmp_path, rng):
        g = IntensityGrid(rng.random((9, 11)).astype(np.float32))
        write_grid(tmp_path / "g.lfg", g)
        back = read_grid(tmp_path / "g.lfg")
        assert isinstance(back, IntensityGrid)
        np.testing.assert_array_equal(back.values, g.values)

        m = LesionMask((rng.random((9, 11)) > 0.5).astype(np.uint8))
        write_grid(tmp_path / "m.lfg", m)
        back = read_grid(tmp_path / "m.lfg")
        assert isinstance(back, LesionMask)
        np.testing.assert_array_equal(back.bits, m.bits)

    def test_magic_layout(self, tmp_path):
        g = IntensityGrid(np.zeros((8, 8), dtype=np.float32))
        write_grid(tmp_path / "g.lfg", g)
        blob = (tmp_path / "g.lfg").read_bytes()
        assert blob[:4] == b"LFG1"
        kind = int.from_bytes(blob[4:8], "little")
        h = int.from_bytes(blob[8:12], "little")
        w = int.from_bytes(blob[12:16], "little")
        assert (kind, h, w) == (0, 8, 8)
        assert len(blob) == 16 + 4 * 64

    def test_raw_hu_round_trip(self, tmp_path):
        raw = np.linspace(-500, 500, 64, dtype=np.float32).reshape(8, 8)
        write_raw_grid(tmp_path / "raw.lfg", raw)
        back = read_grid(tmp_path / "raw.lfg", raw=True)
        np.testing.assert_array_equal(back, raw)

    def test_dataset_round_trip(self, tmp_path):
        recs = generate_phantoms(5, 6, PhantomConfig(dims=(32, 32)))
        manifest = write_dataset(recs, tmp_path / "ds")
        back = read_dataset(manifest)
        assert len(back) == len(recs)
        for a, b in zip(recs, back):
            assert a.patient_id == b.patient_id
            np.testing.assert_array_equal(a.image.values, b.image.values)
            assert len(a.lesions) == len(b.lesions)

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.lfg").write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(DataError):
            read_grid(tmp_path / "bad.lfg")


class TestInvariants:
    def test_lesion_outside_liver_rejected(self):
        liver = np.zeros((8, 8), np.uint8)
        liver[:4] = 1
        lesion = np.zeros((8, 8), np.uint8)
        lesion[6, 6] = 1
        with pytest.raises(DataError):
            make_record(np.zeros((8, 8), np.float32), liver, [lesion])

    def test_intensity_range_enforced(self):
        with pytest.raises(DataError):
            IntensityGrid(np.full((8, 8), 1.5))

    def test_mask_binary_enforced(self):
        with pytest.raises(DataError):
            LesionMask(np.full((8, 8), 2))
