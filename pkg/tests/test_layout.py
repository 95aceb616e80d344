import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stlayout.layout import (LayoutError, LayoutSet, Level, RegionSpec, area_table,
                             build_cross_condition, merge_foreground, region_area_fraction,
                             region_labels, resample_mask, resolve_overlaps, self_condition)


def spec(i, level=Level.INSTANCE, priority=1, preserve=False):
    return RegionSpec(i, (f"r{i}",), level, priority, preserve)


def layout(masks, specs=None):
    masks = np.asarray(masks, dtype=bool)
    specs = specs or [spec(i + 1) for i in range(masks.shape[1])]
    return LayoutSet(specs, masks)


class TestResample:
    def test_uniform_fill(self):
        assert resample_mask(np.ones((4, 4), bool), (4, 4), (2, 2)).all()

    def test_minority_is_false(self):
        out = resample_mask(np.array([[1, 0], [0, 0]], bool), (2, 2), (1, 1))
        assert out.tolist() == [[False]]

    def test_tie_is_true(self):
        out = resample_mask(np.array([[1, 1], [0, 0]], bool), (2, 2), (1, 1))
        assert out.tolist() == [[True]]

    def test_all_2x2_patterns(self):
        for bits in itertools.product([False, True], repeat=4):
            m = np.array(bits).reshape(2, 2)
            expected = sum(bits) >= 2
            assert resample_mask(m, None, (1, 1))[0, 0] == expected

    def test_empty_mask(self):
        with pytest.raises(LayoutError, match="empty mask"):
            resample_mask(np.zeros((0, 3), bool), None, (2, 2))
        with pytest.raises(LayoutError, match="empty mask"):
            resample_mask(np.ones((2, 2), bool), None, (0, 2))

    def test_declared_resolution_checked(self):
        with pytest.raises(LayoutError):
            resample_mask(np.ones((2, 2), bool), (3, 3), (1, 1))

    def test_upsample_replicates(self):
        m = np.array([[1, 0], [0, 1]], bool)
        out = resample_mask(m, None, (4, 4))
        assert np.array_equal(out, np.kron(m, np.ones((2, 2), bool)))

    def test_fractional_cells(self):
        # 3 -> 2: each destination cell covers 1.5 source cells
        m = np.array([[1, 1, 0]] * 3, bool)
        out = resample_mask(m, None, (2, 2))
        # left cells fully true; right cells cover 0.5 true of 1.5 -> minority
        assert out.tolist() == [[True, False], [True, False]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_matches_area_oracle(self, h, w, hd, wd, seed):
        m = np.random.default_rng(seed).random((h, w)) < 0.5
        out = resample_mask(m, None, (hd, wd))
        # oracle: supersample to the common multiple grid and count
        big = np.kron(m, np.ones((hd, wd), dtype=np.int64))
        cells = big.reshape(hd, h, wd, w).sum(axis=(1, 3))
        assert np.array_equal(out, 2 * cells >= h * w)


class TestOverlaps:
    def test_disjoint_unchanged(self):
        m = np.zeros((1, 2, 4, 4), bool)
        m[0, 0, :2] = True
        m[0, 1, 2:] = True
        assert np.array_equal(resolve_overlaps(layout(m)).masks, m)

    def test_part_wins(self):
        m = np.zeros((1, 2, 4, 4), bool)
        m[0, 0] = True
        m[0, 1, 1:3, 1:3] = True
        lay = layout(m, [spec(1, Level.INSTANCE, 1), spec(2, Level.PART, 2)])
        out = resolve_overlaps(lay).masks
        assert out[0, 1].sum() == 4 and not (out[0, 0] & out[0, 1]).any()
        assert out[0, 0].sum() == 12

    def test_tie_goes_to_larger_id(self):
        m = np.zeros((1, 2, 4, 4), bool)
        m[0, 0, 0, :3] = True
        m[0, 0, 1, :] = True
        m[0, 1, 1, 1:4] = True
        m[0, 1, 2, :] = True
        union = (m[0, 0] | m[0, 1]).sum()
        shared = (m[0, 0] & m[0, 1]).sum()
        assert shared == 3
        out = resolve_overlaps(layout(m)).masks
        assert (out[0, 0] | out[0, 1]).sum() == union
        assert not (out[0, 0] & out[0, 1]).any()
        assert out[0, 1].sum() == m[0, 1].sum()
        assert out[0, 0].sum() == m[0, 0].sum() - shared

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 4))
    def test_union_preserved_and_disjoint(self, seed, r):
        rng = np.random.default_rng(seed)
        m = rng.random((2, r, 5, 5)) < 0.4
        specs = [spec(i + 1, priority=int(rng.integers(1, 3))) for i in range(r)]
        out = resolve_overlaps(layout(m, specs)).masks
        assert np.array_equal(out.any(axis=1), m.any(axis=1))
        assert (out.sum(axis=1) <= 1).all()


class TestForeground:
    def test_disjoint_union(self):
        m = np.zeros((1, 2, 8, 8), bool)
        m[0, 0].flat[:10] = True
        m[0, 1].flat[10:30] = True
        assert merge_foreground(layout(m), 0).sum() == 30

    def test_full_frame(self):
        assert merge_foreground(layout(np.ones((1, 1, 4, 4))), 0).all()

    def test_overlap_union(self):
        m = np.zeros((1, 2, 8, 8), bool)
        m[0, 0].flat[:10] = True
        m[0, 1].flat[5:25] = True
        assert merge_foreground(layout(m), 0).sum() == np.logical_or(m[0, 0], m[0, 1]).sum() == 25

    def test_preserve_regions_excluded(self):
        m = np.ones((1, 1, 2, 2), bool)
        lay = layout(m, [spec(1, preserve=True)])
        assert not merge_foreground(lay, 0).any()

    def test_frame_range(self):
        with pytest.raises(LayoutError):
            merge_foreground(layout(np.ones((1, 1, 2, 2))), 3)


class TestCrossCondition:
    def test_full_cover(self):
        cm = build_cross_condition(layout(np.ones((1, 1, 2, 2))), {1: range(0, 5)}, 5)
        assert cm.values.shape == (1, 4, 5) and (cm.values == 1).all()

    def test_empty_region(self):
        cm = build_cross_condition(layout(np.zeros((1, 1, 2, 2))), {1: range(0, 5)}, 5)
        assert (cm.values == 0).all()

    def test_column_sums_by_counting(self):
        m = np.zeros((1, 2, 8, 8), bool)
        m[0, 0].flat[:40] = True
        m[0, 1].flat[40:] = True
        cm = build_cross_condition(layout(m), {1: range(0, 4), 2: range(4, 8)}, 8)
        sums = cm.values[0].sum(axis=0)
        assert sums[:4].sum() == 40 * 4 and sums[4:].sum() == 24 * 4

    def test_ambiguous_ownership(self):
        with pytest.raises(LayoutError, match="ambiguous token ownership"):
            build_cross_condition(layout(np.ones((1, 2, 2, 2))), {1: range(0, 3), 2: range(2, 4)}, 5)

    def test_unowned_columns_flagged(self):
        cm = build_cross_condition(layout(np.ones((1, 1, 2, 2))), {1: [range(1, 2), range(3, 4)]}, 5)
        assert cm.modulated.tolist() == [False, True, False, True, False]
        assert cm.owner.tolist() == [0, 1, 0, 1, 0]
        assert (cm.values[..., ~cm.modulated] == 0).all()

    def test_span_out_of_range(self):
        with pytest.raises(LayoutError):
            build_cross_condition(layout(np.ones((1, 1, 2, 2))), {1: range(4, 7)}, 5)


class TestLabels:
    def test_all_background(self):
        labels = region_labels(layout(np.zeros((1, 1, 4, 4))))
        assert (labels == 0).all() and (self_condition(labels) == 1).all()

    def test_two_halves_block_diagonal(self):
        m = np.zeros((1, 2, 2, 4), bool)
        m[0, 0, :, :2] = True
        m[0, 1, :, 2:] = True
        labels = region_labels(layout(m))
        r = self_condition(labels)
        for i in range(8):
            for j in range(8):
                assert r[i, j] == (labels.flat[i] == labels.flat[j])
        # reorder tokens by label: two all-ones blocks on the diagonal
        order = np.argsort(labels.reshape(-1), kind="stable")
        ro = r[np.ix_(order, order)]
        assert (ro[:4, :4] == 1).all() and (ro[4:, 4:] == 1).all() and (ro[:4, 4:] == 0).all()

    def test_cross_frame_pair_positive(self):
        m = np.zeros((2, 1, 4, 6), bool)
        m[0, 0, 1:3, 0:2] = True
        m[1, 0, 1:3, 2:4] = True
        labels = region_labels(layout(m))
        r = self_condition(labels)
        t = 24
        x = 1 * 6 + 0
        y = t + 1 * 6 + 2
        assert r[x, y] == 1 and r[y, x] == 1
        # a region-1 token in frame 1 and a background token in frame 2
        assert r[x, t] == 0

    def test_requires_resolved(self):
        with pytest.raises(LayoutError):
            region_labels(layout(np.ones((1, 2, 2, 2))))


class TestArea:
    def test_fractions(self):
        full = layout(np.ones((1, 1, 4, 4)))
        assert region_area_fraction(full, 0, 1) == 1.0
        assert region_area_fraction(layout(np.zeros((1, 1, 4, 4))), 0, 1) == 0.0
        m = np.zeros((1, 1, 16, 16), bool)
        m.flat[:64] = True
        assert region_area_fraction(layout(m), 0, 1) == 0.25

    def test_background_entry(self):
        m = np.zeros((2, 2, 4, 4), bool)
        m[0, 0, :1] = True
        m[1, 1, :2] = True
        areas = area_table(layout(m))
        assert areas[1].tolist() == [0.25, 0.0]
        assert areas[2].tolist() == [0.0, 0.5]
        assert areas[0].tolist() == [0.75, 0.5]


class TestValidation:
    def test_bad_ids(self):
        with pytest.raises(LayoutError):
            RegionSpec(0, ("a",))
        with pytest.raises(LayoutError):
            LayoutSet([spec(1), spec(1)], np.zeros((1, 2, 2, 2)))

    def test_channel_count(self):
        with pytest.raises(LayoutError):
            LayoutSet([spec(1)], np.zeros((1, 2, 2, 2)))

    def test_part_priority_check(self):
        m = np.ones((1, 2, 2, 2), bool)
        lay = layout(m, [spec(1), spec(2, Level.PART, priority=1)])
        with pytest.raises(LayoutError):
            lay.check_part_priorities()
        layout(m, [spec(1), spec(2, Level.PART, priority=2)]).check_part_priorities()
