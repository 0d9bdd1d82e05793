"""Metric correctness: confusion-count oracles, brute-force Hausdorff
equivalence, empty-mask conventions, and geometric invariances."""

import numpy as np
import pytest

from voxseg.errors import DataError, ShapeError
from voxseg.metrics import (
    boundary_mask,
    confusion_counts,
    dice_metric,
    evaluate_case,
    hausdorff,
    sensitivity_specificity,
)
from voxseg.volume import Volume


def brute_hausdorff(pred, truth, spacing=(1.0, 1.0, 1.0), percentile=100.0):
    """All-pairs reference: same boundary definition, f64 distances."""
    bp = np.argwhere(boundary_mask(pred)).astype(np.float64)
    bt = np.argwhere(boundary_mask(truth)).astype(np.float64)
    if len(bp) == 0 or len(bt) == 0:
        return None
    s = np.asarray(spacing, dtype=np.float64)

    def directed(src, dst):
        out = np.empty(len(src))
        for i, p in enumerate(src):
            d = (dst - p) * s
            out[i] = np.sqrt((d * d).sum(axis=1)).min()
        return out

    pooled = np.concatenate([directed(bp, bt), directed(bt, bp)])
    return float(pooled.max()) if percentile == 100 else float(np.percentile(pooled, percentile))


def random_mask(rng, shape=None, density=None):
    shape = shape if shape is not None else tuple(rng.integers(2, 9, size=3))
    density = density if density is not None else rng.uniform(0.1, 0.7)
    return rng.random(shape) < density


class TestDice:
    def test_identical_nonempty(self):
        rng = np.random.default_rng(0)
        m = random_mask(rng, (5, 5, 5), 0.4)
        assert dice_metric(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = np.zeros((2, 2, 2), bool)
        b = np.zeros((2, 2, 2), bool)
        a[0, 0, 0] = True
        b[1, 1, 1] = True
        assert dice_metric(a, b) == 0.0

    def test_known_overlap(self):
        # |P| = 4, |T| = 6, |P ∩ T| = 3 -> 2*3/10.
        p = np.zeros((1, 1, 8), bool)
        t = np.zeros((1, 1, 8), bool)
        p[0, 0, :4] = True
        t[0, 0, 1:7] = True
        assert dice_metric(p, t) == pytest.approx(0.6)

    def test_empty_conventions(self):
        e = np.zeros((3, 3, 3), bool)
        m = e.copy()
        m[1, 1, 1] = True
        assert dice_metric(e, e) == 1.0
        assert dice_metric(e, m) == 0.0 and dice_metric(m, e) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = random_mask(rng, (6, 6, 6)), random_mask(rng, (6, 6, 6))
            assert dice_metric(a, b) == dice_metric(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_metric(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


class TestSensitivitySpecificity:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(2)
        m = random_mask(rng, (4, 4, 4), 0.5)
        assert sensitivity_specificity(m, m) == (1.0, 1.0)

    def test_all_ones_prediction(self):
        t = np.zeros((2, 2, 2), bool)
        t[0] = True  # half foreground
        p = np.ones((2, 2, 2), bool)
        assert sensitivity_specificity(p, t) == (1.0, 0.0)

    def test_constructed_confusion_counts(self):
        # TP=3, FN=1, TN=10, FP=2 on a 16-voxel grid.
        t = np.zeros((1, 4, 4), bool)
        p = np.zeros((1, 4, 4), bool)
        t[0, 0, :4] = True  # |T| = 4
        p[0, 0, :3] = True  # 3 hits, 1 miss
        p[0, 1, :2] = True  # 2 false alarms
        assert confusion_counts(p, t) == (3, 2, 10, 1)
        sens, spec = sensitivity_specificity(p, t)
        assert sens == pytest.approx(0.75) and spec == pytest.approx(10 / 12)

    def test_empty_truth_conventions(self):
        e = np.zeros((2, 2, 2), bool)
        p = e.copy()
        assert sensitivity_specificity(p, e) == (1.0, 1.0)
        p[0, 0, 0] = True
        sens, spec = sensitivity_specificity(p, e)
        assert sens == 0.0 and spec == pytest.approx(7 / 8)


class TestBoundary:
    def test_solid_block_boundary_is_shell(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        b = boundary_mask(m)
        assert b.sum() == 27 - 1  # all but the single interior voxel
        assert not b[2, 2, 2]

    def test_edge_voxels_count_as_boundary(self):
        m = np.ones((3, 3, 3), bool)
        assert boundary_mask(m).sum() == 26  # only the very center is interior


class TestHausdorff:
    def test_identical_masks_zero(self):
        rng = np.random.default_rng(3)
        m = random_mask(rng, (6, 6, 6), 0.3)
        assert hausdorff(m, m, (1.0, 1.0, 1.0), 100) == 0.0
        assert hausdorff(m, m, (1.0, 1.0, 1.0), 95) == 0.0

    def test_single_voxel_pair(self):
        p = np.zeros((4, 4, 4), bool)
        t = np.zeros((4, 4, 4), bool)
        p[0, 0, 0] = True
        t[3, 0, 0] = True
        assert hausdorff(p, t, (1.0, 1.0, 1.0), 100) == 3.0
        assert hausdorff(p, t, (2.0, 1.0, 1.0), 100) == 6.0

    def test_empty_mask_sentinel(self):
        m = np.zeros((3, 3, 3), bool)
        n = m.copy()
        n[1, 1, 1] = True
        assert hausdorff(m, n) is None
        assert hausdorff(n, m) is None
        assert hausdorff(m, m) is None

    def test_matches_brute_force_exactly(self):
        # The acceptance-scale sweep lives in test_acceptance; this is a
        # focused sample across spacings and percentiles.
        rng = np.random.default_rng(4)
        for trial in range(40):
            p, t = random_mask(rng), random_mask(rng)
            if p.shape != t.shape:
                t = random_mask(rng, p.shape)
            spacing = (1.0, 1.0, 1.0) if trial % 2 else tuple(rng.choice([0.25, 0.5, 1.0, 1.25, 2.0], 3))
            for pct in (100, 95):
                assert hausdorff(p, t, spacing, pct) == brute_hausdorff(p, t, spacing, pct)

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        p = np.zeros((10, 10, 10), bool)
        t = np.zeros((10, 10, 10), bool)
        p[2:5, 2:4, 2:3] = True
        t[3:6, 2:5, 2:4] = True
        base = hausdorff(p, t, (1.0, 1.0, 1.0), 100)
        shifted = hausdorff(np.roll(p, 3, axis=2), np.roll(t, 3, axis=2), (1.0, 1.0, 1.0), 100)
        assert shifted == base

    def test_spacing_scales_linearly(self):
        rng = np.random.default_rng(6)
        p, t = random_mask(rng, (6, 6, 6)), random_mask(rng, (6, 6, 6))
        a = hausdorff(p, t, (1.0, 1.0, 1.0), 100)
        b = hausdorff(p, t, (2.0, 2.0, 2.0), 100)
        assert b == pytest.approx(2 * a, rel=1e-12)

    def test_percentile_95_at_most_max(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p, t = random_mask(rng, (7, 7, 7)), random_mask(rng, (7, 7, 7))
            if not (p.any() and t.any()):
                continue
            assert hausdorff(p, t, (1, 1, 1), 95) <= hausdorff(p, t, (1, 1, 1), 100)

    def test_flip_invariance(self):
        rng = np.random.default_rng(8)
        p, t = random_mask(rng, (6, 7, 8)), random_mask(rng, (6, 7, 8))
        base = (
            dice_metric(p, t),
            sensitivity_specificity(p, t),
            hausdorff(p, t, (1, 1, 1), 100),
            hausdorff(p, t, (1, 1, 1), 95),
        )
        for ax in range(3):
            pf, tf = np.flip(p, axis=ax), np.flip(t, axis=ax)
            got = (
                dice_metric(pf, tf),
                sensitivity_specificity(pf, tf),
                hausdorff(pf, tf, (1, 1, 1), 100),
                hausdorff(pf, tf, (1, 1, 1), 95),
            )
            assert got[0] == base[0] and got[1] == base[1]
            assert got[2] == pytest.approx(base[2], rel=1e-12)
            assert got[3] == pytest.approx(base[3], rel=1e-12)

    def test_bad_spacing_rejected(self):
        m = np.ones((2, 2, 2), bool)
        with pytest.raises(DataError):
            hausdorff(m, m, (0.0, 1.0, 1.0))


class TestEvaluateCase:
    def _labels(self, arr):
        return Volume(np.asarray(arr, dtype=np.float32)[None], kind="label_map")

    def test_perfect_prediction(self):
        rng = np.random.default_rng(9)
        lab = rng.choice([0.0, 1.0, 2.0, 4.0], size=(6, 6, 6))
        lab[0, 0, :4] = [1, 2, 4, 0]
        res = evaluate_case(self._labels(lab), self._labels(lab), case_id="p")
        for cls in ("WT", "TC", "ET"):
            r = res.per_class[cls]
            assert r.dice == 1.0 and r.hausdorff_max_mm == 0.0 and r.hausdorff95_mm == 0.0
            assert r.sensitivity == 1.0 and r.specificity == 1.0
            assert not r.pred_empty and not r.truth_empty

    def test_all_background_prediction(self):
        rng = np.random.default_rng(10)
        truth = rng.choice([0.0, 1.0, 2.0, 4.0], size=(5, 5, 5))
        truth[0, 0, :3] = [1, 2, 4]
        res = evaluate_case(self._labels(np.zeros((5, 5, 5))), self._labels(truth))
        for cls in ("WT", "TC", "ET"):
            r = res.per_class[cls]
            assert r.dice == 0.0 and r.hausdorff_max_mm is None
            assert r.pred_empty and not r.truth_empty

    def test_hand_computed_small_case(self):
        # 2 voxels of label 4 predicted where truth has one 4 and one 1:
        # ET: |P|=2, |T|=1, overlap 1; TC: P={1,4}-members identical; WT same.
        pred = np.zeros((2, 2, 2))
        truth = np.zeros((2, 2, 2))
        pred[0, 0, 0] = 4.0
        pred[0, 0, 1] = 4.0
        truth[0, 0, 0] = 4.0
        truth[0, 0, 1] = 1.0
        res = evaluate_case(self._labels(pred), self._labels(truth))
        assert res.per_class["ET"].dice == pytest.approx(2 * 1 / (2 + 1))
        assert res.per_class["TC"].dice == 1.0
        assert res.per_class["WT"].dice == 1.0
        assert res.per_class["ET"].sensitivity == 1.0  # the one true ET voxel is hit
        assert res.per_class["ET"].specificity == pytest.approx(6 / 7)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            evaluate_case(self._labels(np.zeros((2, 2, 2))), self._labels(np.zeros((2, 2, 3))))
