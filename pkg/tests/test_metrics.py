"""Metrics against O(n^2) pairwise and threshold-scan oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lir.metrics import accuracy, auroc, fpr_at_tpr


def auroc_pairwise(id_scores, ood_scores):
    """Brute-force oracle: wins + half-ties over all pairs."""
    wins = 0.0
    for a in id_scores:
        for b in ood_scores:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def fpr_scan_oracle(id_scores, ood_scores, target):
    """Scan candidate thresholds (the ID values) for the loosest valid one."""
    id_scores = np.asarray(id_scores, dtype=float)
    ood_scores = np.asarray(ood_scores, dtype=float)
    valid = [t for t in np.unique(id_scores) if np.mean(id_scores >= t) >= target]
    t_star = max(valid)
    return float(np.mean(ood_scores >= t_star))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([2.0, 3.0], [0.0, 1.0]) == 1.0

    def test_all_ties(self):
        assert auroc([1.0, 1.0, 1.0], [1.0, 1.0]) == 0.5

    def test_interleaved(self):
        # pairs: (1,2) (1,4) (3,2) (3,4) -> one win of four
        assert auroc([1.0, 3.0], [2.0, 4.0]) == 0.25

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(11)
        for trial in range(500):
            n_id = int(rng.integers(1, 101))
            n_ood = int(rng.integers(1, 101))
            if trial % 2:
                # integer scores force heavy tie structure
                s_id = rng.integers(0, 8, n_id).astype(float)
                s_ood = rng.integers(0, 8, n_ood).astype(float)
            else:
                s_id = rng.normal(size=n_id)
                s_ood = rng.normal(size=n_ood)
            assert auroc(s_id, s_ood) == auroc_pairwise(s_id, s_ood)

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])
        with pytest.raises(ValueError):
            auroc([1.0], [])

    @settings(max_examples=150)
    @given(
        s_id=st.lists(st.floats(-50, 50), min_size=1, max_size=25),
        s_ood=st.lists(st.floats(-50, 50), min_size=1, max_size=25),
    )
    def test_orientation_completeness(self, s_id, s_ood):
        a = auroc(s_id, s_ood)
        b = auroc(-np.asarray(s_id), -np.asarray(s_ood))
        assert a + b == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=100)
    @given(
        s_id=st.lists(st.floats(-20, 20), min_size=1, max_size=20),
        s_ood=st.lists(st.floats(-20, 20), min_size=1, max_size=20),
    )
    def test_monotone_transform_invariance(self, s_id, s_ood):
        base = auroc(s_id, s_ood)
        combined = np.concatenate([s_id, s_ood])
        for f in (lambda x: 3.0 * x + 7.0, np.exp, np.arctan):
            # a transform that collapses distinct floats into ties is no
            # longer strictly increasing on the data; skip those
            if np.unique(f(combined)).size != np.unique(combined).size:
                continue
            assert auroc(f(np.asarray(s_id)), f(np.asarray(s_ood))) == pytest.approx(
                base, abs=1e-12
            )


class TestFprAtTpr:
    def test_worked_example(self):
        # 95 of the 100 distinct ID scores sit at or above 6; OoD 7 passes, 3 fails
        s_id = np.arange(1, 101, dtype=float)
        assert fpr_at_tpr(s_id, [3.0, 7.0], 0.95) == 0.5

    def test_perfect_separation(self):
        assert fpr_at_tpr([10.0, 11.0, 12.0], [0.0, 1.0], 0.95) == 0.0

    def test_identical_distributions_lower_bound(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=200)
        fpr = fpr_at_tpr(s, s.copy(), 0.95)
        assert fpr >= 0.95 - 1.0 / 200

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(300):
            n_id = int(rng.integers(1, 60))
            n_ood = int(rng.integers(1, 60))
            s_id = rng.integers(0, 10, n_id).astype(float)
            s_ood = rng.integers(0, 10, n_ood).astype(float)
            target = float(rng.uniform(0.05, 1.0))
            assert fpr_at_tpr(s_id, s_ood, target) == fpr_scan_oracle(s_id, s_ood, target)

    def test_exact_rational_target(self):
        # target * n lands exactly on an integer; no float-rounding slack
        s_id = np.arange(20, dtype=float)
        s_ood = np.arange(20, dtype=float)
        assert fpr_at_tpr(s_id, s_ood, 0.5) == fpr_scan_oracle(s_id, s_ood, 0.5)

    @settings(max_examples=100)
    @given(
        seed=st.integers(0, 2**31),
        t_hi=st.floats(0.5, 1.0),
        t_lo=st.floats(0.05, 0.5),
    )
    def test_monotone_in_target(self, seed, t_hi, t_lo):
        rng = np.random.default_rng(seed)
        s_id = rng.normal(size=30)
        s_ood = rng.normal(size=30)
        assert fpr_at_tpr(s_id, s_ood, t_lo) <= fpr_at_tpr(s_id, s_ood, t_hi)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            fpr_at_tpr([1.0], [1.0], 0.0)
        with pytest.raises(ValueError):
            fpr_at_tpr([1.0], [1.0], 1.5)


class TestAccuracy:
    def test_one_hot_match(self):
        logits = np.eye(3)
        assert accuracy(logits, [0, 1, 2]) == 1.0

    def test_tie_breaks_to_lowest_index(self):
        logits = np.zeros((4, 3))
        assert accuracy(logits, [0, 0, 0, 0]) == 1.0
        assert accuracy(logits, [1, 1, 1, 1]) == 0.0

    def test_half_correct(self):
        logits = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert accuracy(logits, [0, 1]) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accuracy(np.zeros((2, 3)), [0])
