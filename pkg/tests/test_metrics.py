"""Recall and mAP against brute-force counting references."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgnet.errors import DataError
from rgnet.metrics import EvalRecord, average_precision, mean_average_precision, per_class_recall

from oracles import brute_force_ap, brute_force_recalls


def records_from(scores, truths):
    return [EvalRecord(np.asarray(s, dtype=np.float64), int(t), f"img{k}", (0, 1))
            for k, (s, t) in enumerate(zip(scores, truths))]


def random_records(rng, n, c):
    return records_from(rng.normal(0, 1, (n, c)), rng.integers(0, c, n))


class TestRecall:
    def test_all_correct_gives_100(self):
        scores = np.eye(3)[[0, 1, 2, 0]] * 5
        recs = records_from(scores, [0, 1, 2, 0])
        assert per_class_recall(recs, 3).tolist() == [100.0, 100.0, 100.0]

    def test_hand_case(self):
        scores = [[0.9, 0.1], [0.2, 0.8], [0.3, 0.7]]
        recs = records_from(scores, [0, 0, 1])
        assert per_class_recall(recs, 2).tolist() == [50.0, 100.0]

    def test_absent_class_undefined(self):
        recs = records_from([[1.0, 0.0]], [0])
        out = per_class_recall(recs, 2)
        assert out[0] == 100.0 and np.isnan(out[1])

    def test_argmax_tie_breaks_low_index(self):
        recs = records_from([[0.5, 0.5]], [0])
        assert per_class_recall(recs, 2)[0] == 100.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        recs = random_records(rng, 40, 5)
        got = per_class_recall(recs, 5)
        preds = [int(np.argmax(r.scores)) for r in recs]
        ref = brute_force_recalls([r.true_class for r in recs], preds, 5)
        assert np.array_equal(np.nan_to_num(got, nan=-1), np.nan_to_num(ref, nan=-1))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            per_class_recall([], 3)


class TestAveragePrecision:
    def test_hand_case_five_sixths(self):
        ap = average_precision(np.array([0.9, 0.8, 0.7]), np.array([True, False, True]))
        assert ap == (1.0 + 2.0 / 3.0) / 2.0

    def test_perfect_separation(self):
        ap = average_precision(np.array([0.9, 0.8, 0.2, 0.1]), np.array([True, True, False, False]))
        assert ap == 1.0

    def test_requires_positive(self):
        with pytest.raises(DataError):
            average_precision(np.array([0.1]), np.array([False]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 64))
        scores = rng.normal(0, 1, n)
        if rng.random() < 0.4:
            scores = np.round(scores, 1)      # force ties
        positive = rng.random(n) < 0.4
        if not positive.any():
            positive[int(rng.integers(n))] = True
        got = average_precision(scores, positive)
        ref = brute_force_ap(scores, positive)
        assert abs(got - ref) <= 1e-9


class TestMeanAveragePrecision:
    def test_perfectly_separated_scores_give_100(self):
        scores = np.eye(4)[[0, 1, 2, 3, 0, 2]] * 3.0
        recs = records_from(scores, [0, 1, 2, 3, 0, 2])
        assert mean_average_precision(recs, 4) == 100.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        recs = random_records(rng, 30, 4)
        base = mean_average_precision(recs, 4)
        warped = [EvalRecord(np.exp(2.0 * r.scores) + 5.0, r.true_class, r.image_id, r.pair)
                  for r in recs]
        assert abs(mean_average_precision(warped, 4) - base) <= 1e-9

    def test_duplicating_all_records_preserves_map(self):
        rng = np.random.default_rng(4)
        recs = random_records(rng, 25, 3)
        base = mean_average_precision(recs, 3)
        doubled = []
        for r in recs:
            doubled.extend([r, EvalRecord(r.scores.copy(), r.true_class, r.image_id, r.pair[::-1])])
        assert abs(mean_average_precision(doubled, 3) - base) <= 1e-9

    def test_zero_positive_class_warns_and_excluded(self):
        recs = records_from([[3.0, 0.0, 0.0], [0.0, 3.0, 1.0]], [0, 1])
        with pytest.warns(UserWarning, match="class 2"):
            m = mean_average_precision(recs, 3)
        assert m == 100.0

    def test_bounds(self):
        rng = np.random.default_rng(5)
        for seed in range(10):
            recs = random_records(np.random.default_rng(seed), 20, 3)
            m = mean_average_precision(recs, 3)
            r = per_class_recall(recs, 3)
            assert 0.0 <= m <= 100.0
            ok = ~np.isnan(r)
            assert (r[ok] >= 0).all() and (r[ok] <= 100).all()

    def test_non_finite_scores_rejected(self):
        recs = records_from([[np.inf, 0.0]], [0])
        with pytest.raises(DataError):
            mean_average_precision(recs, 2)
