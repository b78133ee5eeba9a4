import itertools

import numpy as np
import pytest

from eratlab.model import MLP, one_hot
from eratlab.selection import (
    SelectionConfig,
    class_quotas,
    class_scores,
    count_entropy,
    rebalanced_select,
    sampling_rates,
    score,
    select,
    selection_audit,
    threshold_partition,
)


class FixedModel(MLP):
    """Returns fixed probabilities regardless of input (for scoring examples)."""

    def __init__(self, probs):
        super().__init__([1, len(probs)])
        self.params[0].data[:] = 0.0
        self.params[1].data = np.log(np.asarray(probs, dtype=np.float64))


def brute_force_select(scores, classes, total, rates):
    """Oracle: per class, sort by (score, index) and slice the quota."""
    quotas = class_quotas(total, rates)
    labeled = []
    for k, q in enumerate(quotas):
        members = sorted((scores[i], i) for i in range(len(scores)) if classes[i] == k)
        labeled += [i for _, i in members[:q]]
    return sorted(labeled)


def test_score_examples():
    x = np.zeros((1, 1))
    assert score(FixedModel([0.6, 0.3, 0.1]), x, one_hot([0], 3))[0] == pytest.approx(0.26)
    wrong = FixedModel([1 - 2e-12, 1e-12, 1e-12])
    assert score(wrong, x, one_hot([1], 3))[0] == pytest.approx(2.0)
    exact = FixedModel([1 - 2e-15, 1e-15, 1e-15])
    assert score(exact, x, one_hot([0], 3))[0] == pytest.approx(0.0, abs=1e-12)


def test_scores_lie_in_zero_two():
    model = MLP([4, 8, 3], seed=0)
    rng = np.random.default_rng(0)
    s = score(model, rng.uniform(size=(50, 4)), one_hot(rng.integers(0, 3, 50), 3))
    assert np.all((s >= 0) & (s <= 2))


def test_threshold_examples():
    lab, unl, mu = threshold_partition([0.1, 0.9])
    assert mu == 0.5 and lab.tolist() == [0] and unl.tolist() == [1]
    lab, unl, mu = threshold_partition([0.4] * 5)
    assert mu == pytest.approx(0.4) and lab.size == 5 and unl.size == 0
    lab, _, _ = threshold_partition([0.0, 1.0, 0.5])
    assert 2 in lab.tolist()
    with pytest.raises(ValueError):
        threshold_partition([])


def test_class_score_examples():
    scores = np.array([0.0, 0.0, 0.2, 0.4, 0.7, 9.0])
    classes = np.array([0, 0, 1, 1, 2, 2])
    prev = np.array([0, 1, 2, 3, 4])
    np.testing.assert_allclose(class_scores(scores, classes, prev, 4), [0.0, 0.3, 0.7, 1.0])


@pytest.mark.parametrize("eta", [0.0, 0.1, 0.5, 1.0])
def test_rates_sum_to_one(eta):
    rng = np.random.default_rng(1)
    for _ in range(100):
        s = rng.uniform(0, 2, size=rng.integers(2, 11))
        assert abs(sampling_rates(s, eta).sum() - 1) < 1e-9


def test_rate_examples():
    assert np.all(sampling_rates([0.1, 0.5, 1.7], 0.0) == 1 / 3)
    np.testing.assert_allclose(sampling_rates([0.3] * 4, 0.7), 0.25)
    np.testing.assert_allclose(sampling_rates([0.2, 0.6], 1.0), [2 / 3, 1 / 3])


def test_rates_permutation_equivariant_and_monotone():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.uniform(0, 1, size=5)
        perm = rng.permutation(5)
        np.testing.assert_allclose(sampling_rates(s[perm], 0.3), sampling_rates(s, 0.3)[perm])
        lower = s.copy()
        lower[0] -= 0.1
        assert sampling_rates(lower, 0.3)[0] >= sampling_rates(s, 0.3)[0]


def test_rate_floor_for_scores_above_one():
    r = sampling_rates([1.5, 0.0], 1.0)
    assert r[0] > 0 and r[0] < 1e-5


def test_eta_bounds():
    with pytest.raises(ValueError):
        SelectionConfig(eta=1.5)
    with pytest.raises(ValueError):
        sampling_rates([0.1, 0.2], -0.1)


def test_quotas_preserve_total_and_break_ties_to_lower_class():
    assert class_quotas(10, [1 / 3] * 3).tolist() == [4, 3, 3]
    rng = np.random.default_rng(3)
    for _ in range(100):
        r = rng.dirichlet(np.ones(5))
        total = int(rng.integers(0, 300))
        q = class_quotas(total, r)
        assert q.sum() == total and np.all(np.abs(q - total * r) < 1)


def test_quota_above_population_takes_whole_class():
    scores = np.array([0.1, 0.2, 0.3, 0.4])
    classes = np.array([0, 1, 1, 1])
    split, quotas = rebalanced_select(scores, classes, 4, np.array([0.75, 0.25]))
    assert quotas.tolist() == [3, 1]
    assert split.labeled.tolist() == [0, 1]


def test_eta_one_uniform_scores_matches_raw_ordering():
    rng = np.random.default_rng(4)
    classes = np.repeat(np.arange(4), 25)
    scores = rng.uniform(size=100)
    split, _ = rebalanced_select(scores, classes, 40, sampling_rates(np.full(4, 0.3), 1.0))
    for k in range(4):
        members = np.flatnonzero(classes == k)
        expected = members[np.argsort(scores[members])][:10]
        assert sorted(expected) == sorted(set(split.labeled) & set(members))


def test_rebalanced_select_matches_oracle_and_partitions():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 501))
        k = int(rng.integers(2, 8))
        classes = rng.integers(0, k, n)
        scores = np.round(rng.uniform(0, 2, n), int(rng.integers(1, 4)))  # rounding forces ties
        rates = sampling_rates(rng.uniform(0, 1.5, k), float(rng.uniform()))
        total = int(rng.integers(0, n + 1))
        split, _ = rebalanced_select(scores, classes, total, rates)
        assert split.labeled.tolist() == brute_force_select(scores, classes, total, rates)
        both = np.concatenate([split.labeled, split.unlabeled])
        assert np.array_equal(np.sort(both), np.arange(n))
        for c in range(k):
            sel = scores[split.labeled][classes[split.labeled] == c]
            rest = scores[split.unlabeled][classes[split.unlabeled] == c]
            if sel.size and rest.size:
                assert sel.max() <= rest.min()


def test_select_round_and_audit():
    rng = np.random.default_rng(6)
    n, k = 120, 3
    classes = rng.integers(0, k, n)
    scores = rng.uniform(0, 2, n)
    split, state = select(scores, classes, np.arange(n), SelectionConfig(0.1), k)
    assert state.class_quotas.sum() == state.raw_labeled.size
    assert split.labeled.size + split.unlabeled.size == n
    truth = classes.copy()
    truth[:30] = (truth[:30] + 1) % k
    audit = selection_audit(split, state, classes, k, truth)
    clean_sel = np.sum(truth[split.labeled] == classes[split.labeled])
    assert audit["precision"] == pytest.approx(clean_sel / split.labeled.size)
    assert sum(audit["labeled_counts"]) == split.labeled.size


def test_no_rebalance_uses_raw_partition():
    scores = np.array([0.1, 0.2, 1.5, 1.6, 0.3])
    split, _ = select(scores, np.array([0, 0, 1, 1, 1]), np.arange(5), SelectionConfig(0.1, rebalance=False), 2)
    assert split.labeled.tolist() == [0, 1, 4]


def test_count_entropy():
    assert count_entropy([5, 5]) == pytest.approx(np.log(2))
    assert count_entropy([9, 0]) == 0.0
    assert count_entropy([1, 1, 1, 1]) > count_entropy([7, 1, 1, 1])


def test_tiny_exhaustive_oracle():
    # every (score ordering, class assignment) for n=4, K=2
    for classes in itertools.product(range(2), repeat=4):
        classes = np.array(classes)
        for perm in itertools.permutations(range(4)):
            scores = np.array(perm, dtype=float) / 4
            for total in range(5):
                rates = np.array([0.6, 0.4])
                split, _ = rebalanced_select(scores, classes, total, rates)
                assert split.labeled.tolist() == brute_force_select(scores, classes, total, rates)
