import numpy as np
import pytest

from dicm.metrics import auc, auc_pairwise, gauc, log_loss


def test_auc_perfect_and_inverted():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0


def test_auc_hand_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc_pairwise([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class_rejected():
    with pytest.raises(ValueError, match="undefined"):
        auc([0.1, 0.9], [1, 1])
    with pytest.raises(ValueError, match="undefined"):
        auc_pairwise([0.1, 0.9], [0, 0])


def test_auc_ties_get_half_credit():
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    assert auc_pairwise([0.5, 0.5], [1, 0]) == 0.5


def test_auc_matches_pairwise_oracle_randomized():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        # quantized scores force plenty of ties
        scores = np.round(rng.normal(size=n), 1)
        assert abs(auc(scores, labels) - auc_pairwise(scores, labels)) < 1e-12


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, size=50)
    labels[0], labels[1] = 0, 1
    base = auc(scores, labels)
    for f in (lambda s: 3 * s + 7, np.tanh, lambda s: np.exp(s / 4)):
        assert abs(auc(f(scores), labels) - base) < 1e-12


def test_gauc_single_user_equals_auc():
    scores = [0.2, 0.9, 0.4]
    labels = [0, 1, 1]
    assert gauc([5, 5, 5], scores, labels) == auc(scores, labels)


def test_gauc_weighted_example():
    users = ["a"] * 2 + ["b"] * 6
    scores = [0.9, 0.1] + [0.5] * 6
    labels = [1, 0] + [1, 0, 1, 0, 1, 0]
    assert gauc(users, scores, labels) == (2 * 1.0 + 6 * 0.5) / 8


def test_gauc_excludes_single_class_users():
    users = [1, 1, 2, 2]
    scores = [0.8, 0.2, 0.9, 0.7]
    labels = [1, 0, 1, 1]  # user 2 is all-positive
    assert gauc(users, scores, labels) == 1.0
    with pytest.raises(ValueError, match="GAUC undefined"):
        gauc([1, 1], [0.5, 0.6], [1, 1])


def test_gauc_matches_per_user_brute_force():
    rng = np.random.default_rng(2)
    users = rng.integers(0, 5, size=80)
    scores = rng.normal(size=80)
    labels = rng.integers(0, 2, size=80)
    num = den = 0.0
    for u in np.unique(users):
        m = users == u
        if labels[m].min() == labels[m].max():
            continue
        num += m.sum() * auc_pairwise(scores[m], labels[m])
        den += m.sum()
    assert abs(gauc(users, scores, labels) - num / den) < 1e-12


def test_gauc_identical_per_user_data_equals_common_auc():
    scores = [0.1, 0.7, 0.4, 0.9]
    labels = [0, 1, 0, 1]
    users = np.repeat([1, 2, 3], 4)
    common = auc(scores, labels)
    assert abs(gauc(users, scores * 3, labels * 3) - common) < 1e-12


def test_log_loss_values():
    assert abs(log_loss([0.5, 0.5], [0, 1]) - np.log(2)) < 1e-12
    assert log_loss([1.0, 0.0], [1, 0]) < 1e-10
    expect = -0.5 * (np.log(0.9) + np.log(0.8))
    assert abs(log_loss([0.9, 0.2], [1, 0]) - expect) < 1e-12
    assert abs(log_loss([0.9, 0.2], [1, 0]) - 0.16425) < 5e-6


def test_log_loss_clamps_and_counts():
    loss, clamped = log_loss([0.0, 1.0, 0.5], [0, 1, 1], return_clamped=True)
    assert clamped == 2
    assert np.isfinite(loss)
