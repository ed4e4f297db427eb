import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from multires_fer.metrics import (
    ConfusionMatrix,
    accumulate,
    accuracy,
    balanced_cross_entropy,
    build_report,
    challenge_score,
    macro_average,
    macro_f1,
    merge,
    per_class_f1,
    round3,
)


def brute_force_report(preds, labels, k):
    """Independent pair-counting oracle in plain Python."""
    counts = [[0] * k for _ in range(k)]
    for p, y in zip(preds, labels):
        counts[y][p] += 1
    f1 = []
    for c in range(k):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    acc = sum(1 for p, y in zip(preds, labels) if p == y) / len(labels)
    mf1 = sum(f1) / k
    return counts, f1, acc, mf1, 0.33 * acc + 0.67 * mf1


def scalar_weighted_ce(logits, labels, weights):
    num = den = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        num += weights[y] * (lse - row[y])
        den += weights[y]
    return num / den


# -- loss ---------------------------------------------------------------------

def test_uniform_logits_give_log_k():
    loss = balanced_cross_entropy(torch.zeros(5, 7), torch.arange(5), torch.ones(7))
    assert float(loss) == pytest.approx(math.log(7), abs=1e-6)
    assert float(loss) == pytest.approx(1.9459, abs=1e-4)


def test_saturated_correct_logits():
    logits = torch.zeros(3, 7, dtype=torch.float64)
    labels = torch.tensor([0, 3, 6])
    logits[torch.arange(3), labels] = 30.0
    assert float(balanced_cross_entropy(logits, labels, torch.ones(7))) < 1e-9


def test_hand_computed_two_class_value():
    logits = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss = balanced_cross_entropy(logits, torch.tensor([0, 1]), torch.tensor([1.0, 3.0]))
    assert float(loss) == pytest.approx(0.31326168751822286, abs=1e-12)
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_matches_scalar_oracle_and_torch_weighted_ce(rng):
    for _ in range(20):
        b, k = rng.integers(1, 20), rng.integers(2, 9)
        logits = rng.normal(0, 3, size=(b, k))
        labels = rng.integers(0, k, size=b)
        weights = rng.uniform(0.1, 5.0, size=k)
        ours = float(balanced_cross_entropy(torch.tensor(logits), torch.tensor(labels), torch.tensor(weights)))
        assert ours == pytest.approx(scalar_weighted_ce(logits.tolist(), labels.tolist(), weights.tolist()), rel=1e-12)
        ref = F.cross_entropy(torch.tensor(logits), torch.tensor(labels), weight=torch.tensor(weights))
        assert ours == pytest.approx(float(ref), rel=1e-12)


def test_large_logits_do_not_overflow():
    logits = torch.tensor([[1e4, -1e4, 0.0], [-1e4, 1e4, 5.0]], dtype=torch.float32)
    loss = balanced_cross_entropy(logits, torch.tensor([1, 0]), torch.ones(3))
    assert math.isfinite(float(loss))
    assert float(loss) == pytest.approx(2e4, rel=1e-6)


def test_uniform_weights_equal_plain_ce(rng):
    logits = torch.tensor(rng.normal(size=(32, 7)))
    labels = torch.tensor(rng.integers(0, 7, size=32))
    ours = balanced_cross_entropy(logits, labels, torch.ones(7, dtype=torch.float64))
    assert float(ours) == pytest.approx(float(F.cross_entropy(logits, labels)), abs=1e-12)


def test_shift_invariance(rng):
    logits = torch.tensor(rng.normal(size=(16, 7)))
    labels = torch.tensor(rng.integers(0, 7, size=16))
    w = torch.tensor(rng.uniform(0.5, 3, size=7))
    shift = torch.tensor(rng.normal(0, 50, size=(16, 1)))
    a = balanced_cross_entropy(logits, labels, w)
    b = balanced_cross_entropy(logits + shift, labels, w)
    assert float(a) == pytest.approx(float(b), abs=1e-9)


def test_label_out_of_range_raises():
    with pytest.raises(ValueError):
        balanced_cross_entropy(torch.zeros(2, 7), torch.tensor([0, 7]), torch.ones(7))


# -- confusion matrix ---------------------------------------------------------

def test_accumulate_counts():
    cm = accumulate(ConfusionMatrix.empty(2), [0, 0, 1, 1], [0, 1, 1, 1])
    assert cm.counts.tolist() == [[1, 0], [1, 2]]


def test_accumulate_commutes_and_empty_batch_is_noop(rng):
    a = (rng.integers(0, 7, 50), rng.integers(0, 7, 50))
    b = (rng.integers(0, 7, 30), rng.integers(0, 7, 30))
    cm = ConfusionMatrix.empty()
    assert accumulate(accumulate(cm, *a), *b) == accumulate(accumulate(cm, *b), *a)
    assert accumulate(cm, [], []) == cm


def test_accumulate_rejects_out_of_range():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(), [7], [0])
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix.empty(), [0], [-1])


def test_sharded_accumulation_is_identical(rng):
    preds, labels = rng.integers(0, 7, 400), rng.integers(0, 7, 400)
    whole = accumulate(ConfusionMatrix.empty(), preds, labels)
    for shards in (2, 3, 7, 13):
        parts = [accumulate(ConfusionMatrix.empty(), p, y)
                 for p, y in zip(np.array_split(preds, shards), np.array_split(labels, shards))]
        assert merge(parts) == whole
        assert merge(parts[::-1]) == whole


# -- F1 / accuracy ------------------------------------------------------------

def test_two_class_hand_example():
    cm = ConfusionMatrix(np.array([[1, 0], [1, 2]]))
    np.testing.assert_allclose(per_class_f1(cm), [2 / 3, 0.8], atol=1e-12)
    assert accuracy(cm) == 0.75
    assert macro_f1(cm) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)
    assert round(macro_f1(cm), 4) == 0.7333


def test_perfect_diagonal():
    cm = ConfusionMatrix(np.diag([5, 3, 2, 9, 1, 1, 4]))
    assert per_class_f1(cm).tolist() == [1.0] * 7
    assert accuracy(cm) == 1.0 and macro_f1(cm) == 1.0


def test_degenerate_class_gives_zero_f1():
    counts = np.zeros((7, 7), dtype=np.int64)
    counts[0, 0] = 4
    counts[1, 1] = 2
    f1 = per_class_f1(ConfusionMatrix(counts))
    assert f1[2:].tolist() == [0.0] * 5


def test_single_column_predictions_accuracy_one_seventh():
    counts = np.zeros((7, 7), dtype=np.int64)
    counts[:, 0] = 10
    cm = ConfusionMatrix(counts)
    assert accuracy(cm) == pytest.approx(1 / 7)
    assert macro_f1(cm) == pytest.approx(0.25 / 7)


def test_empty_matrix_raises():
    with pytest.raises(ValueError):
        accuracy(ConfusionMatrix.empty())
    with pytest.raises(ValueError):
        build_report(ConfusionMatrix.empty())


# -- challenge score ----------------------------------------------------------

def test_challenge_score_table3():
    s = challenge_score(0.970, 0.964)
    assert s == pytest.approx(0.96598, abs=1e-12)
    assert round3(s) == "0.966"


@pytest.mark.parametrize("x", [0.0, 0.123, 0.5, 0.999, 1.0])
def test_challenge_score_fixed_line(x):
    assert challenge_score(x, x) == pytest.approx(x, abs=1e-15)


def test_challenge_score_rejects_out_of_range():
    with pytest.raises(ValueError):
        challenge_score(1.01, 0.5)
    with pytest.raises(ValueError):
        challenge_score(0.5, -0.1)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_challenge_score_monotone(a, b, delta):
    a2, b2 = min(1.0, a + delta), min(1.0, b + delta)
    assert challenge_score(a2, b) >= challenge_score(a, b)
    assert challenge_score(a, b2) >= challenge_score(a, b)
    assert 0.0 <= challenge_score(a, b) <= 1.0 + 1e-15


def test_round3_is_half_even_on_decimal():
    assert round3(0.9635) == "0.964"
    assert round3(0.9625) == "0.962"
    assert round3(0.96342857) == "0.963"


# -- report -------------------------------------------------------------------

def test_report_identity_matrix():
    r = build_report(ConfusionMatrix(np.eye(7, dtype=np.int64)))
    assert r.per_class_f1 == [1.0] * 7
    assert (r.accuracy, r.macro_f1, r.challenge_score) == (1.0, 1.0, 1.0)
    assert r.support == [1] * 7


def test_macro_average_of_table2_row():
    assert macro_average([0.978, 0.960, 0.965, 0.971, 0.946, 0.987, 0.937]) == pytest.approx(6.744 / 7, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=300))
def test_report_matches_brute_force(pairs):
    preds = [p for p, _ in pairs]
    labels = [y for _, y in pairs]
    counts, f1, acc, mf1, score = brute_force_report(preds, labels, 7)
    r = build_report(accumulate(ConfusionMatrix.empty(), preds, labels))
    assert r.support == [sum(row) for row in counts]
    np.testing.assert_allclose(r.per_class_f1, f1, rtol=0, atol=1e-12)
    assert r.accuracy == pytest.approx(acc, abs=1e-12)
    assert r.macro_f1 == pytest.approx(mf1, abs=1e-12)
    assert r.challenge_score == pytest.approx(score, abs=1e-12)
    assert all(0.0 <= v <= 1.0 for v in r.per_class_f1 + [r.accuracy, r.macro_f1, r.challenge_score])


def test_report_json_and_tables():
    r = build_report(ConfusionMatrix(np.eye(7, dtype=np.int64) * 3))
    assert '"challenge_score": 1.0' in r.to_json()
    assert r.summary_table().splitlines()[-1].split() == ["1.000", "1.000", "1.000"]
    assert r.per_class_table().splitlines()[1].split()[-7:] == ["1.000"] * 7
