"""Classification metrics and Activation Precision.

The AP oracles are enumerated by hand on 4x4 maps; F1 is checked against an
independent per-class counting implementation.
"""

import inspect
import json
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partproto.metrics import EvalResult, activation_precision, confusion_matrix, evaluate, f1

# -- f1 / confusion ------------------------------------------------------------


def loop_confusion(preds, labels, v):
    m = np.zeros((v, v), dtype=np.int64)
    for p, y in zip(preds, labels):
        m[y][p] += 1
    return m


def loop_f1(preds, labels, v, mode):
    # independent counting route: explicit per-class tp/fp/fn
    tp = [sum(1 for p, y in zip(preds, labels) if p == c and y == c) for c in range(v)]
    fp = [sum(1 for p, y in zip(preds, labels) if p == c and y != c) for c in range(v)]
    fn = [sum(1 for p, y in zip(preds, labels) if p != c and y == c) for c in range(v)]
    if mode == "micro":
        denom = sum(tp) + 0.5 * (sum(fp) + sum(fn))
        return sum(tp) / denom if denom else 0.0
    scores = []
    for c in range(v):
        denom = tp[c] + 0.5 * (fp[c] + fn[c])
        scores.append(tp[c] / denom if denom else 0.0)
    return sum(scores) / v


def test_perfect_predictions_score_one():
    labels = [0, 1, 2, 3, 4] * 4
    assert f1(labels, labels, mode="macro") == 1.0
    assert f1(labels, labels, mode="micro") == 1.0


def test_all_one_class_on_balanced_binary_micro_half():
    labels = [0] * 10 + [1] * 10
    preds = [0] * 20
    assert f1(preds, labels, mode="micro", v=2) == 0.5


def test_all_wrong_scores_zero():
    labels = [0, 1] * 5
    preds = [1, 0] * 5
    assert f1(preds, labels, mode="macro") == 0.0
    assert f1(preds, labels, mode="micro") == 0.0


def test_confusion_matrix_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = int(rng.integers(2, 6))
        n = int(rng.integers(1, 60))
        labels = rng.integers(0, v, size=n)
        preds = rng.integers(0, v, size=n)
        np.testing.assert_array_equal(confusion_matrix(preds, labels, v),
                                      loop_confusion(preds, labels, v))


def test_confusion_rows_sum_to_class_counts():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 5, size=100)
    preds = rng.integers(0, 5, size=100)
    m = confusion_matrix(preds, labels, 5)
    np.testing.assert_array_equal(m.sum(axis=1), np.bincount(labels, minlength=5))


def test_f1_matches_counting_oracle():
    rng = np.random.default_rng(2)
    for _ in range(25):
        v = int(rng.integers(2, 6))
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, v, size=n).tolist()
        preds = rng.integers(0, v, size=n).tolist()
        for mode in ("macro", "micro"):
            assert f1(preds, labels, mode=mode, v=v) == pytest.approx(
                loop_f1(preds, labels, v, mode), abs=1e-12)


def test_micro_f1_equals_accuracy():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 5, size=200)
    preds = rng.integers(0, 5, size=200)
    assert f1(preds, labels, mode="micro", v=5) == pytest.approx(float((preds == labels).mean()))


def test_macro_is_unweighted_class_mean():
    # 9 examples of class 0 all right, 1 of class 1 wrong: macro ignores imbalance
    labels = [0] * 9 + [1]
    preds = [0] * 10
    prec0, rec0 = 9 / 10, 1.0
    f0 = 2 * prec0 * rec0 / (prec0 + rec0)
    assert f1(preds, labels, mode="macro", v=2) == pytest.approx((f0 + 0.0) / 2)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_f1_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    for mode in ("macro", "micro"):
        a = f1([p for p, _ in pairs], [y for _, y in pairs], mode=mode, v=4)
        b = f1([p for p, _ in shuffled], [y for _, y in shuffled], mode=mode, v=4)
        assert a == pytest.approx(b, abs=1e-12)


def test_f1_rejects_unknown_mode_and_shape_mismatch():
    with pytest.raises(ValueError):
        f1([0, 1], [0, 1], mode="weighted")
    with pytest.raises(ValueError):
        f1([0, 1, 0], [0, 1], v=2)


def test_evaluate_fields_and_serialization():
    labels = [0, 0, 1, 1, 2, 2]
    preds = [0, 1, 1, 1, 2, 0]
    res = evaluate(preds, labels, v=3, prototype_ap=np.array([0.5, 0.25, np.nan]))
    assert isinstance(res, EvalResult)
    assert res.micro_f1 == pytest.approx(4 / 6)
    assert res.macro_f1 == pytest.approx(loop_f1(preds, labels, 3, "macro"))
    np.testing.assert_array_equal(res.confusion.sum(axis=1), [2, 2, 2])
    d = json.loads(res.to_json())
    assert d["confusion"] == res.confusion.tolist()
    assert d["prototype_ap"][0] == 0.5
    lines = res.confusion_csv().strip().split("\n")
    assert len(lines) == 4
    assert lines[0].split(",")[1:] == ["0", "1", "2"]
    body = [[int(x) for x in line.split(",")[1:]] for line in lines[1:]]
    np.testing.assert_array_equal(np.array(body), res.confusion)


# -- activation precision ------------------------------------------------------


def test_ap_attribution_inside_mask_is_one_both_variants():
    amap = np.zeros((8, 8))
    amap[2:4, 2:4] = np.array([[5.0, 4.0], [3.0, 2.0]])
    mask = np.zeros((8, 8))
    mask[2:4, 2:4] = 1.0
    for variant in ("original", "modified"):
        assert activation_precision([amap], [mask], tau=5.0, variant=variant) == 1.0


def test_ap_four_by_four_hand_oracle():
    # distinct values 0..15; tau=25 thresholds at the 75th linear percentile,
    # 0.75*15 = 11.25, so T = {12, 13, 14, 15} (the bottom row)
    amap = np.arange(16, dtype=np.float64).reshape(4, 4)
    mask = np.zeros((4, 4))
    mask[3, 0] = mask[3, 1] = 1.0
    original = activation_precision([amap], [mask], tau=25.0, variant="original")
    modified = activation_precision([amap], [mask], tau=25.0, variant="modified")
    assert original == pytest.approx(Fraction(2, 4))
    assert modified == pytest.approx(Fraction(12 + 13, 12 + 13 + 14 + 15))


def test_ap_four_by_four_threshold_ties_included():
    # twelve 1s and four 2s; 75th pct interpolates to 1.25, so T = the 2s only
    amap = np.ones((4, 4))
    amap[2:, 2:] = 2.0
    mask = np.zeros((4, 4))
    mask[2, 2] = 1.0
    original = activation_precision([amap], [mask], tau=25.0, variant="original")
    modified = activation_precision([amap], [mask], tau=25.0, variant="modified")
    assert original == pytest.approx(0.25)
    # constant over its support, so the variants coincide
    assert modified == pytest.approx(original)


def test_ap_constant_map_includes_everything():
    # a constant map thresholds at its own value; ties included keeps all pixels
    amap = np.full((4, 4), 3.0)
    mask = np.zeros((4, 4))
    mask[0] = 1.0
    for variant in ("original", "modified"):
        assert activation_precision([amap], [mask], variant=variant) == pytest.approx(0.25)


def test_ap_mean_over_examples():
    a1 = np.zeros((4, 4)); a1[0, 0] = 1.0
    a2 = np.zeros((4, 4)); a2[3, 3] = 1.0
    m1 = np.zeros((4, 4)); m1[0, 0] = 1.0   # hit
    m2 = np.zeros((4, 4)); m2[0, 0] = 1.0   # miss
    assert activation_precision([a1, a2], [m1, m2], variant="original") == pytest.approx(0.5)


def test_ap_zero_mass_example_skipped_with_warning():
    good = np.zeros((4, 4)); good[1, 1] = 2.0
    mask = np.ones((4, 4))
    with pytest.warns(UserWarning, match="skipping"):
        val = activation_precision([np.zeros((4, 4)), good], [mask, mask], variant="modified")
    assert val == 1.0


def test_ap_all_examples_skipped_returns_nan():
    with pytest.warns(UserWarning):
        val = activation_precision([np.zeros((3, 3))], [np.ones((3, 3))], variant="modified")
    assert np.isnan(val)


def test_ap_validation_errors():
    amap, mask = np.ones((2, 2)), np.ones((2, 2))
    with pytest.raises(ValueError):
        activation_precision([amap], [mask], tau=0.0)
    with pytest.raises(ValueError):
        activation_precision([amap], [mask], tau=101.0)
    with pytest.raises(ValueError):
        activation_precision([amap], [mask], variant="exotic")
    with pytest.raises(ValueError):
        activation_precision([np.ones((2, 3))], [mask])


def test_ap_default_tau_is_five():
    assert inspect.signature(activation_precision).parameters["tau"].default == 5.0


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_ap_bounded_by_unit_interval(seed):
    rng = np.random.default_rng(seed)
    amap = rng.uniform(0.0, 5.0, size=(6, 6))
    mask = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float64)
    for variant in ("original", "modified"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            val = activation_precision([amap], [mask], tau=10.0, variant=variant)
        if not np.isnan(val):
            assert 0.0 <= val <= 1.0


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_ap_variants_coincide_on_constant_support(seed):
    # low values below threshold, all supra-threshold values equal
    rng = np.random.default_rng(seed)
    amap = rng.uniform(0.0, 0.5, size=(6, 6))
    idx = rng.choice(36, size=4, replace=False)
    amap.flat[idx] = 2.0
    mask = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float64)
    o = activation_precision([amap], [mask], tau=5.0, variant="original")
    m = activation_precision([amap], [mask], tau=5.0, variant="modified")
    assert o == pytest.approx(m, abs=1e-12)
