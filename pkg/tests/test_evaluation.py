from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegforest.compact import pack_forest, packed_size_bytes
from eegforest.errors import DataFormatError
from eegforest.evaluation import (Metrics, PruneCurve, bench_inference, confusion_matrix,
                                  evaluate, f1, prune_curve)
from eegforest.forest import (ExtraTreesArtifactClassifier, Forest, TreeNode, TreeParams,
                              grow_forest, prune_forest)


def test_f1_examples():
    assert f1(0.5, 0.5) == 0.5
    assert f1(1.0, 0.0) == 0.0
    assert f1(0.0, 0.0) == 0.0
    assert f1(0.853, 0.829) == pytest.approx(0.84083, abs=1e-5)


def test_hand_built_three_class_confusion():
    cm = np.array([[5, 0, 0], [1, 3, 0], [0, 1, 2]])
    m = Metrics.from_confusion(cm)
    assert m.accuracy == 10 / 12
    # spreadsheet-style: per class precision from columns, recall from rows
    f = [Fraction(10, 11), Fraction(3, 4), Fraction(4, 5)]
    weighted = (5 * f[0] + 4 * f[1] + 3 * f[2]) / 12
    assert m.weighted_f1 == pytest.approx(float(weighted), abs=1e-15)
    assert m.macro_f1 == pytest.approx(float(sum(f) / 3), abs=1e-15)
    np.testing.assert_allclose(m.precision, [5 / 6, 3 / 4, 1.0])
    np.testing.assert_allclose(m.recall, [1.0, 3 / 4, 2 / 3])
    assert m.support.tolist() == [5, 4, 3]


def test_confusion_orientation():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 1], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [0, 1, 0]]


def test_empty_class_gives_zero_not_nan():
    m = Metrics.from_confusion(np.array([[4, 0, 0], [0, 0, 0], [1, 0, 0]]))
    assert np.all(np.isfinite(m.f1)) and m.f1[1] == 0 and m.f1[2] == 0


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=200))
def test_accuracy_is_trace_ratio(pairs):
    t, p = np.array(pairs).T
    m = Metrics.from_confusion(confusion_matrix(t, p, 4))
    assert m.accuracy == np.trace(m.confusion) / m.confusion.sum()
    assert 0.0 <= m.weighted_f1 <= 1.0
    assert m.confusion.sum() == len(pairs)


@settings(max_examples=100)
@given(st.integers(1, 30), st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_weighted_equals_macro_when_balanced(per_class, n_classes, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), per_class)
    pred = rng.integers(0, n_classes, y.size)
    m = Metrics.from_confusion(confusion_matrix(y, pred, n_classes))
    assert m.weighted_f1 == pytest.approx(m.macro_f1, abs=1e-12)


def _constant_forest(cls, n_features=3, n_classes=2, outputs=1):
    counts = np.zeros(n_classes, dtype=np.int64)
    counts[cls] = 1
    return Forest([[TreeNode(counts.copy())] for _ in range(outputs)], n_classes, n_features)


def test_degenerate_background_predictor():
    y = np.r_[np.zeros(90), np.ones(10)].astype(int)
    m = evaluate(_constant_forest(0), np.zeros((100, 3)), y, "bc")
    assert m.accuracy == 0.9 and m.positive_f1 == 0.0 and m.headline_f1("bc") == 0.0


def test_perfect_predictions():
    X = np.random.default_rng(0).normal(size=(100, 4))
    y = (X[:, 0] > 0).astype(int)
    forest = grow_forest(X, y, 8, TreeParams(max_depth=None))
    for model in (forest, pack_forest(forest)):
        m = evaluate(model, X, y, "bc")
        assert m.accuracy == 1.0 and m.weighted_f1 == 1.0


def test_multi_output_pools_pairs():
    X = np.random.default_rng(1).normal(size=(50, 4))
    Y = np.column_stack([(X[:, i] > 0).astype(int) * (i + 1) for i in range(3)])
    forest = grow_forest(X, Y, 8, TreeParams(max_depth=None), scheme="mmc")
    m = evaluate(forest, X, Y, "mmc")
    assert m.confusion.shape == (13, 13) and m.confusion.sum() == 150
    assert m.headline_f1("mmc") == m.weighted_f1 == 1.0
    est = ExtraTreesArtifactClassifier(n_estimators=8, max_depth=None, scheme="mmc").fit(X, Y)
    assert evaluate(est, X, Y, "mmc").accuracy == 1.0


def test_arity_mismatch():
    with pytest.raises(DataFormatError):
        evaluate(_constant_forest(0), np.zeros((4, 3)), np.zeros((4, 2), dtype=int), "bc")
    with pytest.raises(DataFormatError):
        evaluate(_constant_forest(0, outputs=3), np.zeros((4, 3)), np.zeros((4, 2), dtype=int),
                 "mc")


def test_metrics_csv_lists_all_f1_variants():
    text = Metrics.from_confusion(np.array([[3, 1], [2, 4]])).to_csv()
    for key in ("accuracy", "positive_f1", "macro_f1", "micro_f1", "weighted_f1", "true_1,2,4"):
        assert key in text


# -- prune curve --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 5))
    y = (X[:, 0] - X[:, 3] > 0).astype(int)
    flip = rng.random(400) < 0.1
    y[flip] = 1 - y[flip]
    return grow_forest(X[:300], y[:300], 8, seed=2), X[300:], y[300:]


def test_curve_at_alpha_zero(separable):
    forest, X, y = separable
    curve = prune_curve(forest, X, y, "bc", alphas=[0.0])
    assert len(curve) == 1
    direct = evaluate(prune_forest(forest, 0.0), X, y, "bc")
    assert curve.accuracy[0] == direct.accuracy and curve.f1[0] == direct.positive_f1
    assert curve.size_bytes[0] == packed_size_bytes(prune_forest(forest, 0.0))


def test_curve_rows_are_ordered_and_shrinking(separable):
    forest, X, y = separable
    curve = prune_curve(forest, X, y, "bc")
    assert all(a < b for a, b in zip(curve.alpha, curve.alpha[1:]))
    assert all(a >= b for a, b in zip(curve.node_count, curve.node_count[1:]))
    assert curve.node_count[-1] == forest.n_trees
    root_only = evaluate(prune_forest(forest, curve.alpha[-1]), X, y, "bc")
    assert curve.accuracy[-1] == root_only.accuracy
    assert curve.accuracy[-1] <= curve.accuracy[0]
    thin = prune_curve(forest, X, y, "bc", max_points=5)
    assert len(thin) == 5 and thin.alpha[0] == curve.alpha[0] and thin.alpha[-1] == curve.alpha[-1]


def test_curve_csv(separable):
    forest, X, y = separable
    text = prune_curve(forest, X, y, "bc", alphas=[0.0, 1.0]).to_csv()
    lines = text.splitlines()
    assert lines[0] == "alpha,nodes,bytes,accuracy,f1" and len(lines) == 3
    assert PruneCurve().to_csv() == "alpha,nodes,bytes,accuracy,f1\n"


def test_curve_threads_do_not_change_results(separable):
    forest, X, y = separable
    assert (prune_curve(forest, X, y, "bc", threads=1).to_csv()
            == prune_curve(forest, X, y, "bc", threads=4).to_csv())


# -- bench ----------------------------------------------------------------------------------

def test_bench_single_leaf_forest():
    stats = bench_inference(pack_forest(_constant_forest(1)), np.zeros((10, 3)), repetitions=2)
    assert stats["mean_nodes_visited"] == 1.0 and stats["inferences"] == 20
    assert stats["mean_ms"] > 0 and stats["p99_ms"] >= 0


def test_bench_node_statistics_are_deterministic(separable):
    forest, X, _ = separable
    a = bench_inference(forest, X, repetitions=1)
    b = bench_inference(pack_forest(forest), X, repetitions=3)
    assert a["mean_nodes_visited"] == b["mean_nodes_visited"]
    assert a["max_nodes_visited"] == b["max_nodes_visited"] <= 21


def test_bench_needs_input():
    with pytest.raises(DataFormatError):
        bench_inference(_constant_forest(0), np.zeros((0, 3)))
