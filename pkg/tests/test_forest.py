import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from eegforest.errors import InvalidArgumentError
from eegforest.features import FeatureExtractor
from eegforest.forest import (NODE_BYTES, ExtraTreesArtifactClassifier, Forest, TreeNode,
                              TreeParams, cost_complexity_sequence, critical_alphas, flatten,
                              forest_paths, grow_forest, grow_tree, iter_preorder, node_count,
                              payload_bytes, predict_forest, predict_tree, prune_at_alpha,
                              prune_forest, prune_to_budget, pruning_path, refit_counts,
                              tree_depth, vote)
from oracles import mccp_disagreements, random_tree


def _noisy(n=300, features=6, classes=2, flip=0.2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, features))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    if classes > 2:
        y += (X[:, 2] > 0.5).astype(int) * (classes - 2)
    flip_mask = rng.random(n) < flip
    y[flip_mask] = rng.integers(0, classes, flip_mask.sum())
    return X, y


def _leaf(*counts):
    return TreeNode(np.array(counts, dtype=np.int64))


def _split(left, right, feature=0, threshold=0.0):
    return TreeNode(left.class_counts + right.class_counts, feature, threshold, left, right)


def _same_structure(a, b):
    fa, fb = flatten(a), flatten(b)
    return all(np.array_equal(getattr(fa, k), getattr(fb, k))
               for k in ("feature", "threshold", "left", "right", "counts"))


# -- growth -----------------------------------------------------------------------------

def test_pure_samples_give_a_single_leaf():
    tree = grow_tree(np.random.default_rng(0).normal(size=(20, 3)), np.full(20, 2))
    assert tree.is_leaf and tree.prediction == 2 and tree.n_samples == 20


def test_two_clusters_split_at_depth_one():
    X = np.r_[np.arange(10), np.arange(100, 110)].astype(float)[:, None]
    y = np.r_[np.zeros(10), np.ones(10)].astype(int)
    shallow = 0
    for seed in range(50):
        tree = grow_tree(X, y, params=TreeParams(k_features=1), rng_seed=seed)
        assert np.array_equal(predict_tree(tree, X), y)
        # a single uniform draw on [0, 109] lands in the gap with probability 91/109
        if 9 < tree.threshold < 100:
            assert tree_depth(tree) == 1
            shallow += 1
    assert shallow >= 30


def test_growth_is_deterministic():
    X, y = _noisy()
    assert _same_structure(grow_tree(X, y, rng_seed=5), grow_tree(X, y, rng_seed=5))
    assert not _same_structure(grow_tree(X, y, rng_seed=5), grow_tree(X, y, rng_seed=6))


def test_empty_sample_set_is_rejected():
    with pytest.raises(InvalidArgumentError):
        grow_tree(np.empty((0, 3)), np.empty(0, dtype=int))


def test_thresholds_are_float32_and_inside_the_node_range():
    X, y = _noisy(seed=3)
    tree = grow_tree(X, y, rng_seed=1)
    for node in iter_preorder(tree):
        if not node.is_leaf:
            assert float(np.float32(node.threshold)) == node.threshold


def _gini(counts):
    n = counts.sum()
    return 0.0 if n == 0 else 1.0 - np.sum((counts / n) ** 2)


def test_split_impurity_never_exceeds_parent():
    X, y = _noisy(n=400, classes=3, seed=4)
    forest = grow_forest(X, y, 8, seed=2)
    checked = 0
    for tree in forest.all_trees():
        for node in iter_preorder(tree):
            if node.is_leaf:
                continue
            n = node.n_samples
            children = (node.left.n_samples * _gini(node.left.class_counts)
                        + node.right.n_samples * _gini(node.right.class_counts)) / n
            assert children <= _gini(node.class_counts) + 1e-12
            checked += 1
    assert checked > 100


def test_min_samples_leaf_and_depth_limits():
    X, y = _noisy(flip=0.4)
    tree = grow_tree(X, y, params=TreeParams(min_samples_leaf=7, max_depth=4), rng_seed=0)
    assert tree_depth(tree) <= 4
    assert all(n.n_samples >= 7 for n in iter_preorder(tree) if n.is_leaf)


def test_separable_data_is_learned_perfectly():
    X, y = _noisy(flip=0.0, seed=9)
    forest = grow_forest(X, y, 8, params=TreeParams(max_depth=None), seed=0)
    assert np.array_equal(predict_forest(forest, X), y)


# -- forest ----------------------------------------------------------------------------

def test_forest_shape_and_lane_width():
    X, y = _noisy()
    forest = grow_forest(X, y, 8)
    assert forest.n_trees == 8 and forest.n_outputs == 1
    assert predict_forest(forest, X).shape == (len(X),)
    with pytest.raises(InvalidArgumentError, match="multiple of 8"):
        grow_forest(X, y, 7)
    assert grow_forest(X, y, 6, lane_width=3).n_trees == 6


def test_forest_seeds_are_seed_plus_index():
    X, y = _noisy()
    forest = grow_forest(X, y, 8, seed=10)
    for i, tree in enumerate(forest.all_trees()):
        assert _same_structure(tree, grow_tree(X, y, 2, TreeParams(), 10 + i))


def test_forest_is_reproducible_and_thread_independent():
    X, y = _noisy()
    a = grow_forest(X, y, 16, seed=3, threads=1)
    b = grow_forest(X, y, 16, seed=3, threads=4)
    assert all(_same_structure(s, t) for s, t in zip(a.all_trees(), b.all_trees()))


def test_multi_output_forest():
    X, y = _noisy()
    Y = np.column_stack([y, 1 - y, y])
    forest = grow_forest(X, Y, 8, scheme="mc")
    assert forest.n_outputs == 3 and forest.n_trees == 24
    pred = predict_forest(forest, X)
    assert pred.shape == (len(X), 3)
    assert np.mean(pred == Y) > 0.9


def test_single_tree_forest_and_votes():
    X, y = _noisy()
    tree = grow_tree(X, y)
    forest = Forest([[tree]], 2, X.shape[1])
    np.testing.assert_array_equal(predict_forest(forest, X), predict_tree(tree, X))
    assert vote(np.array([[1], [1], [0], [1], [1], [0], [0], [1]]), 2).tolist() == [1]
    assert vote(np.array([[1], [0], [1], [0], [1], [0], [1], [0]]), 2).tolist() == [0]


def test_dimension_mismatch_is_rejected():
    X, y = _noisy()
    forest = grow_forest(X, y, 8)
    with pytest.raises(InvalidArgumentError):
        predict_forest(forest, X[:, :3])


def test_refit_counts_matches_training_counts():
    X, y = _noisy()
    tree = grow_tree(X, y, rng_seed=2)
    again = refit_counts(tree, X, y, 2)
    for a, b in zip(iter_preorder(tree), iter_preorder(again)):
        np.testing.assert_array_equal(a.class_counts, b.class_counts)


# -- cost-complexity pruning --------------------------------------------------------

def test_single_leaf_sequence():
    assert cost_complexity_sequence(_leaf(4, 0)) == [(0.0, frozenset({0}))]


def test_zero_gain_split_collapses_at_alpha_zero():
    tree = _split(_leaf(2, 0), _leaf(1, 1))  # 1 error before and after the split
    assert cost_complexity_sequence(tree) == [(0.0, frozenset({0}))]


def test_hand_computed_sequence():
    # root [6, 4]: 4 errors; split A [5, 1] | B [1, 3] costs 2; B splits into pure leaves
    tree = _split(_leaf(5, 1), _split(_leaf(1, 0), _leaf(0, 3)))
    seq = cost_complexity_sequence(tree)
    # g(B) = (1 - 0) / 1 = 1 goes first; then g(root) = (4 - 2) / 1 = 2; both over 10 samples
    assert [a for a, _ in seq] == [0.0, 0.1, 0.2]
    assert [sorted(s) for _, s in seq] == [[0, 1, 2, 3, 4], [0, 1, 2], [0]]


def test_all_minimal_nodes_collapse_together():
    tree = _split(_split(_leaf(3, 0), _leaf(0, 1)), _split(_leaf(0, 3), _leaf(1, 0)))
    path = pruning_path(tree)
    assert path.alphas[1] == pytest.approx(0.125)
    assert path.node_count(0.125) == 3


@pytest.mark.parametrize("seed", range(40))
def test_sequence_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, max_internal=7, n_classes=int(rng.integers(2, 4)))
    assert node_count(tree) <= 15
    assert mccp_disagreements(tree, pruning_path(tree)) == []


@pytest.mark.parametrize("seed", range(10))
def test_sequence_is_monotone_and_nested(seed):
    X, y = _noisy(n=200, classes=3, seed=seed)
    seq = cost_complexity_sequence(grow_tree(X, y, rng_seed=seed))
    alphas = [a for a, _ in seq]
    assert alphas[0] == 0.0 and all(a < b for a, b in zip(alphas, alphas[1:]))
    assert all(b < a for (_, a), (_, b) in zip(seq, seq[1:]))
    assert seq[-1][1] == frozenset({0})


def test_prune_at_alpha_extremes():
    X, y = _noisy(flip=0.0)
    tree = grow_tree(X, y, rng_seed=1)
    # a tree grown to purity on noise-free labels has no zero-gain split...
    assert _same_structure(prune_at_alpha(tree, 0.0), tree)
    root = prune_at_alpha(tree, np.inf)
    assert root.is_leaf and root.prediction == tree.prediction
    with pytest.raises(InvalidArgumentError):
        prune_at_alpha(tree, -0.1)


def test_pruned_tree_is_a_subtree():
    X, y = _noisy()
    tree = grow_tree(X, y, rng_seed=0)
    path = pruning_path(tree)
    pruned = prune_at_alpha(tree, path.alphas[len(path.alphas) // 2])
    assert node_count(pruned) == path.node_count(path.alphas[len(path.alphas) // 2])
    kept = list(iter_preorder(pruned))
    flat = flatten(tree)
    keep = sorted(path.node_set(path.alphas[len(path.alphas) // 2]))
    for node, i in zip(kept, keep):
        np.testing.assert_array_equal(node.class_counts, flat.counts[i])


# -- budget --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def forest():
    X, y = _noisy(n=400, flip=0.3, seed=7)
    return grow_forest(X, y, 8, seed=1)


def test_budget_above_size_keeps_forest(forest):
    out, alpha = prune_to_budget(forest, payload_bytes(forest))
    assert out is forest and alpha == 0.0


def test_minimum_budget_gives_single_leaves(forest):
    out, _ = prune_to_budget(forest, NODE_BYTES * forest.n_trees)
    assert all(t.is_leaf for t in out.all_trees())
    with pytest.raises(InvalidArgumentError, match="minimum"):
        prune_to_budget(forest, NODE_BYTES * forest.n_trees - 1)


@pytest.mark.parametrize("fraction", [0.9, 0.5, 0.25, 0.1, 0.02])
def test_budget_is_met_and_tight(forest, fraction):
    paths = forest_paths(forest)
    budget = int(payload_bytes(forest) * fraction)
    out, alpha = prune_to_budget(forest, budget, paths)
    assert payload_bytes(out) <= budget
    alphas = critical_alphas(paths)
    k = alphas.index(alpha)
    if k > 0:
        assert payload_bytes(prune_forest(forest, alphas[k - 1], paths)) > budget


def test_forest_prune_is_uniform(forest):
    paths = forest_paths(forest)
    alpha = critical_alphas(paths)[3]
    pruned = prune_forest(forest, alpha, paths)
    for tree, got in zip(forest.all_trees(), pruned.all_trees()):
        assert _same_structure(got, prune_at_alpha(tree, alpha))


# -- estimator -------------------------------------------------------------------------

def test_estimator_params_and_clone():
    est = ExtraTreesArtifactClassifier(n_estimators=16, max_depth=5)
    params = est.get_params()
    assert params["n_estimators"] == 16 and params["max_depth"] == 5
    assert clone(est).get_params() == params
    est.set_params(max_features=2)
    assert est.max_features == 2


def test_estimator_fit_predict_matches_functions():
    X, y = _noisy()
    est = ExtraTreesArtifactClassifier(n_estimators=8, random_state=4).fit(X, y)
    forest = grow_forest(X, y, 8, TreeParams(k_features=3), seed=4)
    np.testing.assert_array_equal(est.predict(X), predict_forest(forest, X))
    assert est.score(X, y) == pytest.approx(np.mean(est.predict(X) == y))
    assert list(est.classes_) == [0, 1] and est.n_features_in_ == 6


def test_estimator_pruning_paths():
    X, y = _noisy(flip=0.3)
    est = ExtraTreesArtifactClassifier(n_estimators=8).fit(X, y)
    size = payload_bytes(est.forest_)
    small = est.prune(budget_bytes=size // 4)
    assert payload_bytes(small.forest_) <= size // 4
    assert payload_bytes(est.forest_) == size  # original untouched
    fitted = ExtraTreesArtifactClassifier(n_estimators=8, budget_bytes=size // 4).fit(X, y)
    assert payload_bytes(fitted.forest_) == payload_bytes(small.forest_)
    with pytest.raises(InvalidArgumentError):
        est.prune()
    assert est.to_compact().node_count() == est.forest_.node_count()


def test_estimator_multi_output_and_errors():
    X, y = _noisy()
    Y = np.column_stack([y, 1 - y])
    est = ExtraTreesArtifactClassifier(n_estimators=8, scheme="mc").fit(X, Y)
    assert est.predict(X).shape == (len(X), 2)
    with pytest.raises(InvalidArgumentError):
        ExtraTreesArtifactClassifier(n_estimators=12).fit(X, y)


def test_pipeline_with_feature_extractor():
    rng = np.random.default_rng(0)
    windows = rng.normal(size=(80, 2, 250))
    y = np.arange(80) % 2
    t = np.arange(250) / 250
    windows[y == 1, 0] += 5 * np.sin(2 * np.pi * 100 * t)
    pipe = make_pipeline(FeatureExtractor(), ExtraTreesArtifactClassifier(n_estimators=8))
    pipe.fit(windows[:60], y[:60])
    assert pipe.score(windows[60:], y[60:]) == 1.0
