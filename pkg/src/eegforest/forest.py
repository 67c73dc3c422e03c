"""Extra-Trees ensembles with weakest-link pruning to a byte budget.

Trees are kept in pointer form (:class:`TreeNode`) with the per-node class
counts seen during training, which is what cost-complexity pruning needs.
Thresholds are float32 values from the moment they are drawn, so that the
split used while growing is the split the compact encoding reproduces.
"""
from __future__ import annotations

import math
import numbers
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import LabelScheme
from .errors import InvalidArgumentError

NODE_BYTES = 9
DEFAULT_LANE_WIDTH = 8
LEAF = -1


@dataclass(eq=False)
class TreeNode:
    class_counts: np.ndarray
    feature: int = LEAF
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def n_samples(self):
        return int(self.class_counts.sum())

    @property
    def prediction(self):
        # argmax breaks ties toward the smallest class id
        return int(np.argmax(self.class_counts))

    def __repr__(self):
        if self.is_leaf:
            return f"Leaf(class={self.prediction}, n={self.n_samples})"
        return (f"Split(x[{self.feature}] <= {self.threshold!r}, n={self.n_samples}, "
                f"left={self.left!r}, right={self.right!r})")


@dataclass
class TreeParams:
    k_features: int | None = None
    n_candidate_thresholds: int = 1
    min_samples_leaf: int = 1
    max_depth: int | None = 20

    def resolve_k(self, n_features):
        k = self.k_features if self.k_features is not None else math.ceil(math.sqrt(n_features))
        return max(1, min(int(k), n_features))


@dataclass
class Forest:
    """One list of trees per output; BC has a single output."""

    trees: list
    n_classes: int
    n_features: int
    scheme: LabelScheme | None = None
    lane_width: int = DEFAULT_LANE_WIDTH
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme is not None:
            self.scheme = LabelScheme.parse(self.scheme)

    @property
    def n_outputs(self):
        return len(self.trees)

    @property
    def n_trees(self):
        return sum(len(t) for t in self.trees)

    def all_trees(self):
        return [t for per_output in self.trees for t in per_output]

    def node_count(self):
        return sum(node_count(t) for t in self.all_trees())

    def map_trees(self, fn):
        return Forest([[fn(t) for t in per_output] for per_output in self.trees],
                      self.n_classes, self.n_features, self.scheme, self.lane_width,
                      dict(self.meta))


# -- traversal helpers ---------------------------------------------------------------------

def iter_preorder(tree):
    stack = [tree]
    while stack:
        node = stack.pop()
        yield node
        if not node.is_leaf:
            stack.append(node.right)
            stack.append(node.left)


def node_count(tree):
    # DAG-safe (shared subtrees are counted once per path)
    memo = {}
    stack = [(tree, False)]
    while stack:
        node, done = stack.pop()
        if node.is_leaf:
            memo[id(node)] = 1
        elif done:
            memo[id(node)] = 1 + memo[id(node.left)] + memo[id(node.right)]
        elif id(node) not in memo:
            stack.append((node, True))
            stack.append((node.left, False))
            stack.append((node.right, False))
    return memo[id(tree)]


def tree_depth(tree):
    best = 0
    stack = [(tree, 0)]
    while stack:
        node, d = stack.pop()
        best = max(best, d)
        if not node.is_leaf:
            stack.append((node.left, d + 1))
            stack.append((node.right, d + 1))
    return best


@dataclass
class FlatTree:
    """Preorder arrays of a pointer tree; ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    parent: np.ndarray
    size: np.ndarray


def flatten(tree):
    nodes = list(iter_preorder(tree))
    index = {id(n): i for i, n in enumerate(nodes)}
    n = len(nodes)
    feature = np.zeros(n, dtype=np.int64)
    threshold = np.zeros(n, dtype=np.float32)
    left = np.full(n, LEAF, dtype=np.int64)
    right = np.full(n, LEAF, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    width = max(len(nd.class_counts) for nd in nodes)
    counts = np.zeros((n, width), dtype=np.int64)
    for i, nd in enumerate(nodes):
        counts[i, :len(nd.class_counts)] = nd.class_counts
        if not nd.is_leaf:
            feature[i] = nd.feature
            threshold[i] = nd.threshold
            left[i] = index[id(nd.left)]
            right[i] = index[id(nd.right)]
            parent[left[i]] = i
            parent[right[i]] = i
    size = np.ones(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        size[parent[i]] += size[i]
    return FlatTree(feature, threshold, left, right, counts, parent, size)


def _route(flat, X):
    """Leaf index reached by every row of ``X``."""
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    thr = flat.threshold.astype(np.float64)
    while True:
        internal = flat.left[node] != LEAF
        if not internal.any():
            return node
        r = rows[internal]
        cur = node[internal]
        go_left = X[r, flat.feature[cur]] <= thr[cur]
        node[internal] = np.where(go_left, flat.left[cur], flat.right[cur])


def predict_tree(tree, X):
    flat = tree if isinstance(tree, FlatTree) else flatten(tree)
    X = np.asarray(X, dtype=np.float64)
    leaves = _route(flat, X)
    return np.argmax(flat.counts[leaves], axis=1)


def refit_counts(tree, X, y, n_classes):
    """Copy of ``tree`` whose class counts come from routing ``(X, y)``."""
    flat = flatten(tree)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = flat.left.size
    counts = np.zeros((n, n_classes), dtype=np.int64)
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    thr = flat.threshold.astype(np.float64)
    np.add.at(counts, (node, y), 1)
    active = flat.left[node] != LEAF
    while active.any():
        r = rows[active]
        cur = node[active]
        nxt = np.where(X[r, flat.feature[cur]] <= thr[cur], flat.left[cur], flat.right[cur])
        node[active] = nxt
        np.add.at(counts, (nxt, y[r]), 1)
        active = flat.left[node] != LEAF
    return _unflatten(flat, counts)


def _unflatten(flat, counts, keep_internal=None):
    """Rebuild a pointer tree; nodes with ``keep_internal[i]`` False become leaves."""
    n = flat.left.size
    nodes = [None] * n
    for i in range(n - 1, -1, -1):
        internal = flat.left[i] != LEAF and (keep_internal is None or keep_internal[i])
        if internal and nodes[flat.left[i]] is not None and nodes[flat.right[i]] is not None:
            nodes[i] = TreeNode(counts[i].copy(), int(flat.feature[i]),
                                float(flat.threshold[i]), nodes[flat.left[i]],
                                nodes[flat.right[i]])
        else:
            nodes[i] = TreeNode(counts[i].copy())
    return nodes[0]


# -- growth -----------------------------------------------------------------------------------

def _as_float32_threshold(value, lo, hi):
    thr = np.float32(value)
    while float(thr) >= hi:
        thr = np.nextafter(thr, np.float32(-np.inf))
    if float(thr) < lo:
        return None
    return thr


def _impurity(counts, n):
    # n * gini, so weighted child impurities add up directly
    return n - np.dot(counts, counts) / n if n else 0.0


def grow_tree(X, y, n_classes=None, params=None, rng_seed=0):
    """Grow one Extra-Trees classifier tree.

    Each node draws features in random order until ``k_features`` non-constant
    ones have been tried; every tried feature gets uniformly random thresholds
    between its min and max over the node's samples.  The candidate with the
    lowest weighted Gini impurity wins and ``x <= threshold`` goes left.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgumentError("cannot grow a tree on an empty sample set")
    if y.shape != (X.shape[0],):
        raise InvalidArgumentError("y must be a vector with one label per row of X")
    if y.min() < 0:
        raise InvalidArgumentError("labels must be non-negative class ids")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if y.max() >= n_classes:
        raise InvalidArgumentError(f"label {y.max()} outside 0..{n_classes - 1}")
    params = params or TreeParams()
    n_features = X.shape[1]
    k = params.resolve_k(n_features)
    msl = max(1, int(params.min_samples_leaf))
    max_depth = params.max_depth if params.max_depth is not None else np.iinfo(np.int64).max
    rng = np.random.default_rng(rng_seed)

    def counts_of(idx):
        return np.bincount(y[idx], minlength=n_classes)

    root = TreeNode(counts_of(np.arange(X.shape[0])))
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        n = idx.size
        counts = node.class_counts
        if depth >= max_depth or n < 2 * msl or np.count_nonzero(counts) <= 1:
            continue
        best = None
        tried = 0
        for f in rng.permutation(n_features):
            if tried >= k:
                break
            xs = X[idx, f]
            lo, hi = xs.min(), xs.max()
            if not hi > lo:
                continue
            tried += 1
            for u in rng.uniform(lo, hi, params.n_candidate_thresholds):
                thr = _as_float32_threshold(u, lo, hi)
                if thr is None:
                    continue
                mask = xs <= float(thr)
                n_left = int(np.count_nonzero(mask))
                if n_left < msl or n - n_left < msl:
                    continue
                cl = np.bincount(y[idx[mask]], minlength=n_classes)
                score = _impurity(cl, n_left) + _impurity(counts - cl, n - n_left)
                if best is None or score < best[0]:
                    best = (score, int(f), thr, mask, cl)
        if best is None:
            continue
        _, f, thr, mask, cl = best
        node.feature = f
        node.threshold = float(thr)
        node.left = TreeNode(cl)
        node.right = TreeNode(counts - cl)
        stack.append((node.right, idx[~mask], depth + 1))
        stack.append((node.left, idx[mask], depth + 1))
    return root


def _check_lane_multiple(n_trees, lane_width):
    if lane_width < 1:
        raise InvalidArgumentError(f"lane width must be positive, got {lane_width}")
    if n_trees < 1 or n_trees % lane_width:
        raise InvalidArgumentError(
            f"tree count must be a positive multiple of {lane_width}, got {n_trees}")


def grow_forest(X, y, n_trees, params=None, seed=0, *, n_classes=None, scheme=None,
                lane_width=DEFAULT_LANE_WIDTH, threads=1):
    """Grow ``n_trees`` trees per output with seeds ``seed + i``.

    A 2-D ``y`` (MC/MMC) gets one independent forest per column.
    """
    _check_lane_multiple(n_trees, lane_width)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(y, dtype=np.int64)
    if Y.ndim == 1:
        Y = Y[:, np.newaxis]
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgumentError("cannot grow a forest on an empty sample set")
    if Y.shape[0] != X.shape[0]:
        raise InvalidArgumentError("X and y disagree on the number of samples")
    if scheme is not None:
        scheme = LabelScheme.parse(scheme)
    if n_classes is None:
        n_classes = max(int(Y.max()) + 1, 2)
        if scheme is not None:
            n_classes = max(n_classes, scheme.n_classes)
    params = params or TreeParams()
    jobs = [(o, i) for o in range(Y.shape[1]) for i in range(n_trees)]

    def grow(job):
        o, i = job
        return grow_tree(X, Y[:, o], n_classes, params, seed + i)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            grown = list(pool.map(grow, jobs))
    else:
        grown = [grow(j) for j in jobs]
    trees = [grown[o * n_trees:(o + 1) * n_trees] for o in range(Y.shape[1])]
    meta = {"seed": seed, "n_trees": n_trees, **params.__dict__}
    return Forest(trees, n_classes, X.shape[1], scheme, lane_width, meta)


def predict_forest(forest, X):
    """Plurality vote per output, ties to the smallest class id.

    Returns shape ``(n,)`` for a single output, ``(n, n_outputs)`` otherwise.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[np.newaxis, :]
    if X.shape[1] != forest.n_features:
        raise InvalidArgumentError(
            f"forest expects {forest.n_features} features, got {X.shape[1]}")
    outs = []
    for per_output in forest.trees:
        votes = np.stack([predict_tree(t, X) for t in per_output])
        outs.append(vote(votes, forest.n_classes))
    out = np.stack(outs, axis=1)
    return out[:, 0] if forest.n_outputs == 1 else out


def vote(votes, n_classes):
    """Plurality over axis 0 of a ``(n_trees, n)`` prediction matrix."""
    tally = np.stack([(votes == c).sum(axis=0) for c in range(n_classes)], axis=1)
    return np.argmax(tally, axis=1)


# -- minimal cost-complexity pruning ----------------------------------------------------------

@dataclass
class PrunePath:
    """Weakest-link pruning schedule of one tree.

    ``collapse_at[i]`` is the complexity parameter at which internal node ``i``
    (preorder index) stops being internal; it is ``nan`` for original leaves.
    ``alphas`` lists the critical values, starting with 0.
    """

    flat: FlatTree
    collapse_at: np.ndarray
    alphas: list

    def internal_at(self, alpha):
        return self.collapse_at > alpha  # nan compares False

    def node_count(self, alpha):
        return 1 + 2 * int(np.count_nonzero(self.collapse_at > alpha))

    def node_set(self, alpha):
        keep = self.internal_at(alpha)
        parent = self.flat.parent
        alive = np.ones(parent.size, dtype=bool)
        # preorder: a parent is settled before its children
        for i in range(1, parent.size):
            alive[i] = alive[parent[i]] and keep[parent[i]]
        return frozenset(np.flatnonzero(alive).tolist())

    def subtree(self, alpha):
        return _unflatten(self.flat, self.flat.counts, self.internal_at(alpha))


def pruning_path(tree, X=None, y=None, n_classes=None):
    """Compute the weakest-link schedule.

    Node risk is the node's misclassification count over the root's sample
    count.  At each step every internal node attaining the minimal
    ``g(t) = (R(t) - R(T_t)) / (|leaves(T_t)| - 1)`` is collapsed; splits
    with ``g = 0`` are folded into the ``alpha = 0`` entry.  When ``X, y`` are
    given the class counts are recomputed from them first.
    """
    if X is not None:
        if n_classes is None:
            n_classes = max(len(tree.class_counts), int(np.max(y)) + 1)
        tree = refit_counts(tree, X, y, n_classes)
    flat = flatten(tree)
    n = flat.left.size
    total = int(flat.counts[0].sum())
    collapse_at = np.full(n, np.nan)
    if n == 1 or total == 0:
        collapse_at[flat.left != LEAF] = 0.0
        return PrunePath(flat, collapse_at, [0.0])

    internal = flat.left != LEAF
    # misclassification counts are integers, so equal ratios give equal floats
    err_node = (flat.counts.sum(axis=1) - flat.counts.max(axis=1)).astype(np.float64)
    err_sub = np.where(internal, 0.0, err_node)
    leaves = (~internal).astype(np.int64)
    for i in range(n - 1, 0, -1):
        p = flat.parent[i]
        err_sub[p] += err_sub[i]
        leaves[p] += leaves[i]
    active = internal.copy()
    g = np.full(n, np.inf)
    g[active] = (err_node[active] - err_sub[active]) / (leaves[active] - 1)

    alphas = [0.0]
    while active.any():
        g_min = g[active].min()
        alpha = float(g_min / total)
        if alpha > alphas[-1]:
            alphas.append(alpha)
        for t in np.flatnonzero(active & (g <= g_min)):
            if not active[t]:
                continue  # removed together with an ancestor in this batch
            end = t + flat.size[t]
            sub = slice(t, end)
            collapse_at[sub] = np.where(active[sub], alphas[-1], collapse_at[sub])
            active[sub] = False
            g[sub] = np.inf
            d_err = err_node[t] - err_sub[t]
            d_leaves = 1 - leaves[t]
            err_sub[t] = err_node[t]
            leaves[t] = 1
            a = flat.parent[t]
            while a >= 0:
                err_sub[a] += d_err
                leaves[a] += d_leaves
                g[a] = (err_node[a] - err_sub[a]) / (leaves[a] - 1)
                a = flat.parent[a]
    return PrunePath(flat, collapse_at, alphas)


def cost_complexity_sequence(tree, X=None, y=None, n_classes=None):
    """List of ``(alpha_k, node_set_k)`` from the ``alpha = 0`` tree down to the root.

    Node sets hold preorder indices of the nodes kept in each subtree.
    """
    path = pruning_path(tree, X, y, n_classes)
    return [(a, path.node_set(a)) for a in path.alphas]


def prune_at_alpha(tree, alpha, X=None, y=None, n_classes=None):
    """Smallest optimally pruned subtree for ``alpha``."""
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be non-negative, got {alpha}")
    return pruning_path(tree, X, y, n_classes).subtree(alpha)


def forest_paths(forest, threads=1):
    trees = forest.all_trees()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(pruning_path, trees))
    return [pruning_path(t) for t in trees]


def _regroup(forest, flat_trees):
    out, pos = [], 0
    for per_output in forest.trees:
        out.append(flat_trees[pos:pos + len(per_output)])
        pos += len(per_output)
    return Forest(out, forest.n_classes, forest.n_features, forest.scheme,
                  forest.lane_width, dict(forest.meta))


def prune_forest(forest, alpha, paths=None):
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be non-negative, got {alpha}")
    paths = paths or forest_paths(forest)
    pruned = _regroup(forest, [p.subtree(alpha) for p in paths])
    pruned.meta["ccp_alpha"] = float(alpha)
    return pruned


def critical_alphas(paths):
    return sorted(set(a for p in paths for a in p.alphas))


def payload_bytes(forest):
    """Bytes of the four node arrays: nine per node."""
    return NODE_BYTES * forest.node_count()


def prune_to_budget(forest, budget_bytes, paths=None):
    """Prune every tree with one shared alpha so the node payload fits the budget.

    The budget covers the 9-byte node records; the file header and node-count
    table are not charged against it.  Returns ``(forest, alpha)`` with the
    smallest critical alpha that fits.  A forest that already fits comes back
    unchanged with alpha 0.
    """
    minimum = NODE_BYTES * forest.n_trees
    if budget_bytes < minimum:
        raise InvalidArgumentError(
            f"budget of {budget_bytes} bytes is below the {minimum}-byte minimum "
            f"({forest.n_trees} single-leaf trees x {NODE_BYTES} bytes)")
    if payload_bytes(forest) <= budget_bytes:
        return forest, 0.0
    paths = paths or forest_paths(forest)
    alphas = critical_alphas(paths)

    def fits(alpha):
        return NODE_BYTES * sum(p.node_count(alpha) for p in paths) <= budget_bytes

    lo, hi = 0, len(alphas) - 1  # alphas[-1] leaves every tree a single leaf
    while lo < hi:
        mid = (lo + hi) // 2
        if fits(alphas[mid]):
            hi = mid
        else:
            lo = mid + 1
    alpha = float(alphas[lo])
    return prune_forest(forest, alpha, paths), alpha


# -- estimator ---------------------------------------------------------------------------------

class ExtraTreesArtifactClassifier(ClassifierMixin, BaseEstimator):
    """Extra-Trees classifier sized for the 9-byte compact node format.

    ``y`` may be 1-D (BC) or 2-D with one column per channel (MC/MMC); each
    column gets its own forest.  Labels are used as raw class ids.
    """

    def __init__(self, n_estimators=64, max_features="sqrt", n_candidate_thresholds=1,
                 max_depth=20, min_samples_leaf=1, lane_width=DEFAULT_LANE_WIDTH,
                 ccp_alpha=None, budget_bytes=None, scheme=None, n_jobs=1, random_state=0):
        self.n_estimators = n_estimators
        self.max_features = max_features
        self.n_candidate_thresholds = n_candidate_thresholds
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.lane_width = lane_width
        self.ccp_alpha = ccp_alpha
        self.budget_bytes = budget_bytes
        self.scheme = scheme
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _k_features(self, n_features):
        mf = self.max_features
        if mf is None:
            return n_features
        if mf == "sqrt":
            return math.ceil(math.sqrt(n_features))
        if mf == "log2":
            return max(1, math.ceil(math.log2(n_features)))
        if isinstance(mf, numbers.Integral):
            return int(mf)
        if isinstance(mf, numbers.Real) and 0 < mf <= 1:
            return max(1, math.ceil(mf * n_features))
        raise InvalidArgumentError(f"unsupported max_features {mf!r}")

    def _seed(self):
        if isinstance(self.random_state, numbers.Integral):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(np.iinfo(np.int32).max))

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise InvalidArgumentError("labels must be integer class ids")
            y = y.astype(np.int64)
        params = TreeParams(self._k_features(X.shape[1]), self.n_candidate_thresholds,
                            self.min_samples_leaf, self.max_depth)
        forest = grow_forest(X, y, self.n_estimators, params, self._seed(),
                             scheme=self.scheme, lane_width=self.lane_width,
                             threads=self.n_jobs or 1)
        self.ccp_alpha_ = 0.0
        if self.ccp_alpha is not None:
            forest = prune_forest(forest, self.ccp_alpha)
            self.ccp_alpha_ = float(self.ccp_alpha)
        if self.budget_bytes is not None:
            forest, self.ccp_alpha_ = prune_to_budget(forest, self.budget_bytes)
        self.forest_ = forest
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = forest.n_outputs
        self.classes_ = np.arange(forest.n_classes)
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        X = check_array(X, dtype=np.float64)
        return predict_forest(self.forest_, X)

    def score(self, X, y, sample_weight=None):
        # pooled over (sample, output) pairs so MC/MMC work too
        pred = self.predict(X)
        return float(np.average(np.asarray(pred == np.asarray(y), dtype=float).reshape(len(X), -1)
                                .mean(axis=1), weights=sample_weight))

    def prune(self, alpha=None, budget_bytes=None):
        """Return a pruned copy; exactly one of ``alpha`` and ``budget_bytes``."""
        check_is_fitted(self, "forest_")
        if (alpha is None) == (budget_bytes is None):
            raise InvalidArgumentError("pass exactly one of alpha and budget_bytes")
        clone = self.__class__(**self.get_params())
        clone.__dict__.update({k: v for k, v in self.__dict__.items() if k.endswith("_")})
        if alpha is not None:
            clone.forest_ = prune_forest(self.forest_, alpha)
            clone.ccp_alpha_ = float(alpha)
        else:
            clone.forest_, clone.ccp_alpha_ = prune_to_budget(self.forest_, budget_bytes)
        return clone

    def to_compact(self):
        from .compact import pack_forest
        check_is_fitted(self, "forest_")
        return pack_forest(self.forest_)
