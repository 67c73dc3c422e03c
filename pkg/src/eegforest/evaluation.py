"""Classification metrics, accuracy-vs-size curves and inference timing."""
from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .compact import CompactForest, packed_size_bytes, pack_forest, traverse
from .dataset import LabelScheme
from .errors import DataFormatError
from .forest import Forest, critical_alphas, forest_paths, predict_forest, prune_forest


def f1(precision, recall):
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def confusion_matrix(y_true, y_pred, n_classes):
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class Metrics:
    confusion: np.ndarray
    accuracy: float = 0.0
    precision: np.ndarray = field(default=None)
    recall: np.ndarray = field(default=None)
    f1: np.ndarray = field(default=None)
    support: np.ndarray = field(default=None)
    macro_f1: float = 0.0
    weighted_f1: float = 0.0
    micro_f1: float = 0.0

    @classmethod
    def from_confusion(cls, cm):
        cm = np.asarray(cm, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        support = cm.sum(axis=1)
        predicted = cm.sum(axis=0)
        total = cm.sum()
        precision = _safe_div(tp, predicted)
        recall = _safe_div(tp, support)
        s = precision + recall
        f1s = _safe_div(2 * precision * recall, s)
        accuracy = float(tp.sum() / total) if total else 0.0
        weighted = float(np.dot(support, f1s) / support.sum()) if support.sum() else 0.0
        # single-label pooling makes micro precision == micro recall == accuracy
        return cls(cm, accuracy, precision, recall, f1s, support,
                   float(f1s.mean()) if f1s.size else 0.0, weighted, accuracy)

    @property
    def n_classes(self):
        return self.confusion.shape[0]

    @property
    def positive_f1(self):
        """F1 of class 1, the pooled-binary artifact score for BC and MC."""
        return float(self.f1[1]) if self.n_classes > 1 else 0.0

    def headline_f1(self, scheme):
        scheme = LabelScheme.parse(scheme)
        return self.weighted_f1 if scheme is LabelScheme.MMC else self.positive_f1

    def to_csv(self):
        buf = io.StringIO()
        buf.write("metric,value\n")
        buf.write(f"accuracy,{self.accuracy!r}\n")
        buf.write(f"positive_f1,{self.positive_f1!r}\n")
        buf.write(f"macro_f1,{self.macro_f1!r}\n")
        buf.write(f"micro_f1,{self.micro_f1!r}\n")
        buf.write(f"weighted_f1,{self.weighted_f1!r}\n")
        buf.write("\nclass,support,precision,recall,f1\n")
        for c in range(self.n_classes):
            buf.write(f"{c},{int(self.support[c])},{float(self.precision[c])!r},"
                      f"{float(self.recall[c])!r},{float(self.f1[c])!r}\n")
        buf.write("\nconfusion," + ",".join(f"pred_{c}" for c in range(self.n_classes)) + "\n")
        for c in range(self.n_classes):
            buf.write(f"true_{c}," + ",".join(str(int(v)) for v in self.confusion[c]) + "\n")
        return buf.getvalue()


def _predict(model, X):
    if isinstance(model, Forest):
        return predict_forest(model, X)
    return model.predict(X)


def _model_shape(model):
    inner = getattr(model, "forest_", model)
    return inner.n_outputs, inner.n_classes


def evaluate(model, X, y, scheme):
    """Metrics pooled over every (window, output) pair.

    BC yields a 2x2 confusion matrix, MC a pooled 2x2 matrix over channels,
    MMC a pooled 13x13 matrix.
    """
    scheme = LabelScheme.parse(scheme)
    Y = np.asarray(y, dtype=np.int64)
    if Y.ndim == 1:
        Y = Y[:, np.newaxis]
    n_outputs, n_classes = _model_shape(model)
    if scheme is LabelScheme.BC and Y.shape[1] != 1:
        raise DataFormatError(f"BC labels have arity 1, got {Y.shape[1]}")
    if Y.shape[1] != n_outputs:
        raise DataFormatError(f"model has {n_outputs} outputs but labels have arity {Y.shape[1]}")
    n_classes = max(n_classes, scheme.n_classes)
    if Y.size and Y.max() >= n_classes:
        raise DataFormatError(f"label {Y.max()} outside 0..{n_classes - 1}")
    if len(Y) == 0:
        return Metrics.from_confusion(np.zeros((n_classes, n_classes), dtype=np.int64))
    pred = np.asarray(_predict(model, X)).reshape(Y.shape)
    return Metrics.from_confusion(confusion_matrix(Y, pred, n_classes))


# -- prune curve ---------------------------------------------------------------------------------

@dataclass
class PruneCurve:
    alpha: list = field(default_factory=list)
    node_count: list = field(default_factory=list)
    size_bytes: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    f1: list = field(default_factory=list)

    def __len__(self):
        return len(self.alpha)

    def rows(self):
        return list(zip(self.alpha, self.node_count, self.size_bytes, self.accuracy, self.f1))

    def to_csv(self):
        lines = ["alpha,nodes,bytes,accuracy,f1"]
        for a, n, b, acc, f in self.rows():
            lines.append(f"{a!r},{n},{b},{acc!r},{f!r}")
        return "\n".join(lines) + "\n"


def _subsample(values, max_points):
    if max_points is None or len(values) <= max_points:
        return list(values)
    idx = np.unique(np.round(np.linspace(0, len(values) - 1, max_points)).astype(int))
    return [values[i] for i in idx]


def prune_curve(forest, X, y, scheme, alphas="auto", max_points=None, threads=1):
    """Evaluate the forest pruned at a series of shared complexity parameters.

    ``alphas="auto"`` uses the merged critical alphas of all trees, optionally
    thinned to ``max_points`` values that always keep both ends.  Rows come
    out sorted by alpha; ``f1`` is the scheme's headline F1.
    """
    paths = forest_paths(forest, threads)
    if isinstance(alphas, str):
        grid = _subsample(critical_alphas(paths), max_points)
    else:
        grid = sorted(set(float(a) for a in alphas))
    curve = PruneCurve()
    for a in grid:
        pruned = prune_forest(forest, a, paths)
        m = evaluate(pruned, X, y, scheme)
        curve.alpha.append(float(a))
        curve.node_count.append(pruned.node_count())
        curve.size_bytes.append(packed_size_bytes(pruned))
        curve.accuracy.append(m.accuracy)
        curve.f1.append(m.headline_f1(scheme))
    return curve


# -- benchmarking ---------------------------------------------------------------------------------

def bench_inference(model, X, repetitions=3, warmup=1):
    """Time full-ensemble inference one window at a time.

    Each inference walks every tree of every output with :func:`traverse`.
    ``mean_nodes_visited`` is per tree and does not depend on timing.
    """
    compact = model if isinstance(model, CompactForest) else pack_forest(model)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataFormatError("benchmark needs at least one feature vector")
    trees = compact.all_trees()

    def infer(x):
        visited = deepest = 0
        for t in trees:
            v = traverse(t, x)[1]
            visited += v
            deepest = max(deepest, v)
        return visited, deepest

    for _ in range(warmup):
        for x in X[: min(len(X), 64)]:
            infer(x)
    latencies = []
    total_visits = max_visits = 0
    for _ in range(repetitions):
        for x in X:
            t0 = time.perf_counter()
            visits, deepest = infer(x)
            latencies.append(time.perf_counter() - t0)
            total_visits += visits
            max_visits = max(max_visits, deepest)
    lat = np.asarray(latencies)
    n_inf = lat.size
    return {
        "inferences": int(n_inf),
        "trees": len(trees),
        "windows_per_s": float(n_inf / lat.sum()) if lat.sum() > 0 else float("inf"),
        "mean_ms": float(lat.mean() * 1e3),
        "p99_ms": float(np.percentile(lat, 99) * 1e3),
        "mean_nodes_visited": float(total_visits / (n_inf * max(len(trees), 1))),
        "max_nodes_visited": int(max_visits),
    }
