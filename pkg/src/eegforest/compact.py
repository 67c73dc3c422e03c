"""Four-array, 9-bytes-per-node tree encoding and the ``.ctf`` file format.

Per node: ``feature`` (u8), ``threshold`` (f32), ``left`` (u16), ``right``
(u16).  A leaf has ``left == 0xFFFF`` and carries its class id in ``right``;
its feature and threshold bytes are zero.  Nodes are laid out in preorder
with the root at index 0.

File layout, little-endian throughout::

    magic  "CTF1"                 4 bytes
    version                       u16
    scheme (0 bc, 1 mc, 2 mmc,    u8
            255 unspecified)
    n_outputs                     u8
    n_classes                     u16
    n_features                    u16
    lane width                    u8
    pad                           u8
    tree count                    u32
    node count per tree           u32 * tree count
    per tree: feature[], threshold[], left[], right[]

Trees are stored output-major; every output holds ``tree count / n_outputs``
trees.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabelScheme
from .errors import (BadMagicError, CapacityError, CorruptionError, InvalidArgumentError,
                     SizeMismatchError, TruncatedError, VersionMismatchError)
from .forest import (DEFAULT_LANE_WIDTH, NODE_BYTES, Forest, TreeNode, iter_preorder, vote)

LEAF_SENTINEL = 0xFFFF
MAX_NODES = 0xFFFE
MAX_FEATURE = 0xFF
MAX_CLASS = 0xFFFF
MAGIC = b"CTF1"
VERSION = 1
NO_SCHEME = 0xFF

_HEADER = struct.Struct("<4sHBBHHBBI")
HEADER_BYTES = _HEADER.size
_DTYPES = (np.dtype("u1"), np.dtype("<f4"), np.dtype("<u2"), np.dtype("<u2"))


@dataclass(eq=False)
class CompactTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=dt) for a, dt in zip(
            (self.feature, self.threshold, self.left, self.right), _DTYPES)]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise CorruptionError("the four node arrays must be 1-D and equally long")
        self.feature, self.threshold, self.left, self.right = arrays

    def __len__(self):
        return int(self.left.shape[0])

    @property
    def nbytes(self):
        return NODE_BYTES * len(self)

    def to_bytes(self):
        return b"".join(a.tobytes() for a in (self.feature, self.threshold, self.left, self.right))

    @classmethod
    def from_bytes(cls, buf, n_nodes):
        arrays, pos = [], 0
        for dt in _DTYPES:
            arrays.append(np.frombuffer(buf, dtype=dt, count=n_nodes, offset=pos).copy())
            pos += dt.itemsize * n_nodes
        return cls(*arrays)

    def __eq__(self, other):
        return isinstance(other, CompactTree) and self.to_bytes() == other.to_bytes()

    __hash__ = None


def pack(tree):
    """Encode a pointer tree in preorder."""
    nodes = list(iter_preorder(tree))
    n = len(nodes)
    if n > MAX_NODES:
        raise CapacityError(f"tree has {n} nodes; the 16-bit index format holds at most "
                            f"{MAX_NODES}", limit=MAX_NODES)
    index = {id(nd): i for i, nd in enumerate(nodes)}
    feature = np.zeros(n, dtype=np.uint8)
    threshold = np.zeros(n, dtype=np.float32)
    left = np.empty(n, dtype=np.uint16)
    right = np.empty(n, dtype=np.uint16)
    for i, nd in enumerate(nodes):
        if nd.is_leaf:
            cls = nd.prediction
            if cls > MAX_CLASS:
                raise CapacityError(f"class id {cls} exceeds {MAX_CLASS}", limit=MAX_CLASS)
            left[i] = LEAF_SENTINEL
            right[i] = cls
        else:
            if not 0 <= nd.feature <= MAX_FEATURE:
                raise CapacityError(f"feature index {nd.feature} exceeds {MAX_FEATURE}",
                                    limit=MAX_FEATURE)
            feature[i] = nd.feature
            threshold[i] = nd.threshold
            left[i] = index[id(nd.left)]
            right[i] = index[id(nd.right)]
    return CompactTree(feature, threshold, left, right)


def validate(compact):
    """Raise :class:`CorruptionError` unless the arrays form a tree rooted at 0."""
    n = len(compact)
    if n == 0:
        raise CorruptionError("tree has no nodes")
    if n > MAX_NODES:
        raise CorruptionError(f"{n} nodes exceed the {MAX_NODES}-node limit")
    left = compact.left.astype(np.int64)
    right = compact.right.astype(np.int64)
    leaf = left == LEAF_SENTINEL
    if np.any(compact.feature[leaf] != 0) or np.any(compact.threshold[leaf].view(np.uint32) != 0):
        raise CorruptionError("leaf node with non-zero feature or threshold")
    internal = ~leaf
    if np.any(left[internal] >= n) or np.any(right[internal] >= n):
        bad = int(np.flatnonzero(internal & ((left >= n) | (right >= n)))[0])
        raise CorruptionError(f"node {bad} points past the {n}-node array")
    children = np.concatenate([left[internal], right[internal]])
    seen = np.bincount(children, minlength=n)
    if seen[0] or np.any(seen[1:] != 1):
        raise CorruptionError("node arrays do not form a tree (cycle, shared or orphan node)")
    # every non-root node has exactly one parent and the root none: with n-1
    # edges that is a tree iff everything is reachable from the root
    reached = 1
    stack = [0]
    while stack:
        i = stack.pop()
        if left[i] != LEAF_SENTINEL:
            stack.append(int(left[i]))
            stack.append(int(right[i]))
            reached += 2
    if reached != n:
        raise CorruptionError("node arrays contain a cycle detached from the root")


def unpack(compact, n_samples_hint=1, n_classes=None):
    """Rebuild a pointer tree.

    Training counts are not stored, so every leaf gets ``n_samples_hint``
    samples of its class and internal nodes sum their children.
    """
    validate(compact)
    n = len(compact)
    leaf = compact.left == LEAF_SENTINEL
    width = int(n_classes if n_classes is not None else compact.right[leaf].max() + 1)
    nodes = [None] * n
    order = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        if not leaf[i]:
            stack.append(int(compact.right[i]))
            stack.append(int(compact.left[i]))
    for i in reversed(order):
        if leaf[i]:
            counts = np.zeros(width, dtype=np.int64)
            counts[int(compact.right[i])] = n_samples_hint
            nodes[i] = TreeNode(counts)
        else:
            lt, rt = nodes[int(compact.left[i])], nodes[int(compact.right[i])]
            nodes[i] = TreeNode(lt.class_counts + rt.class_counts, int(compact.feature[i]),
                                float(compact.threshold[i]), lt, rt)
    return nodes[0]


def traverse(compact, features):
    """Descend from the root; returns ``(class_id, nodes_visited)``.

    Reads only the node records on the root-to-leaf path.
    """
    n = len(compact)
    i = 0
    visited = 0
    while True:
        if not 0 <= i < n:
            raise CorruptionError(f"node index {i} out of range for {n} nodes")
        visited += 1
        if visited > n:
            raise CorruptionError("traversal revisits nodes; the tree has a cycle")
        left = int(compact.left[i])
        if left == LEAF_SENTINEL:
            return int(compact.right[i]), visited
        if features[int(compact.feature[i])] <= float(compact.threshold[i]):
            i = left
        else:
            i = int(compact.right[i])


def predict_compact(compact, X):
    """Vectorised :func:`traverse` over the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    left = compact.left.astype(np.int64)
    right = compact.right.astype(np.int64)
    feature = compact.feature.astype(np.int64)
    thr = compact.threshold.astype(np.float64)
    for _ in range(len(compact)):
        internal = left[node] != LEAF_SENTINEL
        if not internal.any():
            return right[node]
        r = rows[internal]
        cur = node[internal]
        node[internal] = np.where(X[r, feature[cur]] <= thr[cur], left[cur], right[cur])
    raise CorruptionError("traversal did not reach a leaf")


# -- forest container ----------------------------------------------------------------------------

@dataclass(eq=False)
class CompactForest:
    trees: list = field(default_factory=list)  # per output: list of CompactTree
    n_classes: int = 2
    n_features: int = 0
    scheme: LabelScheme | None = None
    lane_width: int = DEFAULT_LANE_WIDTH
    version: int = VERSION

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
        return sum(len(t) for t in self.all_trees())

    def __eq__(self, other):
        return isinstance(other, CompactForest) and serialize(self) == serialize(other)

    __hash__ = None

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[np.newaxis, :]
        if X.shape[1] != self.n_features:
            raise InvalidArgumentError(
                f"model expects {self.n_features} features, got {X.shape[1]}")
        outs = [vote(np.stack([predict_compact(t, X) for t in per_output]), self.n_classes)
                for per_output in self.trees]
        out = np.stack(outs, axis=1)
        return out[:, 0] if self.n_outputs == 1 else out


def pack_forest(forest):
    if forest.n_features > 0xFFFF or forest.n_classes > 0xFFFF:
        raise CapacityError("feature or class count exceeds 16 bits", limit=0xFFFF)
    if forest.n_outputs > 0xFF or forest.lane_width > 0xFF:
        raise CapacityError("output count or lane width exceeds 8 bits", limit=0xFF)
    return CompactForest([[pack(t) for t in per_output] for per_output in forest.trees],
                         forest.n_classes, forest.n_features, forest.scheme, forest.lane_width)


def unpack_forest(compact, n_samples_hint=1):
    trees = [[unpack(t, n_samples_hint, compact.n_classes) for t in per_output]
             for per_output in compact.trees]
    return Forest(trees, compact.n_classes, compact.n_features, compact.scheme,
                  compact.lane_width)


def packed_size_bytes(forest):
    """Exact ``.ctf`` file size for a compact or pointer-form forest."""
    return HEADER_BYTES + 4 * forest.n_trees + NODE_BYTES * forest.node_count()


def serialize(forest):
    n_out = forest.n_outputs
    per_output = {len(t) for t in forest.trees}
    if len(per_output) > 1:
        raise InvalidArgumentError("every output must hold the same number of trees")
    scheme = NO_SCHEME if forest.scheme is None else forest.scheme.code
    trees = forest.all_trees()
    parts = [_HEADER.pack(MAGIC, forest.version, scheme, n_out, forest.n_classes,
                          forest.n_features, forest.lane_width, 0, len(trees)),
             struct.pack(f"<{len(trees)}I", *(len(t) for t in trees))]
    parts += [t.to_bytes() for t in trees]
    return b"".join(parts)


def deserialize(data):
    data = bytes(data)
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedError(f"{len(data)} bytes cannot hold a header")
        raise BadMagicError("not a CTF file")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < HEADER_BYTES:
        raise TruncatedError(f"header needs {HEADER_BYTES} bytes, got {len(data)}")
    (_, version, scheme, n_out, n_classes, n_features, lane, _pad,
     n_trees) = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, this reader handles {VERSION}")
    table_end = HEADER_BYTES + 4 * n_trees
    if len(data) < table_end:
        raise TruncatedError(f"node-count table needs {table_end} bytes, got {len(data)}")
    counts = struct.unpack_from(f"<{n_trees}I", data, HEADER_BYTES)
    expected = table_end + NODE_BYTES * sum(counts)
    if len(data) < expected:
        raise TruncatedError(f"payload needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise SizeMismatchError(f"{len(data) - expected} trailing bytes after the payload")
    if n_trees and (n_out == 0 or n_trees % n_out):
        raise SizeMismatchError(f"{n_trees} trees do not split evenly over {n_out} outputs")
    if any(c == 0 or c > MAX_NODES for c in counts):
        raise SizeMismatchError("node count outside 1..65534 in the count table")
    try:
        scheme = None if scheme == NO_SCHEME else LabelScheme.from_code(scheme)
    except InvalidArgumentError as exc:
        raise SizeMismatchError(str(exc)) from None
    trees = []
    pos = table_end
    for c in counts:
        tree = CompactTree.from_bytes(data[pos:pos + NODE_BYTES * c], c)
        validate(tree)
        trees.append(tree)
        pos += NODE_BYTES * c
    per = n_trees // n_out if n_out else 0
    grouped = [trees[o * per:(o + 1) * per] for o in range(n_out)]
    return CompactForest(grouped, n_classes, n_features, scheme, lane, version)


def save(forest, path):
    with open(path, "wb") as fh:
        fh.write(serialize(forest))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
