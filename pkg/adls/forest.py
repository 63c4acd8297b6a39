"""CART regression trees and a bagged random forest, built from scratch on numpy.

Trees are grown breadth-first: every level scores all candidate splits of all
open nodes in one vectorized pass per feature. The forest keeps its trees
individually so callers can read per-tree predictions (the ensemble) as well
as their mean.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from adls.errors import CorruptError, DimensionError, FitError, FormatError, InsufficientEnsembleError
from adls.models import Scenario, rng_for

MAGIC = b"ADLS1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<5sHBII")  # magic, version, scenario tag, n_features, n_trees
_NODE_COUNT = struct.Struct("<I")
_NODE_DTYPE = np.dtype([
    ("feature", "<i4"),
    ("threshold", "<f8"),
    ("left", "<u4"),
    ("right", "<u4"),
    ("value", "<f8"),
    ("count", "<u4"),
])
_SCENARIO_TAGS = {Scenario.RGBD: 0, Scenario.D_ONLY: 1}
_NO_SCENARIO = 255

# Relative SSE reduction a split must exceed to count as an improvement.
_MIN_GAIN = 1e-12


class RegressionTree(BaseModel):
    """Flat node arrays; `feature == -1` marks a leaf."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by every row; rows with x[f] <= threshold go left."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            current = node[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


class RegressionForest(BaseModel):
    model_config = ConfigDict(frozen=True)

    trees: list[RegressionTree] = Field(min_length=1)
    n_features: int = Field(ge=1)
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @model_validator(mode="after")
    def _check(self) -> RegressionForest:
        for tree in self.trees:
            if np.any(tree.feature >= self.n_features):
                raise DimensionError("tree splits on a feature the forest does not have")
        return self


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator | None = None,
    max_features: int | None = None,
) -> RegressionTree:
    """Grow a CART tree by variance reduction until nodes are pure or unsplittable.

    Candidate thresholds are midpoints between consecutive distinct values.
    Equal-gain splits resolve to the lowest feature index, then the lowest
    threshold. With `max_features`, each node only scores a random subset of
    that many features drawn from `rng`.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise FitError("cannot fit a tree on empty input")
    if X.shape[0] != y.shape[0]:
        raise FitError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise FitError("targets must be finite")
    n, n_features = X.shape
    subset = max_features is not None and max_features < n_features
    if subset and rng is None:
        raise FitError("max_features needs a random generator")

    feature = [-1]
    threshold = [0.0]
    left = [0]
    right = [0]
    value = [0.0]
    count = [n]

    node_of = np.zeros(n, dtype=np.intp)
    # Row f lists the open samples sorted by node, then by feature f.
    orders = np.argsort(X, axis=0, kind="stable").T.copy()

    while orders.shape[1]:
        first = orders[0]
        seg_node = node_of[first]
        starts = np.flatnonzero(np.r_[True, seg_node[1:] != seg_node[:-1]])
        nodes = seg_node[starts]
        sizes = np.diff(np.r_[starts, first.size])
        seg_id = np.repeat(np.arange(starts.size), sizes)

        ys = y[first]
        lo = np.minimum.reduceat(ys, starts)
        hi = np.maximum.reduceat(ys, starts)
        mean = np.add.reduceat(ys, starts) / sizes
        pure = lo == hi
        for nd, val, size in zip(nodes.tolist(), np.where(pure, lo, mean).tolist(), sizes.tolist()):
            value[nd] = val
            count[nd] = size

        centered = np.zeros(n)
        centered[first] = ys - mean[seg_id]
        parent_sse = np.add.reduceat(centered[first] ** 2, starts)

        best_gain = np.where(pure, np.inf, parent_sse * _MIN_GAIN)
        best_feature = np.full(starts.size, -1, dtype=np.intp)
        best_threshold = np.zeros(starts.size)

        allowed = None
        if subset:
            picks = np.argsort(rng.random((starts.size, n_features)), axis=1)[:, :max_features]
            allowed = np.zeros((starts.size, n_features), dtype=bool)
            np.put_along_axis(allowed, picks, True, axis=1)

        pos = np.arange(first.size)
        n_left = pos - starts[seg_id] + 1
        n_right = sizes[seg_id] - n_left
        interior = n_right > 0
        safe_right = np.maximum(n_right, 1)

        for f in range(n_features):
            order = orders[f]
            xs = X[order, f]
            cy = centered[order]
            cs = np.cumsum(cy)
            sum_left = cs - np.r_[0.0, cs][starts][seg_id]
            sum_right = np.add.reduceat(cy, starts)[seg_id] - sum_left
            ok = interior & np.r_[xs[:-1] < xs[1:], False]
            if allowed is not None:
                ok &= allowed[seg_id, f]
            gain = np.where(ok, sum_left ** 2 / n_left + sum_right ** 2 / safe_right, -np.inf)

            seg_best = np.maximum.reduceat(gain, starts)
            better = seg_best > best_gain
            if not better.any():
                continue
            hit = (gain == seg_best[seg_id]) & ok
            split_at = np.minimum.reduceat(np.where(hit, pos, first.size), starts)[better]
            lower, upper = xs[split_at], xs[split_at + 1]
            mid = (lower + upper) / 2.0
            best_gain[better] = seg_best[better]
            best_feature[better] = f
            best_threshold[better] = np.where(mid < upper, mid, lower)

        split = best_feature >= 0
        if not split.any():
            break
        split_segs = np.flatnonzero(split)
        child_left = np.full(starts.size, -1, dtype=np.intp)
        child_left[split_segs] = len(feature) + 2 * np.arange(split_segs.size)
        for s in split_segs.tolist():
            nd = int(nodes[s])
            feature[nd] = int(best_feature[s])
            threshold[nd] = float(best_threshold[s])
            left[nd] = int(child_left[s])
            right[nd] = int(child_left[s]) + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(0)
                right.append(0)
                value.append(0.0)
                count.append(0)

        moving_mask = split[seg_id]
        moving = first[moving_mask]
        ms = seg_id[moving_mask]
        go_left = X[moving, best_feature[ms]] <= best_threshold[ms]
        node_of[moving] = np.where(go_left, child_left[ms], child_left[ms] + 1)

        is_open = np.zeros(n, dtype=bool)
        is_open[moving] = True
        orders = orders[is_open[orders]].reshape(n_features, moving.size)
        regroup = np.argsort(node_of[orders], axis=1, kind="stable")
        orders = np.take_along_axis(orders, regroup, axis=1)

    return RegressionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.intp),
        right=np.array(right, dtype=np.intp),
        value=np.array(value, dtype=np.float64),
        count=np.array(count, dtype=np.int64),
    )


def _fit_member(X: np.ndarray, y: np.ndarray, seed: int, index: int, max_features: int | None) -> RegressionTree:
    rng = rng_for(seed, index)
    boot = rng.integers(0, y.shape[0], y.shape[0])
    return fit_tree(X[boot], y[boot], rng, max_features)


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int,
    seed: int,
    max_features: int | None = None,
    threads: int = 1,
) -> RegressionForest:
    """Bagged forest: tree i fits a bootstrap sample drawn from stream (seed, i).

    Threaded and serial training give identical trees.
    """
    if n_trees < 1:
        raise FitError("a forest needs at least one tree")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise FitError("cannot fit a forest on empty input")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(lambda i: _fit_member(X, y, seed, i, max_features), range(n_trees)))
    else:
        trees = [_fit_member(X, y, seed, i, max_features) for i in range(n_trees)]
    return RegressionForest(trees=trees, n_features=X.shape[1], seed=seed)


def predict_per_tree(forest: RegressionForest, X: np.ndarray) -> np.ndarray:
    """(rows, trees) matrix; column m holds tree m's predictions."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise DimensionError(f"expected {forest.n_features} features, got shape {X.shape}")
    return np.column_stack([tree.predict(X) for tree in forest.trees])


def predict_mean(forest: RegressionForest, X: np.ndarray) -> np.ndarray:
    return predict_per_tree(forest, X).mean(axis=1)


def ensemble_variance(per_tree: np.ndarray) -> np.ndarray:
    """Population variance across members per row; exactly 0 where all members agree."""
    per_tree = np.asarray(per_tree, dtype=np.float64)
    if per_tree.ndim != 2 or per_tree.shape[1] < 2:
        raise InsufficientEnsembleError("ensemble variance needs at least two members")
    variance = per_tree.var(axis=1)
    variance[np.ptp(per_tree, axis=1) == 0] = 0.0
    return np.maximum(variance, 0.0)


def serialize_forest(forest: RegressionForest, scenario: Scenario | None = None) -> bytes:
    tag = _SCENARIO_TAGS[scenario] if scenario is not None else _NO_SCENARIO
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, tag, forest.n_features, forest.n_trees)]
    for tree in forest.trees:
        nodes = np.empty(tree.n_nodes, dtype=_NODE_DTYPE)
        nodes["feature"] = tree.feature
        nodes["threshold"] = tree.threshold
        nodes["left"] = tree.left
        nodes["right"] = tree.right
        nodes["value"] = tree.value
        nodes["count"] = tree.count
        parts.append(_NODE_COUNT.pack(tree.n_nodes))
        parts.append(nodes.tobytes())
    return b"".join(parts)


def deserialize_forest(data: bytes) -> tuple[RegressionForest, Scenario | None]:
    """Parse an ADLS1 container; returns the forest and its scenario tag."""
    if len(data) >= len(MAGIC) and data[:len(MAGIC)] != MAGIC:
        raise FormatError("not an ADLS1 forest container")
    if len(data) < _HEADER.size:
        raise CorruptError("forest container is truncated")
    _, version, tag, n_features, n_trees = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported forest format version {version}")
    scenarios = {v: k for k, v in _SCENARIO_TAGS.items()}
    if tag != _NO_SCENARIO and tag not in scenarios:
        raise FormatError(f"unknown scenario tag {tag}")

    offset = _HEADER.size
    trees: list[RegressionTree] = []
    for _ in range(n_trees):
        if offset + _NODE_COUNT.size > len(data):
            raise CorruptError("forest container is truncated")
        (n_nodes,) = _NODE_COUNT.unpack_from(data, offset)
        offset += _NODE_COUNT.size
        if n_nodes == 0 or offset + n_nodes * _NODE_DTYPE.itemsize > len(data):
            raise CorruptError("forest container is truncated")
        nodes = np.frombuffer(data, dtype=_NODE_DTYPE, count=n_nodes, offset=offset)
        offset += n_nodes * _NODE_DTYPE.itemsize
        internal = nodes["feature"] >= 0
        index = np.arange(n_nodes)[internal]
        left, right = nodes["left"][internal], nodes["right"][internal]
        # children always follow their parent, so links never point backwards
        if (
            np.any(nodes["feature"][internal] >= n_features)
            or np.any(left <= index) or np.any(right <= index)
            or np.any(left >= n_nodes) or np.any(right >= n_nodes)
        ):
            raise CorruptError("forest container holds an inconsistent tree")
        trees.append(RegressionTree(
            feature=nodes["feature"].astype(np.int32),
            threshold=nodes["threshold"].astype(np.float64),
            left=nodes["left"].astype(np.intp),
            right=nodes["right"].astype(np.intp),
            value=nodes["value"].astype(np.float64),
            count=nodes["count"].astype(np.int64),
        ))
    if offset != len(data):
        raise CorruptError("trailing bytes after the last tree")
    if not trees:
        raise CorruptError("forest container holds no trees")
    return RegressionForest(trees=trees, n_features=n_features), scenarios.get(tag)


def save_forest(forest: RegressionForest, path: Path, scenario: Scenario | None = None) -> None:
    path.write_bytes(serialize_forest(forest, scenario))


def load_forest(path: Path) -> tuple[RegressionForest, Scenario | None]:
    return deserialize_forest(path.read_bytes())
