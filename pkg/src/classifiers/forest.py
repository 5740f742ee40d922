import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..config import derive_seed
from ..errors import EmptyTrainingSet, ShapeMismatch
from ..models import LabeledSet

logger = logging.getLogger(__name__)

LEAF = -1


def gini(counts: np.ndarray) -> float:
    """Gini impurity of a class-count vector"""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass(eq=False)
class DecisionTree:
    """Binary tree in flat arrays; feature == -1 marks a leaf"""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of x (x <= threshold goes left)"""
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = x[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] != LEAF
        return node

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        hist = self.value[self.apply(x)]
        return hist / hist.sum(axis=1, keepdims=True)


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int, order: np.ndarray,
                max_features: int) -> Optional[Tuple[int, float]]:
    """Lowest weighted-Gini split, trying features in `order`.

    Only the first max_features features are considered unless none of them
    can split the node, in which case the search continues through the rest.
    """
    n = len(y)
    best: Optional[Tuple[float, int, float]] = None
    for tried, f in enumerate(order):
        if tried >= max_features and best is not None:
            break
        values = x[:, f]
        sort = np.argsort(values, kind='stable')
        v = values[sort]
        valid = np.flatnonzero(v[:-1] < v[1:])
        if valid.size == 0:
            continue
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[sort]] = 1.0
        left_counts = np.cumsum(onehot, axis=0)[valid]
        right_counts = onehot.sum(axis=0) - left_counts
        n_left = (valid + 1).astype(np.float64)
        n_right = n - n_left
        gini_left = 1.0 - np.sum((left_counts / n_left[:, None]) ** 2, axis=1)
        gini_right = 1.0 - np.sum((right_counts / n_right[:, None]) ** 2, axis=1)
        weighted = (n_left * gini_left + n_right * gini_right) / n
        pick = int(np.argmin(weighted))
        if best is None or weighted[pick] < best[0]:
            i = valid[pick]
            threshold = (v[i] + v[i + 1]) / 2.0
            if not v[i] <= threshold < v[i + 1]:
                threshold = v[i]
            best = (float(weighted[pick]), int(f), float(threshold))
    if best is None:
        return None
    return best[1], best[2]


def build_tree(x: np.ndarray, y: np.ndarray, n_classes: int, max_features: int,
               rng: np.random.Generator) -> DecisionTree:
    """Grow a CART tree until nodes are pure or hold fewer than 2 samples"""
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[np.ndarray] = []

    def new_node(indices: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(np.bincount(y[indices], minlength=n_classes).astype(np.float64))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)))]
    while stack:
        node, indices = stack.pop()
        if len(indices) < 2 or np.count_nonzero(value[node]) <= 1:
            continue
        order = rng.permutation(x.shape[1])
        split = _best_split(x[indices], y[indices], n_classes, order, max_features)
        if split is None:
            continue
        f, thr = split
        goes_left = x[indices, f] <= thr
        left_node = new_node(indices[goes_left])
        right_node = new_node(indices[~goes_left])
        feature[node], threshold[node] = f, thr
        left[node], right[node] = left_node, right_node
        stack.append((right_node, indices[~goes_left]))
        stack.append((left_node, indices[goes_left]))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64).reshape(len(feature), n_classes),
    )


def resolve_max_features(max_features: Any, n_features: int) -> int:
    if max_features == 'sqrt':
        return max(1, int(math.sqrt(n_features)))
    if max_features == 'log2':
        return max(1, int(math.log2(n_features))) if n_features > 1 else 1
    if max_features in ('all', None):
        return n_features
    return max(1, min(int(max_features), n_features))


@dataclass(eq=False)
class ForestModel:
    trees: List[DecisionTree]
    tree_seeds: np.ndarray
    n_trees: int
    max_features: Any
    seed: int
    n_features: int
    class_table: List[str]

    kind = 'forest'

    def __repr__(self) -> str:
        return f"ForestModel(n_trees={self.n_trees}, max_features={self.max_features}, classes={len(self.class_table)})"

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Mean of the per-tree normalised leaf histograms"""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ShapeMismatch(f"Expected {self.n_features} features, got {x.shape[1]}")
        total = np.zeros((len(x), len(self.class_table)))
        for tree in self.trees:
            total += tree.predict_proba(x)
        return total / len(self.trees)

    def bootstrap_indices(self, tree_index: int, n_samples: int) -> np.ndarray:
        """Bootstrap sample drawn for one tree"""
        rng = np.random.default_rng(int(self.tree_seeds[tree_index]))
        return rng.integers(0, n_samples, n_samples)

    def oob_indices(self, tree_index: int, n_samples: int) -> np.ndarray:
        """Training rows the tree never saw"""
        seen = np.zeros(n_samples, dtype=bool)
        seen[self.bootstrap_indices(tree_index, n_samples)] = True
        return np.flatnonzero(~seen)

    def hyper_params(self) -> Dict[str, Any]:
        return {'n_trees': self.n_trees, 'max_features': self.max_features, 'seed': self.seed,
                'n_features': self.n_features}

    def arrays(self) -> Dict[str, np.ndarray]:
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees]).astype(np.int64)
        return {
            'node_offsets': offsets,
            'tree_seeds': self.tree_seeds.astype(np.int64),
            'feature': np.concatenate([t.feature for t in self.trees]),
            'threshold': np.concatenate([t.threshold for t in self.trees]),
            'left': np.concatenate([t.left for t in self.trees]),
            'right': np.concatenate([t.right for t in self.trees]),
            'value': np.concatenate([t.value for t in self.trees]),
        }

    @classmethod
    def from_arrays(cls, hyper_params: Dict[str, Any], arrays: Dict[str, np.ndarray],
                    class_table: List[str]) -> 'ForestModel':
        offsets = arrays['node_offsets']
        trees = []
        for start, stop in zip(offsets[:-1], offsets[1:]):
            trees.append(DecisionTree(
                feature=arrays['feature'][start:stop],
                threshold=arrays['threshold'][start:stop],
                left=arrays['left'][start:stop],
                right=arrays['right'][start:stop],
                value=arrays['value'][start:stop],
            ))
        return cls(trees, arrays['tree_seeds'], int(hyper_params['n_trees']), hyper_params['max_features'],
                   int(hyper_params['seed']), int(hyper_params['n_features']), list(class_table))


def forest_fit(train: LabeledSet, n_trees: int = 100, max_features: Any = 'sqrt', seed: int = 0,
               jobs: int = 1) -> ForestModel:
    """Bagged CART trees with a random feature subset per node"""
    if not len(train):
        raise EmptyTrainingSet("Random forest needs at least one training item")
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    x = train.matrix()
    y = train.label_indices
    n_classes = len(train.class_table)
    per_node = resolve_max_features(max_features, x.shape[1])
    seeds = np.array([derive_seed(seed, 'tree', t) for t in range(n_trees)], dtype=np.int64)

    def grow(t: int) -> DecisionTree:
        rng = np.random.default_rng(int(seeds[t]))
        sample = rng.integers(0, len(y), len(y))
        return build_tree(x[sample], y[sample], n_classes, per_node, rng)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        trees = list(pool.map(grow, range(n_trees)))
    logger.info(f"Fitted random forest: {n_trees} trees, {per_node} features per split, "
                f"{sum(t.n_nodes for t in trees)} nodes")
    return ForestModel(trees, seeds, n_trees, max_features, seed, x.shape[1], list(train.class_table))


def forest_predict(model: ForestModel, x) -> np.ndarray:
    values = np.asarray(x, dtype=np.float64)
    probabilities = model.predict_proba(values)
    return probabilities[0] if values.ndim == 1 else probabilities
