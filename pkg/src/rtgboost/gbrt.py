"""Second-order gradient-boosted regression trees with a squared-error objective.

Every ensemble fits one scalar target. Split search is exact and greedy:
all boundaries between consecutive distinct feature values are scored with

    gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma_split

and leaves take the Newton step ``-G / (H + lambda)``. Rows with a feature
value strictly below a threshold go left, everything else goes right.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _jsonfmt, _kernels
from .errors import (
    FeatureCountError,
    MalformedDocumentError,
    StructuralError,
    ValidationError,
    VersionError,
)

MODEL_VERSION = 1
IMPORTANCE_METRICS = ("weight", "gain", "cover")
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class BoostConfig:
    n_estimators: int = 1000
    learning_rate: float = 0.3
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma_split: float = 0.0
    min_child_weight: float = 1.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.n_estimators) != self.n_estimators or self.n_estimators < 0:
            raise ValidationError(f"n_estimators must be a non-negative integer, got {self.n_estimators!r}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValidationError(f"learning_rate must lie in (0, 1], got {self.learning_rate!r}")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValidationError(f"max_depth must be a positive integer, got {self.max_depth!r}")
        for name in ("reg_lambda", "gamma_split", "min_child_weight"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValidationError(f"{name} must be finite and >= 0, got {value!r}")
        if not 0.0 < self.subsample <= 1.0:
            raise ValidationError(f"subsample must lie in (0, 1], got {self.subsample!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed <= _U64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        object.__setattr__(self, "n_estimators", int(self.n_estimators))
        object.__setattr__(self, "max_depth", int(self.max_depth))
        object.__setattr__(self, "seed", int(self.seed))
        for name in ("learning_rate", "reg_lambda", "gamma_split", "min_child_weight", "subsample"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BoostConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        return cls(**known)


@dataclass(frozen=True)
class SplitCandidate:
    feature_index: int
    threshold: float
    gain: float


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat node arrays. ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    split_gain: np.ndarray
    cover: np.ndarray

    def __post_init__(self) -> None:
        for name in ("feature", "left", "right"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.int64))
        for name in ("threshold", "value", "split_gain", "cover"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        for name in self.__dataclass_fields__:
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return len(self.feature)

    @property
    def internal_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.feature >= 0)

    @classmethod
    def leaf(cls, value: float) -> "Tree":
        return cls([-1], [0.0], [-1], [-1], [value], [0.0], [0.0])

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.zeros(X.shape[0])
        _kernels.apply_tree(
            X, self.feature, self.threshold, self.left, self.right, self.value, 0, out
        )
        return out

    def to_nodes(self) -> list[dict]:
        nodes = []
        for i in range(len(self)):
            if self.feature[i] < 0:
                nodes.append({"leaf": float(self.value[i])})
            else:
                nodes.append(
                    {
                        "feature": int(self.feature[i]),
                        "threshold": float(self.threshold[i]),
                        "left": int(self.left[i]),
                        "right": int(self.right[i]),
                        "gain": float(self.split_gain[i]),
                        "cover": float(self.cover[i]),
                    }
                )
        return nodes

    @classmethod
    def from_nodes(cls, nodes: Sequence[Mapping]) -> "Tree":
        n = len(nodes)
        if n == 0:
            raise MalformedDocumentError("tree has no nodes")
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "value", "split_gain", "cover")}
        for i, node in enumerate(nodes):
            if not isinstance(node, Mapping):
                raise MalformedDocumentError(f"node {i} is not an object")
            if "leaf" in node:
                row = (-1, 0.0, -1, -1, node["leaf"], 0.0, 0.0)
            else:
                try:
                    row = (
                        node["feature"], node["threshold"], node["left"], node["right"],
                        0.0, node["gain"], node["cover"],
                    )
                except KeyError as exc:
                    raise MalformedDocumentError(f"node {i} lacks field {exc}") from None
            for key, val in zip(cols, row):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise MalformedDocumentError(f"node {i} field {key!r} is not a number")
                cols[key].append(val)
        tree = cls(**cols)
        _check_tree_shape(tree)
        return tree


def _check_tree_shape(tree: Tree) -> None:
    """Reject cycles, dangling child ids and orphaned nodes."""
    n = len(tree)
    visited = np.zeros(n, dtype=bool)
    stack = [0]
    while stack:
        i = stack.pop()
        if visited[i]:
            raise MalformedDocumentError(f"node {i} is reachable twice")
        visited[i] = True
        if tree.feature[i] >= 0:
            for child in (tree.left[i], tree.right[i]):
                if not 0 < child < n:
                    raise MalformedDocumentError(f"node {i} points at missing child {child}")
                stack.append(int(child))
    if not visited.all():
        raise MalformedDocumentError("tree contains unreachable nodes")
    if not (np.all(np.isfinite(tree.threshold)) and np.all(np.isfinite(tree.value))):
        raise MalformedDocumentError("tree contains non-finite numbers")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """A fitted booster: ``base_score + learning_rate * sum(tree(x))``."""

    base_score: float
    trees: tuple[Tree, ...]
    config: BoostConfig
    feature_count: int
    _flat: tuple = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "base_score", float(self.base_score))
        if self.feature_count < 1:
            raise StructuralError("feature_count must be positive")
        for t in self.trees:
            used = t.feature[t.feature >= 0]
            if used.size and used.max() >= self.feature_count:
                raise FeatureCountError(
                    f"a tree splits on feature {int(used.max())} but feature_count is {self.feature_count}"
                )
        object.__setattr__(self, "_flat", _flatten(self.trees))

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X) -> np.ndarray:
        """Predict a batch of rows."""
        X = _check_rows(X, self.feature_count)
        sums = _kernels.sum_trees(X, *self._flat)
        return self.base_score + self.config.learning_rate * sums

    def predict_row(self, row) -> float:
        x = np.asarray(row, dtype=np.float64)
        if x.shape != (self.feature_count,):
            raise StructuralError(
                f"expected a row of {self.feature_count} features, got shape {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValidationError("input row contains non-finite values")
        return self.base_score + self.config.learning_rate * _kernels.sum_trees_row(x, *self._flat)


def _flatten(trees: Sequence[Tree]) -> tuple:
    if not trees:
        empty_i = np.zeros(0, dtype=np.int64)
        return (empty_i, np.zeros(0), empty_i, empty_i, np.zeros(0), empty_i)
    offsets = np.cumsum([0] + [len(t) for t in trees[:-1]]).astype(np.int64)
    feature = np.concatenate([t.feature for t in trees])
    threshold = np.concatenate([t.threshold for t in trees])
    value = np.concatenate([t.value for t in trees])
    left = np.concatenate([np.where(t.left >= 0, t.left + off, -1) for t, off in zip(trees, offsets)])
    right = np.concatenate([np.where(t.right >= 0, t.right + off, -1) for t, off in zip(trees, offsets)])
    return (feature, threshold, left, right, value, offsets)


def _check_rows(X, feature_count: int | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise StructuralError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if feature_count is not None and X.shape[1] != feature_count:
        raise StructuralError(f"expected {feature_count} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("feature matrix contains non-finite values")
    return X


# ------------------------------------------------------------------ training


def compute_gradient_hessian(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ``0.5 * (pred - y)**2`` with respect to ``pred``."""
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if pred.shape != y.shape:
        raise StructuralError(f"predictions {pred.shape} and targets {y.shape} differ in shape")
    return pred - y, np.ones_like(pred)


def _presort(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
    values = np.ascontiguousarray(np.take_along_axis(X.T, order, axis=1))
    return values, order


def _row_mask(n_rows: int, rows) -> np.ndarray:
    node_of = np.full(n_rows, -1, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
        raise StructuralError("row index out of range")
    node_of[rows] = 0
    return node_of


def find_best_split(rows, X, gradients, hessians, cfg: BoostConfig) -> SplitCandidate | None:
    """Best positive-gain split of ``rows``, or None when no split qualifies."""
    X = _check_rows(X)
    g = np.ascontiguousarray(gradients, dtype=np.float64)
    h = np.ascontiguousarray(hessians, dtype=np.float64)
    node_of = _row_mask(X.shape[0], rows)
    members = node_of == 0
    G = np.array([g[members].sum()])
    H = np.array([h[members].sum()])
    best_feat = np.full(1, -1, dtype=np.int64)
    best_thr = np.zeros(1)
    best_gain = np.zeros(1)
    _kernels.scan_level(
        *_presort(X), g, h, node_of, np.array([members.sum() >= 2]), G, H,
        cfg.reg_lambda, cfg.gamma_split, cfg.min_child_weight, best_feat, best_thr, best_gain,
    )
    if best_feat[0] < 0:
        return None
    return SplitCandidate(int(best_feat[0]), float(best_thr[0]), float(best_gain[0]))


def _grow(X, presorted, g, h, node_of, n_members, cfg: BoostConfig, max_depth: int) -> Tree:
    capacity = 2 * n_members - 1
    if max_depth < 40:
        capacity = min(capacity, 2 ** (max_depth + 1) - 1)
    return Tree(
        *_kernels.grow_tree(
            X, *presorted, g, h, node_of, max(capacity, 1), max_depth,
            cfg.reg_lambda, cfg.gamma_split, cfg.min_child_weight,
        )
    )


def grow_tree(rows, X, gradients, hessians, cfg: BoostConfig, max_depth: int | None = None) -> Tree:
    """Grow a single regression tree over ``rows``.

    Args:
        max_depth: Overrides ``cfg.max_depth``; 0 yields a single leaf.
    """
    X = _check_rows(X)
    g = np.ascontiguousarray(gradients, dtype=np.float64)
    h = np.ascontiguousarray(hessians, dtype=np.float64)
    node_of = _row_mask(X.shape[0], rows)
    n_members = int((node_of == 0).sum())
    if n_members < 1:
        raise ValidationError("cannot grow a tree on zero rows")
    depth = cfg.max_depth if max_depth is None else int(max_depth)
    return _grow(X, _presort(X), g, h, node_of, n_members, cfg, depth)


def subsample_rows(n_rows: int, fraction: float, seed: int, round_index: int) -> np.ndarray:
    """Bernoulli row mask drawn from a Philox stream keyed on ``(seed, round)``."""
    if fraction >= 1.0:
        return np.ones(n_rows, dtype=bool)
    rng = np.random.Generator(np.random.Philox(key=(seed << 64) | round_index))
    u = rng.random(n_rows)
    mask = u < fraction
    if not mask.any():
        mask[np.argmin(u)] = True
    return mask


def fit_ensemble(X, y, cfg: BoostConfig | None = None) -> Ensemble:
    """Boost ``cfg.n_estimators`` trees onto a scalar target."""
    cfg = cfg or BoostConfig()
    X = _check_rows(X)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    n_rows = X.shape[0]
    if n_rows < 1:
        raise ValidationError("cannot fit an ensemble on an empty dataset")
    if len(y) != n_rows:
        raise StructuralError(f"{n_rows} input rows but {len(y)} targets")
    if not np.all(np.isfinite(y)):
        raise ValidationError("targets contain non-finite values")

    base_score = float(np.mean(y))
    presorted = _presort(X)
    tree_sums = np.zeros(n_rows)
    trees = []
    for round_index in range(cfg.n_estimators):
        pred = base_score + cfg.learning_rate * tree_sums
        g, h = compute_gradient_hessian(pred, y)
        mask = subsample_rows(n_rows, cfg.subsample, cfg.seed, round_index)
        node_of = np.where(mask, 0, -1).astype(np.int64)
        tree = _grow(X, presorted, g, h, node_of, int(mask.sum()), cfg, cfg.max_depth)
        _kernels.apply_tree(X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, 0, tree_sums)
        trees.append(tree)
    return Ensemble(base_score, tuple(trees), cfg, X.shape[1])


def predict(ensemble: Ensemble, input_row) -> float:
    return ensemble.predict_row(input_row)


# ---------------------------------------------------------------- importance


@dataclass(frozen=True)
class FeatureImportance:
    """Per-feature split statistics, keyed by feature index.

    ``gain`` and ``cover`` are means over the nodes counted in ``weight``;
    features that never split are absent from all three maps.
    """

    weight: dict[int, int]
    gain: dict[int, float]
    cover: dict[int, float]

    def metric(self, name: str) -> dict:
        if name not in IMPORTANCE_METRICS:
            raise ValueError(f"unknown importance metric {name!r}; choose from {IMPORTANCE_METRICS}")
        return getattr(self, name)


def importance(ensembles: Ensemble | Iterable[Ensemble]) -> FeatureImportance:
    """Pool split statistics over every tree of one or more ensembles."""
    if isinstance(ensembles, Ensemble):
        ensembles = [ensembles]
    counts: dict[int, int] = {}
    gains: dict[int, list[float]] = {}
    covers: dict[int, list[float]] = {}
    for ens in ensembles:
        for tree in ens.trees:
            for node in tree.internal_nodes:
                f = int(tree.feature[node])
                counts[f] = counts.get(f, 0) + 1
                gains.setdefault(f, []).append(float(tree.split_gain[node]))
                covers.setdefault(f, []).append(float(tree.cover[node]))
    keys = sorted(counts)
    return FeatureImportance(
        {f: counts[f] for f in keys},
        {f: math.fsum(gains[f]) / counts[f] for f in keys},
        {f: math.fsum(covers[f]) / counts[f] for f in keys},
    )


def feature_importance(ensemble: Ensemble | Iterable[Ensemble], metric: str = "weight") -> dict:
    return importance(ensemble).metric(metric)


# ------------------------------------------------------------- serialization


def to_document(ensemble: Ensemble) -> dict:
    return {
        "version": MODEL_VERSION,
        "config": ensemble.config.to_dict(),
        "feature_count": ensemble.feature_count,
        "base_score": ensemble.base_score,
        "trees": [t.to_nodes() for t in ensemble.trees],
    }


def from_document(doc, feature_count: int | None = None) -> Ensemble:
    if not isinstance(doc, Mapping):
        raise MalformedDocumentError("model document must be a JSON object")
    if "version" not in doc:
        raise MalformedDocumentError("model document has no version tag")
    if doc["version"] != MODEL_VERSION:
        raise VersionError(f"unsupported model version {doc['version']!r} (expected {MODEL_VERSION})")
    missing = [k for k in ("config", "feature_count", "base_score", "trees") if k not in doc]
    if missing:
        raise MalformedDocumentError(f"model document lacks fields {missing}")
    declared = doc["feature_count"]
    if isinstance(declared, bool) or not isinstance(declared, int) or declared < 1:
        raise MalformedDocumentError(f"feature_count must be a positive integer, got {declared!r}")
    if feature_count is not None and declared != feature_count:
        raise FeatureCountError(f"model expects {declared} features, caller supplies {feature_count}")
    try:
        config = BoostConfig.from_dict(doc["config"])
    except (TypeError, ValidationError, AttributeError) as exc:
        raise MalformedDocumentError(f"invalid config block: {exc}") from exc
    if not isinstance(doc["trees"], list):
        raise MalformedDocumentError("trees must be a list")
    trees = []
    for i, nodes in enumerate(doc["trees"]):
        if not isinstance(nodes, list):
            raise MalformedDocumentError(f"tree {i} is not a node list")
        trees.append(Tree.from_nodes(nodes))
    base = doc["base_score"]
    if isinstance(base, bool) or not isinstance(base, (int, float)):
        raise MalformedDocumentError("base_score must be a number")
    return Ensemble(float(base), tuple(trees), config, declared)


def serialize(ensemble: Ensemble) -> bytes:
    return (_jsonfmt.dumps(to_document(ensemble)) + "\n").encode()


def deserialize(data: bytes | str, feature_count: int | None = None) -> Ensemble:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocumentError(f"model document is not valid JSON: {exc}") from exc
    return from_document(doc, feature_count)
