"""From-scratch CART decision trees and random forests for fraud probability.

Both the stand-in for the production fraud model and the SimEval proxies are
built from these classes.  Trees are stored as flat node arrays (see
``_kernels``); :meth:`DecisionTree.nodes` exposes them as :class:`TreeNode`
records for inspection.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, FitError
from .seeding import derive_seed

FAMILIES = ("random_forest", "decision_tree")
MODEL_FORMAT = "simeval-tree-model"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    model_family: str = "random_forest"
    min_samples_leaf: int = 5
    n_trees: int = 100
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.model_family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.model_family!r}")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")

    @property
    def effective_trees(self):
        return self.n_trees if self.model_family == "random_forest" else 1

    def label(self):
        if self.model_family == "random_forest":
            return f"random_forest(n_trees={self.n_trees}, min_samples_leaf={self.min_samples_leaf})"
        return f"decision_tree(min_samples_leaf={self.min_samples_leaf})"


@dataclass(frozen=True)
class GridSpec:
    candidates: tuple[Hyperparams, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ConfigError("grid must contain at least one candidate")

    @classmethod
    def default(cls, n_trees=100, seed=0, families=FAMILIES, leaf_sizes=(5, 10, 15, 20, 25, 30),
                max_depth=None):
        """Model family x minimum leaf size; 12 candidates with the defaults."""
        cands = [
            Hyperparams(fam, leaf, n_trees if fam == "random_forest" else 1, max_depth,
                        derive_seed(seed, "candidate", fam, leaf))
            for fam in families
            for leaf in leaf_sizes
        ]
        return cls(tuple(cands))

    def __len__(self):
        return len(self.candidates)


@dataclass(frozen=True)
class TreeNode:
    id: int
    node_mean: float
    cover: float
    split_feature: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self):
        return self.split_feature is None


class _Packed:
    __slots__ = ("offsets", "feature", "threshold", "left", "right", "value", "cover", "max_depth")

    def __init__(self, trees):
        sizes = [len(t.feature) for t in trees]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        for name in ("feature", "threshold", "left", "right", "value", "cover"):
            setattr(self, name, np.ascontiguousarray(np.concatenate([getattr(t, name) for t in trees])))
        self.max_depth = max(t.depth for t in trees)


def _as_rows(X, d):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != d:
        raise DataError(f"expected {d} features, got {X.shape[1]}")
    return np.ascontiguousarray(X), single


class _TreeModel:
    d: int

    def predict_proba(self, X):
        """Fraud probability for one row (scalar) or a matrix of rows."""
        X, single = _as_rows(X, self.d)
        p = self.packed
        out = _kernels.predict_packed(p.offsets, p.feature, p.threshold, p.left, p.right, p.value, X)
        return float(out[0]) if single else out


@dataclass(eq=False)
class DecisionTree(_TreeModel):
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    d: int
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.cover = np.asarray(self.cover, dtype=np.float64)

    @classmethod
    def stump(cls, d, feature, threshold, left_mean, right_mean, left_cover=1.0, right_cover=1.0):
        """Depth-1 tree built by hand; the root mean is cover-weighted."""
        total = left_cover + right_cover
        root = (left_mean * left_cover + right_mean * right_cover) / total
        return cls([feature, -1, -1], [threshold, 0.0, 0.0], [1, -1, -1], [2, -1, -1],
                   [root, left_mean, right_mean], [total, left_cover, right_cover], d)

    @classmethod
    def constant(cls, d, value, cover=1.0):
        return cls([-1], [0.0], [-1], [-1], [value], [cover], d)

    @property
    def n_nodes(self):
        return len(self.feature)

    @cached_property
    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    @cached_property
    def packed(self):
        return _Packed([self])

    def nodes(self):
        for k in range(self.n_nodes):
            if self.feature[k] < 0:
                yield TreeNode(k, float(self.value[k]), float(self.cover[k]))
            else:
                yield TreeNode(k, float(self.value[k]), float(self.cover[k]), int(self.feature[k]),
                               float(self.threshold[k]), int(self.left[k]), int(self.right[k]))

    def to_dict(self):
        records = []
        for node in self.nodes():
            rec = {"id": node.id, "kind": "leaf" if node.is_leaf else "split",
                   "node_mean": node.node_mean, "cover": node.cover}
            if not node.is_leaf:
                rec.update(feature=node.split_feature, threshold=node.threshold,
                           left=node.left, right=node.right)
            records.append(rec)
        return {"d": self.d, "hyperparams": asdict(self.hyperparams), "nodes": records}

    @classmethod
    def from_dict(cls, obj):
        nodes = sorted(obj["nodes"], key=lambda r: r["id"])
        if [r["id"] for r in nodes] != list(range(len(nodes))):
            raise ValueError("node ids must be 0..n-1")
        leaf = [r["kind"] == "leaf" for r in nodes]
        return cls(
            [-1 if lf else r["feature"] for r, lf in zip(nodes, leaf)],
            [0.0 if lf else r["threshold"] for r, lf in zip(nodes, leaf)],
            [-1 if lf else r["left"] for r, lf in zip(nodes, leaf)],
            [-1 if lf else r["right"] for r, lf in zip(nodes, leaf)],
            [r["node_mean"] for r in nodes],
            [r["cover"] for r in nodes],
            obj["d"],
            Hyperparams(**obj["hyperparams"]),
        )


@dataclass(eq=False)
class Forest(_TreeModel):
    trees: tuple[DecisionTree, ...]
    seed: int = 0
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        self.trees = tuple(self.trees)
        if not self.trees:
            raise ValueError("a forest needs at least one tree")
        ds = {t.d for t in self.trees}
        if len(ds) != 1:
            raise ValueError("all trees of a forest must share one feature space")

    @property
    def d(self):
        return self.trees[0].d

    @property
    def n_trees(self):
        return len(self.trees)

    @cached_property
    def packed(self):
        return _Packed(self.trees)

    def to_dict(self):
        return {"d": self.d, "seed": self.seed, "hyperparams": asdict(self.hyperparams),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, obj):
        return cls(tuple(DecisionTree.from_dict(t) for t in obj["trees"]), obj["seed"],
                   Hyperparams(**obj["hyperparams"]))


Model = DecisionTree | Forest


def predict_proba(model, x):
    return model.predict_proba(x)


# ------------------------------------------------------------------ fitting


def _check_rows(X, y):
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise FitError("cannot fit on empty input")
    if X.shape[1] == 0:
        raise FitError("at least one feature is required")
    if len(y) != X.shape[0]:
        raise FitError("rows and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise FitError("labels must be binary")
    return X, y


def _grow(X, y, w, hp, mtry, seed):
    if w.sum() < hp.min_samples_leaf:
        raise FitError(f"need at least min_samples_leaf={hp.min_samples_leaf} rows, got {int(w.sum())}")
    max_depth = -1 if hp.max_depth is None else hp.max_depth
    arrays = _kernels.build_tree(X, y, w, float(hp.min_samples_leaf), max_depth, mtry, seed % (2**32))
    return DecisionTree(*arrays, d=X.shape[1], hyperparams=hp)


def fit_tree(X, y, hp: Hyperparams = None) -> DecisionTree:
    """Single CART tree over all rows, every feature considered at each split."""
    hp = hp or Hyperparams("decision_tree")
    X, y = _check_rows(X, y)
    return _grow(X, y, np.ones(len(y)), hp, X.shape[1], 0)


def fit_forest(X, y, hp: Hyperparams = None, ids: Sequence[str] | None = None) -> Forest:
    """Random forest: bootstrap resamples and ceil(sqrt(d)) features per split.

    When ``ids`` are given, rows are first put in id order so that bootstrap
    draws are keyed to transaction ids rather than row positions; the fitted
    forest is then invariant to the order in which rows are supplied.
    """
    hp = hp or Hyperparams()
    X, y = _check_rows(X, y)
    if ids is not None:
        order = np.argsort(np.asarray([str(i) for i in ids]), kind="stable")
        X, y = np.ascontiguousarray(X[order]), y[order]
    n, d = X.shape
    mtry = max(1, math.ceil(math.sqrt(d)))
    trees = []
    for t in range(hp.n_trees):
        tree_seed = derive_seed(hp.seed, "tree", t)
        if hp.bootstrap:
            rng = np.random.default_rng(tree_seed)
            w = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        else:
            w = np.ones(n)
        trees.append(_grow(X, y, w, hp, mtry, tree_seed))
    return Forest(tuple(trees), hp.seed, hp)


def fit_model(X, y, hp: Hyperparams, ids=None) -> Model:
    if hp.model_family == "decision_tree":
        return fit_tree(X, y, hp)
    return fit_forest(X, y, hp, ids)


# -------------------------------------------------------------- grid search


@dataclass
class GridRow:
    hyperparams: Hyperparams
    score: float
    model: Model = field(repr=False, default=None)

    def as_record(self):
        return {"candidate": self.hyperparams.label(), "model_family": self.hyperparams.model_family,
                "min_samples_leaf": self.hyperparams.min_samples_leaf,
                "n_trees": self.hyperparams.effective_trees, "validation_pdr": self.score}


def selection_key(hp: Hyperparams, score):
    return (score, hp.effective_trees, hp.min_samples_leaf)


@dataclass
class GridResult:
    rows: list[GridRow]

    @property
    def best_row(self):
        return min(self.rows, key=lambda r: selection_key(r.hyperparams, r.score))

    @property
    def best(self):
        return self.best_row.hyperparams

    @property
    def table(self):
        return [r.as_record() for r in self.rows]


def grid_search(X_train, y_train, grid: GridSpec, objective: Callable[[Model], float], *,
                ids=None, parallel=1) -> GridResult:
    """Fit every candidate on the training rows and score it with ``objective``.

    ``objective`` maps a fitted model to its validation PDR (lower is better).
    The winner is the lowest score, then fewer trees, then the smaller leaf
    minimum.
    """

    def run(hp):
        try:
            model = fit_model(X_train, y_train, hp, ids)
            return GridRow(hp, float(objective(model)), model)
        except Exception as exc:
            raise FitError(f"grid candidate {hp.label()} failed: {exc}") from exc

    if parallel > 1:
        with ThreadPoolExecutor(parallel) as pool:
            rows = list(pool.map(run, grid.candidates))
    else:
        rows = [run(hp) for hp in grid.candidates]
    return GridResult(rows)


# ------------------------------------------------------------ serialization


def dumps_model(model: Model) -> str:
    kind = "forest" if isinstance(model, Forest) else "tree"
    doc = {"format": MODEL_FORMAT, "version": MODEL_FORMAT_VERSION, "kind": kind, "model": model.to_dict()}
    return json.dumps(doc, indent=1, sort_keys=True)


def loads_model(text: str) -> Model:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a serialized tree model")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    if doc["kind"] == "forest":
        return Forest.from_dict(doc["model"])
    return DecisionTree.from_dict(doc["model"])


def with_seed(hp: Hyperparams, seed) -> Hyperparams:
    return replace(hp, seed=seed)
