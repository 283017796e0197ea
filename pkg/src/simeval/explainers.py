"""Feature attributions for tree models: TreeInterpreter, TreeSHAP, LIME.

Also holds the brute-force Shapley enumerator used to check TreeSHAP, the
top-K sparsification applied before explanations are shown or fed to a
SimEval, and the explanations file format.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, ExplainerError, IngestionError
from .trees import DecisionTree, Forest

EXPLAINERS = ("tree_interpreter", "tree_shap", "lime")
MAX_BRUTE_FORCE_D = 15


@dataclass(frozen=True)
class Attribution:
    contributions: np.ndarray
    base_value: float
    explainer: str

    @property
    def d(self):
        return len(self.contributions)


@dataclass(frozen=True)
class Explanation:
    """Sparse attribution: at most ``k`` nonzero entries in a length-d vector."""

    values: np.ndarray
    k: int
    explainer: str
    base_value: float = 0.0

    @property
    def support(self):
        return np.flatnonzero(self.values)

    @property
    def d(self):
        return len(self.values)


def _trees_of(model):
    trees = model.trees if isinstance(model, Forest) else (model,)
    for t in trees:
        if t.value is None or t.cover is None or len(t.value) != t.n_nodes:
            raise ExplainerError("model is missing node statistics")
    return trees


def _rows(model, X):
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[1] != model.d:
        raise ExplainerError(f"expected {model.d} features, got {X.shape[1]}")
    return X


# ------------------------------------------------------------ tree methods


def tree_interpreter_batch(model, X):
    """Saabas decomposition for each row of ``X``; returns (contributions, base)."""
    _trees_of(model)
    p = model.packed
    return _kernels.saabas_packed(p.offsets, p.feature, p.threshold, p.left, p.right, p.value, _rows(model, X))


def tree_interpreter(model, x) -> Attribution:
    """Attribute each change of node mean along the decision path to the split feature."""
    contrib, base = tree_interpreter_batch(model, x)
    return Attribution(contrib[0], float(base[0]), "tree_interpreter")


def tree_shap_batch(model, X):
    """Path-dependent TreeSHAP (cover-weighted conditional expectations)."""
    for t in _trees_of(model):
        if np.any(t.cover <= 0):
            raise ExplainerError("zero-cover node; TreeSHAP needs positive node covers")
    p = model.packed
    return _kernels.treeshap_packed(p.offsets, p.feature, p.threshold, p.left, p.right, p.value,
                                    p.cover, p.max_depth, _rows(model, X))


def tree_shap(model, x) -> Attribution:
    phi, base = tree_shap_batch(model, x)
    return Attribution(phi[0], float(base[0]), "tree_shap")


# ------------------------------------------------------ brute-force oracle


def _subset_bits(d):
    masks = np.arange(2**d, dtype=np.int64)
    return masks, ((masks[:, None] >> np.arange(d)) & 1).astype(bool)


def _path_dependent_values(tree: DecisionTree, x, bits):
    """E[f(x) | x_S] for every subset S, by recursive cover-weighted traversal."""

    def value(node):
        f = tree.feature[node]
        if f < 0:
            return np.full(len(bits), tree.value[node])
        lc, rc = tree.left[node], tree.right[node]
        lv, rv = value(lc), value(rc)
        hot = lv if x[f] <= tree.threshold[node] else rv
        mixed = (lv * tree.cover[lc] + rv * tree.cover[rc]) / tree.cover[node]
        return np.where(bits[:, f], hot, mixed)

    return value(0)


def _interventional_values(model, x, background, bits, chunk=256):
    out = np.empty(len(bits))
    nb = len(background)
    for lo in range(0, len(bits), chunk):
        sel = bits[lo:lo + chunk]
        rows = np.where(sel[:, None, :], x[None, None, :], background[None, :, :])
        pred = model.predict_proba(rows.reshape(-1, len(x)))
        out[lo:lo + chunk] = pred.reshape(len(sel), nb).mean(axis=1)
    return out


def shapley_from_values(v, d):
    """Exact Shapley values from a table ``v[mask]`` over all 2**d coalitions."""
    masks = np.arange(2**d, dtype=np.int64)
    sizes = np.array([bin(m).count("1") for m in range(2**d)])
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) if s < d else 0.0
                       for s in range(d + 1)])
    phi = np.zeros(d)
    for i in range(d):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = np.sum(weight[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return phi


def brute_force_shapley(model, x, background=None, *, value_function=None) -> Attribution:
    """Shapley values by full enumeration of feature coalitions.

    ``value_function="interventional"`` (the default when ``background`` is
    given) averages the model over background rows with the coalition's
    features fixed to ``x``.  ``"path_dependent"`` uses the cover-weighted
    conditional expectation of each tree, the value function TreeSHAP
    computes.  Cost is exponential in d, so d is capped at 15.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = len(x)
    if d != model.d:
        raise ExplainerError(f"expected {model.d} features, got {d}")
    if d > MAX_BRUTE_FORCE_D:
        raise ExplainerError(f"brute-force Shapley is limited to d <= {MAX_BRUTE_FORCE_D}, got d = {d}")
    if value_function is None:
        value_function = "path_dependent" if background is None else "interventional"
    _, bits = _subset_bits(d)
    if value_function == "interventional":
        if background is None:
            raise ExplainerError("interventional value function needs a background set")
        bg = background.X if hasattr(background, "X") else np.asarray(background, dtype=np.float64)
        if len(bg) == 0:
            raise ExplainerError("background must be non-empty")
        v = _interventional_values(model, x, np.atleast_2d(bg), bits)
    elif value_function == "path_dependent":
        trees = _trees_of(model)
        v = np.zeros(len(bits))
        for t in trees:
            v += _path_dependent_values(t, x, bits)
        v /= len(trees)
    else:
        raise ConfigError(f"unknown value function {value_function!r}")
    return Attribution(shapley_from_values(v, d), float(v[0]), "brute_force")


# --------------------------------------------------------------------- LIME


@dataclass(frozen=True)
class LimeConfig:
    n_samples: int = 5000
    kernel_width: float | None = None
    ridge_penalty: float = 1.0
    seed: int = 0

    def resolved(self, d):
        kw = 0.75 * math.sqrt(d) if self.kernel_width is None else self.kernel_width
        if self.n_samples < d + 2:
            raise ConfigError(f"LIME needs n_samples >= d + 2 = {d + 2}")
        if kw <= 0:
            raise ConfigError("kernel_width must be positive")
        if self.ridge_penalty < 0:
            raise ConfigError("ridge_penalty must be non-negative")
        return kw


@dataclass(frozen=True)
class TrainStats:
    """Per-feature sampling statistics for LIME perturbations."""

    means: np.ndarray
    stds: np.ndarray
    categorical: Mapping[int, tuple[np.ndarray, np.ndarray]]

    @classmethod
    def from_data(cls, X, categorical_mask=None):
        X = np.asarray(X, dtype=np.float64)
        mask = np.zeros(X.shape[1], bool) if categorical_mask is None else np.asarray(categorical_mask, bool)
        means = X.mean(axis=0)
        stds = X.std(axis=0)
        stds[stds == 0] = 1.0
        cats = {}
        for j in np.flatnonzero(mask):
            vals, counts = np.unique(X[:, j], return_counts=True)
            cats[int(j)] = (vals, counts / counts.sum())
        return cls(means, stds, cats)

    @property
    def d(self):
        return len(self.means)


def weighted_ridge(Z, y, w, penalty):
    """Weighted ridge with an unpenalized intercept; returns (coef, intercept)."""
    sw = w.sum()
    zbar = w @ Z / sw
    ybar = w @ y / sw
    Zc = Z - zbar
    A = Zc.T @ (Zc * w[:, None]) + penalty * np.eye(Z.shape[1])
    b = Zc.T @ (w * (y - ybar))
    try:
        coef = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise ExplainerError("singular weighted system; use ridge_penalty > 0") from None
    return coef, float(ybar - zbar @ coef)


def lime_explain(predict_fn: Callable[[np.ndarray], np.ndarray], x, train_stats: TrainStats,
                 cfg: LimeConfig = LimeConfig()) -> Attribution:
    """Local weighted-ridge surrogate around ``x``.

    Numeric features are perturbed as standard normals in standardized space
    and mapped back; categorical ones are drawn from training frequencies and
    enter the surrogate as "same category as x" indicators.  The first sample
    is ``x`` itself.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = len(x)
    if train_stats.d != d:
        raise ExplainerError("train statistics do not cover all features")
    kw = cfg.resolved(d)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    Z = rng.standard_normal((n, d))
    Z[0] = (x - train_stats.means) / train_stats.stds
    raw = Z * train_stats.stds + train_stats.means
    raw[0] = x
    for j, (vals, probs) in sorted(train_stats.categorical.items()):
        draw = vals[rng.choice(len(vals), size=n, p=probs)]
        draw[0] = x[j]
        raw[:, j] = draw
        Z[:, j] = (draw == x[j]).astype(np.float64)
    ref = Z[0]
    dist2 = np.sum((Z - ref) ** 2, axis=1)
    weights = np.exp(-dist2 / kw**2)
    y = np.asarray(predict_fn(raw), dtype=np.float64).reshape(-1)
    coef, intercept = weighted_ridge(Z, y, weights, cfg.ridge_penalty)
    return Attribution(coef, intercept, "lime")


# ----------------------------------------------------------- sparsification


def topk_indices(values, k):
    mag = np.abs(np.asarray(values, dtype=np.float64))
    order = np.lexsort((np.arange(len(mag)), -mag))
    return np.sort(order[:k])


def sparsify_topk(a: Attribution | Explanation, k: int = 6) -> Explanation:
    """Keep the k largest-magnitude entries (ties to the lower index)."""
    src = np.asarray(a.contributions if isinstance(a, Attribution) else a.values)
    if k <= 0:
        raise ConfigError("k must be positive")
    if k > len(src):
        raise ConfigError(f"k = {k} exceeds d = {len(src)}")
    vals = np.zeros(len(src))
    keep = topk_indices(src, k)
    vals[keep] = src[keep]
    return Explanation(vals, k, a.explainer, float(a.base_value))


# --------------------------------------------------------------- batch api


def explain_rows(explainer, model, X, ids=None, *, k=6, lime_cfg: LimeConfig = None,
                 train_stats: TrainStats = None, seed_for=None) -> list[Explanation]:
    """Sparse explanations of ``model`` for each row of ``X``.

    For LIME, ``seed_for(id)`` supplies the per-transaction seed so results do
    not depend on batch composition or execution order.
    """
    X = _rows(model, X)
    if explainer == "tree_interpreter":
        contrib, base = tree_interpreter_batch(model, X)
    elif explainer == "tree_shap":
        contrib, base = tree_shap_batch(model, X)
    elif explainer == "lime":
        if train_stats is None:
            raise ExplainerError("LIME needs training statistics")
        lime_cfg = lime_cfg or LimeConfig()
        contrib = np.empty_like(X)
        base = np.empty(len(X))
        for r in range(len(X)):
            seed = lime_cfg.seed if seed_for is None else seed_for(ids[r] if ids is not None else r)
            cfg = LimeConfig(lime_cfg.n_samples, lime_cfg.kernel_width, lime_cfg.ridge_penalty, seed)
            att = lime_explain(model.predict_proba, X[r], train_stats, cfg)
            contrib[r], base[r] = att.contributions, att.base_value
    else:
        raise ConfigError(f"unknown explainer {explainer!r}")
    return [sparsify_topk(Attribution(contrib[r], float(base[r]), explainer), k) for r in range(len(X))]


# ------------------------------------------------------------------ file io


def dumps_explanations(rows, k=None) -> str:
    """``rows`` is an iterable of (id, Explanation); pairs are written largest first."""
    rows = list(rows)
    if k is None:
        k = max((e.k for _, e in rows), default=6)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    head = ["id", "explainer", "base_value"]
    for j in range(k):
        head += [f"j{j}", f"v{j}"]
    writer.writerow(head)
    for tid, e in rows:
        support = e.support
        if len(support) > k:
            raise DataError(f"explanation for {tid!r} has more than {k} nonzeros")
        order = support[np.lexsort((support, -np.abs(e.values[support])))]
        cells = [str(tid), e.explainer, repr(float(e.base_value))]
        for j in range(k):
            if j < len(order):
                cells += [str(int(order[j])), repr(float(e.values[order[j]]))]
            else:
                cells += ["-1", "0.0"]
        writer.writerow(cells)
    return buf.getvalue()


def write_explanations(rows, path, k=None):
    Path(path).write_text(dumps_explanations(rows, k), encoding="utf-8")


def load_explanations(path, d=None) -> dict[str, dict[str, Explanation]]:
    """Read an explanations file into ``{explainer: {id: Explanation}}``.

    Without ``d`` the dense length is one past the largest feature index seen.
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if not head or head[:3] != ["id", "explainer", "base_value"] or (len(head) - 3) % 2:
            raise IngestionError(0, "explanations header must be 'id,explainer,base_value,j0,v0,...'")
        k = (len(head) - 3) // 2
        parsed = []
        for r, row in enumerate(reader, start=1):
            if len(row) != len(head):
                raise IngestionError(r, "malformed row")
            try:
                base = float(row[2])
                pairs = [(int(row[3 + 2 * j]), float(row[4 + 2 * j])) for j in range(k)]
            except ValueError:
                raise IngestionError(r, "malformed index/value pair") from None
            pairs = [(j, v) for j, v in pairs if j != -1]
            if any(j < 0 or (d is not None and j >= d) for j, _ in pairs):
                raise IngestionError(r, "feature index out of range")
            if len({j for j, _ in pairs}) != len(pairs):
                raise IngestionError(r, "repeated feature index")
            parsed.append((row[0], row[1], base, pairs))
    if d is None:
        d = 1 + max((j for *_, pairs in parsed for j, _ in pairs), default=-1)
    out: dict[str, dict[str, Explanation]] = {}
    for r, (tid, tag, base, pairs) in enumerate(parsed, start=1):
        vals = np.zeros(d)
        for j, v in pairs:
            vals[j] = v
        bucket = out.setdefault(tag, {})
        if tid in bucket:
            raise IngestionError(r, f"duplicate id {tid!r} for explainer {tag!r}")
        bucket[tid] = Explanation(vals, k, tag, base)
    return out
