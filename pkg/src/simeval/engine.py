"""SimEval experiment engine.

A SimEval is a proxy model trained to predict the fraud label from exactly the
information an analyst saw in one study arm: the transaction ``x``, the model
score ``yhat`` and, in explanation arms, the sparse explanation ``E``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .data import (AnalystLog, Dataset, FeatureSchema, SignalSpec, SyntheticConfig, distribution_check,
                   generate_synthetic, load_analyst_log, load_transactions, make_arm_splits,
                   simulate_analyst)
from .errors import ConfigError, DataError, SimEvalError
from .explainers import (EXPLAINERS, Attribution, Explanation, LimeConfig, TrainStats,
                         load_explanations, lime_explain, sparsify_topk, tree_interpreter_batch,
                         tree_shap_batch)
from .metrics import (CI, PDRParams, analyst_association, confusion_by_decision, format_estimate,
                      pdr, pdr_with_ci, repetitiveness_stats, select_threshold)
from .seeding import derive_seed
from .trees import FAMILIES, Forest, GridResult, GridSpec, Hyperparams, fit_model, grid_search, selection_key

REPORT_FORMAT = "simeval-report"
REPORT_VERSION = 1


class StageError(SimEvalError):
    """Wraps a failure with the pipeline stage and arm it happened in."""

    def __init__(self, stage, arm, cause):
        self.stage, self.arm, self.cause = stage, arm, cause
        where = f"stage {stage!r}" + (f", arm {arm!r}" if arm else "")
        super().__init__(f"{where}: {cause}")


class ArmKind(str, Enum):
    BASELINE = "baseline_x_yhat"
    FULL = "full_x_yhat_e"
    EXPLANATION_ONLY = "explanation_only_yhat_e"

    @property
    def has_x(self):
        return self is not ArmKind.EXPLANATION_ONLY

    @property
    def has_e(self):
        return self is not ArmKind.BASELINE


@dataclass(frozen=True)
class ArmConfig:
    name: str
    kind: ArmKind
    explainer: str | None = None
    k: int = 6
    grid: GridSpec | None = None
    seed: int = 0
    explanations_path: str | None = None
    parent: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ArmKind(self.kind))
        if self.kind.has_e and not self.explainer:
            raise ConfigError(f"arm {self.name!r}: kind {self.kind.value} requires an explainer")
        if not self.kind.has_e and self.explainer:
            raise ConfigError(f"arm {self.name!r}: baseline arms take no explainer")
        if self.k < 1:
            raise ConfigError(f"arm {self.name!r}: K must be positive")

    @property
    def split_name(self):
        return self.parent or self.name


@dataclass
class ProxyModel:
    model: object
    threshold: float
    layout: tuple[str, ...]

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")
        width = getattr(self.model, "d", len(self.layout))
        if width != len(self.layout):
            raise ConfigError("layout width does not match the model")

    def predict_proba(self, rows):
        return np.asarray(self.model.predict_proba(rows), dtype=np.float64)

    def decide(self, rows):
        """True means decline (predicted fraud probability above the cut)."""
        return self.predict_proba(rows) > self.threshold


# ----------------------------------------------------------------- assembly


def explanation_matrix(ids, explanations: Mapping[str, Explanation], d):
    E = np.zeros((len(ids), d))
    for r, tid in enumerate(ids):
        try:
            E[r] = explanations[tid].values
        except KeyError:
            raise DataError(f"no explanation for transaction {tid!r}") from None
    return E


def assemble_columns(kind: ArmKind, X, yhat, E=None, feature_names=None):
    """Stack ``[x | yhat | E]`` with blocks dropped per arm kind."""
    kind = ArmKind(kind)
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    names = feature_names or [f"f{j}" for j in range(d)]
    blocks, layout = [], []
    if kind.has_x:
        blocks.append(X)
        layout += [f"x:{n}" for n in names]
    blocks.append(np.asarray(yhat, dtype=np.float64).reshape(-1, 1))
    layout.append("yhat")
    if kind.has_e:
        if E is None:
            raise DataError("explanations are required for this arm kind")
        blocks.append(np.asarray(E, dtype=np.float64))
        layout += [f"e:{n}" for n in names]
    return np.ascontiguousarray(np.hstack(blocks)), tuple(layout)


def assemble_inputs(kind, transactions: Dataset, f, explanations: Mapping[str, Explanation] | None = None):
    """Design matrix and column layout for the given transactions."""
    kind = ArmKind(kind)
    yhat = f.predict_proba(transactions.X)
    E = None
    if kind.has_e:
        if explanations is None:
            raise DataError("explanations are required for this arm kind")
        E = explanation_matrix(transactions.ids.tolist(), explanations, transactions.schema.d)
    return assemble_columns(kind, transactions.X, yhat, E, list(transactions.schema.names))


# ----------------------------------------------------------- proxy training


def threshold_objective(X_train, y_train, amt_train, X_val, y_val, amt_val, params: PDRParams):
    """Validation PDR of a model whose cut is chosen on its training rows."""

    def objective(model):
        cut = select_threshold(model.predict_proba(X_train), y_train, amt_train, params)
        return pdr(model.predict_proba(X_val) > cut, y_val, amt_val, params)

    return objective


def proxy_from(model, X_train, y_train, amt_train, layout, params):
    cut = select_threshold(model.predict_proba(X_train), y_train, amt_train, params)
    return ProxyModel(model, cut, layout)


def run_grid(arm: ArmConfig, train: Dataset, val: Dataset, Xtr, Xva, params, parallel=1) -> GridResult:
    grid = arm.grid or GridSpec.default(seed=derive_seed(arm.seed, "grid"))
    objective = threshold_objective(Xtr, train.labels, train.amounts, Xva, val.labels, val.amounts, params)
    return grid_search(Xtr, train.labels, grid, objective, ids=train.ids.tolist(), parallel=parallel)


def train_proxy(arm: ArmConfig, dataset: Dataset, f, explanations, split, params=PDRParams(), parallel=1):
    """Grid-search the proxy on the arm's train split; returns (ProxyModel, GridResult).

    Candidates are ranked by validation PDR.  The winning model (already fit
    on the full train split) gets its decision cut from the train split.
    """
    train, val = dataset.subset(split.train_ids), dataset.subset(split.validation_ids)
    Xtr, layout = assemble_inputs(arm.kind, train, f, explanations)
    Xva, _ = assemble_inputs(arm.kind, val, f, explanations)
    result = run_grid(arm, train, val, Xtr, Xva, params, parallel)
    best = result.best_row
    return proxy_from(best.model, Xtr, train.labels, train.amounts, layout, params), result


def evaluate_arm(proxy: ProxyModel, X_val, labels, amounts, B=2000, alpha=0.10, seed=0,
                 params=PDRParams()) -> CI:
    """Validation PDR of the proxy's decisions with a pivotal bootstrap CI."""
    if len(labels) == 0:
        raise DataError("validation split is empty")
    return pdr_with_ci(proxy.decide(X_val), labels, amounts, params, B, alpha, seed)


@dataclass(frozen=True)
class ParrotingDiagnostic:
    original: CI
    proxy: CI
    agreement_rate: float

    @property
    def parroting(self):
        return self.agreement_rate == 1.0

    def as_record(self):
        return {"original_pdr": self.original.as_record(), "simeval_pdr": self.proxy.as_record(),
                "agreement_rate": self.agreement_rate, "parroting": self.parroting}


def original_model_decisions(yhat_train, y_train, amt_train, yhat_val, params=PDRParams()):
    """Threshold the model score with the same train-PDR rule used for proxies."""
    cut = select_threshold(yhat_train, y_train, amt_train, params)
    return np.asarray(yhat_val) > cut, cut


def parroting_diagnostic(original_decline, proxy_decline, labels, amounts, params=PDRParams(),
                         B=2000, alpha=0.10, seed=0) -> ParrotingDiagnostic:
    """Compare the proxy with simply thresholding the model score.

    A proxy whose decisions agree with the thresholded score on every
    validation transaction is flagged as parroting.
    """
    original_decline = np.asarray(original_decline, dtype=bool)
    proxy_decline = np.asarray(proxy_decline, dtype=bool)
    orig = pdr_with_ci(original_decline, labels, amounts, params, B, alpha, derive_seed(seed, "original"))
    prox = pdr_with_ci(proxy_decline, labels, amounts, params, B, alpha, derive_seed(seed, "proxy"))
    agree = float(np.mean(original_decline == proxy_decline))
    return ParrotingDiagnostic(orig, prox, agree)


# ------------------------------------------------------------------- config


DEFAULT_ARMS = {
    "tree_interpreter": {"kind": "full_x_yhat_e", "explainer": "tree_interpreter"},
    "lime": {"kind": "full_x_yhat_e", "explainer": "lime"},
    "tree_shap": {"kind": "full_x_yhat_e", "explainer": "tree_shap"},
    "model_score": {"kind": "baseline_x_yhat"},
}


def _get(table, key, default, kind=None):
    val = table.get(key, default)
    if kind is not None and val is not None and not isinstance(val, kind):
        raise ConfigError(f"config key {key!r} has the wrong type")
    return val


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_file(cls, path, seed=None):
        import tomli

        path = Path(path)
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from None
        return cls.from_dict(raw, seed, path.parent)

    @classmethod
    def from_dict(cls, raw, seed=None, base_dir=None):
        cfg = cls(raw, int(raw.get("seed", 0) if seed is None else seed), Path(base_dir or Path.cwd()))
        cfg.validate()
        return cfg

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def section(self, name):
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        return sec

    # data
    @property
    def data(self):
        return self.section("data")

    def synthetic_config(self, n=None, seed=None):
        d = self.data
        sig = SignalSpec(tuple(_get(d, "signal_features", [0, 1, 2, 3], list)),
                         None if d.get("signal_weights") is None else tuple(d["signal_weights"]),
                         d.get("signal_threshold"), float(_get(d, "noise", 0.1)))
        n_total = n if n is not None else int(_get(d, "n_history", 4000, int)) + int(_get(d, "n_experiment", 2000, int))
        return SyntheticConfig(int(_get(d, "d", 112, int)), n_total, float(_get(d, "fraud_rate", 0.15)), sig,
                               float(_get(d, "amount_mu", 4.0)), float(_get(d, "amount_sigma", 1.0)),
                               int(_get(d, "n_categorical", 0, int)), int(_get(d, "n_categories", 4, int)),
                               derive_seed(self.seed, "data") if seed is None else seed)

    def schema(self):
        d = self.data
        if d.get("source", "synthetic") == "synthetic":
            return self.synthetic_config().schema()
        names = d.get("feature_names")
        if names is None:
            names = [f"f{j}" for j in range(int(_get(d, "d", 0, int)))]
        cats = d.get("categorical", {})
        return FeatureSchema(tuple(names), tuple(None if n not in cats else tuple(cats[n]) for n in names))

    @property
    def validation_size(self):
        return int(_get(self.data, "validation_size", 500, int))

    @property
    def train_size(self):
        return int(_get(self.data, "train_size", 1000, int))

    # metrics
    @property
    def params(self):
        return PDRParams(float(_get(self.section("metrics"), "chargeback_multiplier", 1.0)))

    @property
    def B(self):
        return int(_get(self.section("metrics"), "B", 2000, int))

    @property
    def alpha(self):
        return float(_get(self.section("metrics"), "alpha", 0.10))

    # explainers
    @property
    def k(self):
        return int(_get(self.section("explainers"), "k", 6, int))

    @property
    def lime(self):
        lime = self.section("explainers").get("lime", {})
        return LimeConfig(int(lime.get("n_samples", 5000)), lime.get("kernel_width"),
                          float(lime.get("ridge_penalty", 1.0)), 0)

    # models
    @property
    def original_hyperparams(self):
        m = self.section("original_model")
        return Hyperparams(m.get("family", "random_forest"), int(m.get("min_samples_leaf", 5)),
                           int(m.get("n_trees", 200)), m.get("max_depth"),
                           derive_seed(self.seed, "original_model"))

    def grid_for(self, arm_name, overrides=None):
        g = dict(self.section("grid"))
        g.update(overrides or {})
        fams = tuple(g.get("families", FAMILIES))
        leaves = tuple(int(v) for v in g.get("min_samples_leaf", (5, 10, 15, 20, 25, 30)))
        return GridSpec.default(int(g.get("n_trees", 100)), derive_seed(self.seed, "grid", arm_name),
                                fams, leaves, g.get("max_depth"))

    @property
    def selection(self):
        mode = self.section("grid").get("selection", "global")
        if mode not in ("global", "per_arm"):
            raise ConfigError("grid.selection must be 'global' or 'per_arm'")
        return mode

    # arms
    def arms(self) -> list[ArmConfig]:
        table = self.raw.get("arms") or DEFAULT_ARMS
        out = []
        for name, entry in table.items():
            if not isinstance(entry, dict):
                raise ConfigError(f"[arms.{name}] must be a table")
            unknown = set(entry) - {"kind", "explainer", "k", "grid", "explanations"}
            if unknown:
                raise ConfigError(f"[arms.{name}] unknown keys {sorted(unknown)}")
            explainer = entry.get("explainer")
            if explainer is not None and explainer not in EXPLAINERS and "explanations" not in entry:
                raise ConfigError(f"[arms.{name}] unknown explainer {explainer!r}")
            out.append(ArmConfig(name, ArmKind(entry.get("kind", "full_x_yhat_e" if explainer else "baseline_x_yhat")),
                                 explainer, int(entry.get("k", self.k)), self.grid_for(name, entry.get("grid")),
                                 derive_seed(self.seed, "arm", name), entry.get("explanations")))
        if self.section("experiment").get("exclude_x", False):
            for arm in list(out):
                if arm.kind is ArmKind.FULL:
                    name = f"{arm.name}_exclude_x"
                    out.append(ArmConfig(name, ArmKind.EXPLANATION_ONLY, arm.explainer, arm.k,
                                         self.grid_for(name, table[arm.name].get("grid")),
                                         derive_seed(self.seed, "arm", name), arm.explanations_path, arm.name))
        names = [a.name for a in out]
        if len(set(names)) != len(names):
            raise ConfigError("arm names must be unique")
        return out

    def validate(self):
        try:
            arms = self.arms()
            if not arms:
                raise ConfigError("no arms configured")
            if self.data.get("source", "synthetic") == "synthetic":
                self.synthetic_config().validate()
            elif self.data.get("source") != "files":
                raise ConfigError("data.source must be 'synthetic' or 'files'")
            self.params, self.original_hyperparams, self.selection
            d = self.schema().d
            for arm in arms:
                if arm.kind.has_e and arm.k > d:
                    raise ConfigError(f"arm {arm.name!r}: K = {arm.k} exceeds d = {d}")
            self.lime.resolved(d)
            if not 0 < self.alpha < 1:
                raise ConfigError("metrics.alpha must lie in (0, 1)")
            if self.B < 100:
                raise ConfigError("metrics.B must be >= 100")
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None


# ------------------------------------------------------------------ reports


@dataclass
class ArmResult:
    arm: str
    kind: str
    explainer: str | None
    k: int | None
    parent: str | None
    n_train: int
    n_validation: int
    simeval: CI
    original: CI
    threshold: float
    original_threshold: float
    hyperparams: dict
    grid: list
    agreement_rate: float
    max_ks: float
    analyst: dict | None = None
    repetitiveness: dict | None = None

    @property
    def parroting(self):
        return self.agreement_rate == 1.0

    def as_record(self):
        return {
            "arm": self.arm, "kind": self.kind, "explainer": self.explainer, "k": self.k, "parent": self.parent,
            "n_train": self.n_train, "n_validation": self.n_validation,
            "simeval_pdr": self.simeval.as_record(), "original_pdr": self.original.as_record(),
            "threshold": self.threshold, "original_threshold": self.original_threshold,
            "hyperparams": self.hyperparams, "grid": self.grid,
            "parroting": {"agreement_rate": self.agreement_rate, "flagged": self.parroting},
            "distribution_max_ks": self.max_ks, "analyst": self.analyst, "repetitiveness": self.repetitiveness,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(rec["arm"], rec["kind"], rec["explainer"], rec["k"], rec["parent"], rec["n_train"],
                   rec["n_validation"], CI.from_record(rec["simeval_pdr"]), CI.from_record(rec["original_pdr"]),
                   rec["threshold"], rec["original_threshold"], rec["hyperparams"], rec["grid"],
                   rec["parroting"]["agreement_rate"], rec["distribution_max_ks"], rec.get("analyst"),
                   rec.get("repetitiveness"))


@dataclass
class ExperimentReport:
    arms: list[ArmResult]
    seed: int
    config: dict
    selection: str
    selected: dict | None = None

    def to_json(self):
        doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "tool_version": __version__,
               "seed": self.seed, "config": self.config, "selection": self.selection,
               "selection_uses_validation": True, "selected_hyperparams": self.selected,
               "arms": [a.as_record() for a in self.arms]}
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != REPORT_FORMAT:
            raise DataError("not a SimEval report")
        return cls([ArmResult.from_record(a) for a in doc["arms"]], doc["seed"], doc["config"],
                   doc["selection"], doc.get("selected_hyperparams"))

    def arm(self, name):
        for a in self.arms:
            if a.arm == name:
                return a
        raise KeyError(name)

    def render(self):
        return render_report(self)


def render_report(report: ExperimentReport) -> str:
    level = report.arms[0].simeval.level if report.arms else 90
    lines = [f"PDR (lower is better); parentheses contain {level:g} percent pivotal bootstrap CIs", ""]
    main = [a for a in report.arms if a.kind != ArmKind.EXPLANATION_ONLY.value]
    width = max([len(a.arm) for a in report.arms] + [4])
    lines.append(f"{'arm':<{width}} | {'Original Model':<22} | {'SimEvals':<22}")
    lines.append("-" * (width + 50))
    for a in main:
        lines.append(f"{a.arm:<{width}} | {format_estimate(a.original, clamp_zero=True):<22} | "
                     f"{format_estimate(a.simeval, clamp_zero=True):<22}")
    variants = [a for a in report.arms if a.kind == ArmKind.EXPLANATION_ONLY.value]
    if variants:
        lines += ["", f"{'arm':<{width}} | {'SimEvals excluding x':<22} | {'SimEvals':<22}", "-" * (width + 50)]
        by_name = {a.arm: a for a in report.arms}
        for v in variants:
            parent = by_name.get(v.parent)
            full = format_estimate(parent.simeval, clamp_zero=True) if parent else "n/a"
            lines.append(f"{v.parent or v.arm:<{width}} | {format_estimate(v.simeval, clamp_zero=True):<22} | {full:<22}")
    assoc = [a for a in report.arms if a.analyst]
    if assoc:
        lines += ["", f"{'arm':<{width}} | ROC AUC vs analyst: Original Model | SimEvals", "-" * (width + 50)]
        for a in assoc:
            lines.append(f"{a.arm:<{width}} | {a.analyst['auc_original']:.3f} | {a.analyst['auc_simeval']:.3f}")
    rep = [a for a in report.arms if a.repetitiveness]
    if rep:
        lines += ["", f"{'arm':<{width}} | variance | unique features", "-" * (width + 50)]
        for a in rep:
            lines.append(f"{a.arm:<{width}} | {a.repetitiveness['variance']:.3f} | "
                         f"{a.repetitiveness['unique_feature_count']}")
    lines += ["", *report_flags(report)]
    return "\n".join(lines) + "\n"


def report_flags(report: ExperimentReport) -> list[str]:
    """Parroting flags and CI-overlap comparison of each explanation arm with the baseline."""
    if not report.arms:
        raise DataError("report contains no arms")
    flags = [f"parroting: {a.arm} decisions equal the thresholded model score" for a in report.arms if a.parroting]
    baselines = [a for a in report.arms if a.kind == ArmKind.BASELINE.value]
    expl = [a for a in report.arms if a.kind == ArmKind.FULL.value]
    if not baselines or not expl:
        return flags
    base = baselines[0]
    better = [a.arm for a in expl if a.simeval.hi < base.simeval.lo]
    worse = [a.arm for a in expl if a.simeval.lo > base.simeval.hi]
    if not better and not worse:
        flags.append(f"no explainer separates from baseline ({base.arm}): all CIs overlap")
    for name in better:
        flags.append(f"candidate: {name} has lower PDR than {base.arm} with non-overlapping CIs")
    for name in worse:
        flags.append(f"worse than baseline: {name} has higher PDR than {base.arm} with non-overlapping CIs")
    return flags


# ---------------------------------------------------------------- pipeline


@dataclass
class ExperimentArtifacts:
    report: ExperimentReport
    history: Dataset
    experiment: Dataset
    original_model: Forest
    explanations: dict
    analyst_log: AnalystLog | None
    splits: list


def load_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.get("source", "synthetic") == "synthetic":
        full = generate_synthetic(cfg.synthetic_config())
        n_hist = int(d.get("n_history", 4000))
        return full.slice(0, n_hist), full.slice(n_hist, len(full))
    schema = cfg.schema()
    if "transactions" not in d or "history" not in d:
        raise ConfigError("data.source = 'files' needs 'transactions' and 'history' paths")
    history = load_transactions(cfg.path(d["history"]), schema)
    experiment = load_transactions(cfg.path(d["transactions"]), schema)
    if set(history.ids.tolist()) & set(experiment.ids.tolist()):
        raise DataError("history and experiment transactions must be disjoint")
    return history, experiment


def _stage(stage, arm=None):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, StageError) and isinstance(ev, Exception):
                raise StageError(stage, arm, ev) from ev
            return False

    return _Ctx()


def _compute_explanations(cfg, arms, experiment, history, f, needed, parallel):
    """Dense attributions per explainer for the transactions each one needs."""
    dense = {}
    for explainer, ids in needed.items():
        with _stage("explain", explainer):
            pos = experiment.positions(ids)
            X = experiment.X[pos]
            if explainer == "tree_interpreter":
                contrib, base = tree_interpreter_batch(f, X)
            elif explainer == "tree_shap":
                contrib, base = tree_shap_batch(f, X)
            elif explainer == "lime":
                stats = TrainStats.from_data(history.X, history.schema.categorical_mask)
                lime = cfg.lime

                def one(r):
                    c = LimeConfig(lime.n_samples, lime.kernel_width, lime.ridge_penalty,
                                   derive_seed(cfg.seed, "lime", ids[r]))
                    return lime_explain(f.predict_proba, X[r], stats, c)

                if parallel > 1:
                    with ThreadPoolExecutor(parallel) as pool:
                        atts = list(pool.map(one, range(len(ids))))
                else:
                    atts = [one(r) for r in range(len(ids))]
                contrib = np.array([a.contributions for a in atts]).reshape(len(ids), -1)
                base = np.array([a.base_value for a in atts])
            else:
                raise ConfigError(f"unknown explainer {explainer!r}")
            dense[explainer] = {tid: Attribution(contrib[r], float(base[r]), explainer) for r, tid in enumerate(ids)}
    return dense


def run_experiment(config, *, parallel=1, arms_filter=None, seed=None) -> ExperimentArtifacts:
    """Generate or load data, fit the model, explain, and train/evaluate every arm."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_file(config, seed)
    all_arms = cfg.arms()
    if arms_filter:
        unknown = set(arms_filter) - {a.name for a in all_arms}
        if unknown:
            raise ConfigError(f"unknown arms in filter: {sorted(unknown)}")
    arms = [a for a in all_arms if not arms_filter or a.name in arms_filter]
    params, B, alpha = cfg.params, cfg.B, cfg.alpha

    with _stage("data"):
        history, experiment = load_data(cfg)
        canonical = [a.name for a in all_arms if a.parent is None]
        splits = make_arm_splits(experiment, canonical, derive_seed(cfg.seed, "splits"),
                                 validation_size=cfg.validation_size, train_size=cfg.train_size)
        split_by = {s.arm_name: s for s in splits}

    with _stage("original_model"):
        f = fit_model(history.X, history.labels, cfg.original_hyperparams, history.ids.tolist())
        yhat = dict(zip(experiment.ids.tolist(), f.predict_proba(experiment.X)))

    analyst_log = None
    an = cfg.section("analyst")
    if an:
        with _stage("analyst"):
            if "log" in an:
                analyst_log = load_analyst_log(cfg.path(an["log"]), experiment)
            else:
                analyst_log = simulate_analyst(experiment, tuple(an.get("error_rates", (0.1, 0.1))),
                                               float(an.get("suspicious_rate", 0.1)), derive_seed(cfg.seed, "analyst"))

    # explanations: from file per arm, else computed once per explainer
    needed: dict[str, list] = {}
    order = {tid: k for k, tid in enumerate(experiment.ids.tolist())}
    for arm in arms:
        if arm.kind.has_e and arm.explanations_path is None:
            s = split_by[arm.split_name]
            ids = set(needed.get(arm.explainer, [])) | set(s.train_ids) | set(s.validation_ids)
            needed[arm.explainer] = sorted(ids, key=order.__getitem__)
    dense = _compute_explanations(cfg, arms, experiment, history, f, needed, parallel)
    sparse: dict[str, dict] = {}
    for arm in arms:
        if not arm.kind.has_e:
            continue
        with _stage("explain", arm.name):
            if arm.explanations_path is not None:
                loaded = load_explanations(cfg.path(arm.explanations_path), experiment.schema.d)
                if arm.explainer not in loaded:
                    raise DataError(f"explanations file has no rows for explainer {arm.explainer!r}")
                sparse[arm.name] = loaded[arm.explainer]
            else:
                sparse[arm.name] = {tid: sparsify_topk(a, arm.k) for tid, a in dense[arm.explainer].items()}

    def grid_stage(arm):
        with _stage("grid_search", arm.name):
            s = split_by[arm.split_name]
            train, val = experiment.subset(s.train_ids), experiment.subset(s.validation_ids)
            expl = sparse.get(arm.name)
            Xtr, layout = assemble_inputs(arm.kind, train, f, expl)
            Xva, _ = assemble_inputs(arm.kind, val, f, expl)
            return train, val, Xtr, Xva, layout, run_grid(arm, train, val, Xtr, Xva, params)

    if parallel > 1:
        with ThreadPoolExecutor(parallel) as pool:
            staged = list(pool.map(grid_stage, arms))
    else:
        staged = [grid_stage(a) for a in arms]

    selected = None
    if cfg.selection == "global":
        n_cand = {len(st[5].rows) for st in staged}
        if len(n_cand) != 1:
            raise StageError("grid_search", None, ConfigError("global selection needs one grid shape across arms"))
        mean_score = [float(np.mean([st[5].rows[c].score for st in staged])) for c in range(n_cand.pop())]
        ref = staged[0][5].rows
        best_c = min(range(len(ref)), key=lambda c: selection_key(ref[c].hyperparams, mean_score[c]))
        hp = ref[best_c].hyperparams
        selected = {"model_family": hp.model_family, "min_samples_leaf": hp.min_samples_leaf,
                    "n_trees": hp.effective_trees, "mean_validation_pdr": mean_score[best_c]}

    results = []
    for arm, (train, val, Xtr, Xva, layout, grid) in zip(arms, staged):
        with _stage("evaluate", arm.name):
            row = grid.rows[best_c] if selected is not None else grid.best_row
            proxy = proxy_from(row.model, Xtr, train.labels, train.amounts, layout, params)
            yh_tr = np.array([yhat[t] for t in train.ids])
            yh_va = np.array([yhat[t] for t in val.ids])
            orig_decline, orig_cut = original_model_decisions(yh_tr, train.labels, train.amounts, yh_va, params)
            proxy_decline = proxy.decide(Xva)
            diag = parroting_diagnostic(orig_decline, proxy_decline, val.labels, val.amounts, params, B, alpha,
                                        derive_seed(cfg.seed, "bootstrap", arm.name))
            ks = distribution_check(train.ids, val.ids, experiment).max_statistic
            analyst = None
            if analyst_log is not None:
                assoc = analyst_association(val.ids.tolist(), proxy.predict_proba(Xva), yh_va, analyst_log)
                table = confusion_by_decision(val.ids.tolist(), proxy_decline, analyst_log, val.labels)
                analyst = {"auc_simeval": assoc["simeval"], "auc_original": assoc["original_model"],
                           "confusion": table.as_records()}
            rep = None
            if arm.kind.has_e:
                st = repetitiveness_stats([sparse[arm.name][t] for t in val.ids], experiment.schema.d)
                rep = {"variance": st.variance, "unique_feature_count": st.unique_feature_count,
                       "proportions": st.proportions.tolist()}
            hp = row.hyperparams
            results.append(ArmResult(
                arm.name, arm.kind.value, arm.explainer, arm.k if arm.kind.has_e else None, arm.parent,
                len(train), len(val), diag.proxy, diag.original, proxy.threshold, orig_cut,
                {"model_family": hp.model_family, "min_samples_leaf": hp.min_samples_leaf,
                 "n_trees": hp.effective_trees},
                grid.table, diag.agreement_rate, ks, analyst, rep))

    report = ExperimentReport(results, cfg.seed, cfg.raw, cfg.selection, selected)
    explanations = {name: expl for name, expl in sparse.items()}
    return ExperimentArtifacts(report, history, experiment, f, explanations, analyst_log, splits)
