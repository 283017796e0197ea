"""Tabular transaction data: schema, ingestion, synthetic generation and splits.

Transactions are stored column-wise (``ids``, ``X``, ``amounts``, ``labels``)
so that the tree and metric code can work on numpy arrays directly; iterating a
:class:`Dataset` yields :class:`Transaction` records.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DataError, IngestionError
from .seeding import rng_for

DECISIONS = ("approved", "declined", "suspicious")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names; ``categories[j]`` is None for numeric features."""

    names: tuple[str, ...]
    categories: tuple[tuple[str, ...] | None, ...] = None

    def __post_init__(self):
        names = tuple(self.names)
        cats = self.categories
        if cats is None:
            cats = (None,) * len(names)
        cats = tuple(None if c is None else tuple(str(v) for v in c) for c in cats)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "categories", cats)
        if len(set(names)) != len(names):
            raise ConfigError("feature names must be unique")
        if len(cats) != len(names):
            raise ConfigError("one kind per feature required")
        for name, c in zip(names, cats):
            if c is not None and len(set(c)) < 2:
                raise ConfigError(f"categorical feature {name!r} needs >= 2 distinct categories")

    @classmethod
    def numeric(cls, d, prefix="f"):
        return cls(tuple(f"{prefix}{j}" for j in range(d)))

    @property
    def d(self):
        return len(self.names)

    def is_categorical(self, j):
        return self.categories[j] is not None

    @property
    def categorical_mask(self):
        return np.array([c is not None for c in self.categories], dtype=bool)


@dataclass(frozen=True)
class Transaction:
    id: str
    features: np.ndarray
    amount: float
    label: int


class Dataset:
    """Immutable collection of transactions conforming to one schema."""

    def __init__(self, schema: FeatureSchema, ids, X, amounts, labels):
        ids = np.asarray([str(i) for i in ids], dtype=object)
        X = np.array(X, dtype=np.float64, copy=True)
        if X.size != len(ids) * schema.d or (X.ndim == 2 and X.shape[1] != schema.d):
            raise DataError(f"feature matrix must have {len(ids)} rows of {schema.d} features")
        X = X.reshape(len(ids), schema.d)
        amounts = np.array(amounts, dtype=np.float64, copy=True).reshape(-1)
        labels = np.array(labels, copy=True).reshape(-1)
        n = len(ids)
        if len(amounts) != n or len(labels) != n:
            raise DataError("ids, amounts and labels must have equal length")
        if n and not np.all(amounts > 0):
            raise DataError(f"non-positive amount at row {int(np.argmin(amounts > 0)) + 1}")
        if n and not np.all((labels == 0) | (labels == 1)):
            raise DataError("labels must be 0 or 1")
        if len(set(ids.tolist())) != n:
            raise DataError("transaction ids must be unique")
        if not np.all(np.isfinite(X)):
            raise DataError("feature values must be finite")
        for j in range(schema.d):
            cats = schema.categories[j]
            if cats is not None and n:
                col = X[:, j]
                if np.any((col != np.round(col)) | (col < 0) | (col >= len(cats))):
                    raise DataError(f"feature {schema.names[j]!r} has codes outside its categories")
        for arr in (X, amounts, labels):
            arr.flags.writeable = False
        self.schema = schema
        self.ids = ids
        self.X = X
        self.amounts = amounts
        self.labels = labels.astype(np.int64)
        self.labels.flags.writeable = False
        self._pos = {tid: k for k, tid in enumerate(ids.tolist())}

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k) -> Transaction:
        return Transaction(self.ids[k], self.X[k], float(self.amounts[k]), int(self.labels[k]))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.amounts, other.amounts)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def transactions(self):
        return list(self)

    def positions(self, ids: Iterable[str]) -> np.ndarray:
        """Row positions of ``ids``; raises DataError on an unknown id."""
        out = []
        for tid in ids:
            try:
                out.append(self._pos[str(tid)])
            except KeyError:
                raise DataError(f"unknown transaction id {tid!r}") from None
        return np.asarray(out, dtype=np.int64)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        pos = self.positions(ids)
        return Dataset(self.schema, self.ids[pos], self.X[pos], self.amounts[pos], self.labels[pos])

    def slice(self, start, stop) -> "Dataset":
        return Dataset(self.schema, self.ids[start:stop], self.X[start:stop],
                       self.amounts[start:stop], self.labels[start:stop])


# ---------------------------------------------------------------- file io


def _header(schema):
    return ["id", "amount", "label", *schema.names]


def load_transactions(path, schema: FeatureSchema) -> Dataset:
    """Read a transactions CSV (``id,amount,label,<features>``)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"transactions file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(0, "missing header") from None
        if header != _header(schema):
            raise IngestionError(0, f"header does not match schema (expected {','.join(_header(schema))})")
        codes = [None if c is None else {v: k for k, v in enumerate(c)} for c in schema.categories]
        ids, X, amounts, labels, seen = [], [], [], [], set()
        for k, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise IngestionError(k, f"malformed row: expected {len(header)} fields, got {len(row)}")
            tid = row[0]
            if not tid:
                raise IngestionError(k, "empty id")
            if tid in seen:
                raise IngestionError(k, f"duplicate id {tid!r}")
            seen.add(tid)
            try:
                amount = float(row[1])
            except ValueError:
                raise IngestionError(k, f"malformed amount {row[1]!r}") from None
            if not amount > 0 or not math.isfinite(amount):
                raise IngestionError(k, "non-positive amount")
            if row[2] not in ("0", "1"):
                raise IngestionError(k, f"label must be 0 or 1, got {row[2]!r}")
            feats = []
            for j, raw in enumerate(row[3:]):
                if codes[j] is not None:
                    if raw not in codes[j]:
                        raise IngestionError(k, f"unknown category {raw!r} for feature {schema.names[j]!r}")
                    feats.append(float(codes[j][raw]))
                else:
                    try:
                        v = float(raw)
                    except ValueError:
                        raise IngestionError(k, f"malformed value {raw!r} for feature {schema.names[j]!r}") from None
                    if not math.isfinite(v):
                        raise IngestionError(k, f"non-finite value for feature {schema.names[j]!r}")
                    feats.append(v)
            ids.append(tid)
            amounts.append(amount)
            labels.append(int(row[2]))
            X.append(feats)
    X = np.asarray(X, dtype=np.float64).reshape(len(ids), schema.d)
    return Dataset(schema, ids, X, amounts, labels)


def dumps_transactions(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    schema = dataset.schema
    writer.writerow(_header(schema))
    for t in dataset:
        feats = [
            repr(float(v)) if schema.categories[j] is None else schema.categories[j][int(v)]
            for j, v in enumerate(t.features)
        ]
        writer.writerow([t.id, repr(t.amount), str(t.label), *feats])
    return buf.getvalue()


def write_transactions(dataset: Dataset, path):
    Path(path).write_text(dumps_transactions(dataset), encoding="utf-8")


# ------------------------------------------------------- synthetic generator


@dataclass(frozen=True)
class SignalSpec:
    """Planted fraud rule ``label = 1 iff sum(w_j * x_j) > threshold``.

    With ``threshold=None`` the cut is placed at the quantile that yields the
    configured fraud rate.  ``noise`` is the probability that a label is
    replaced by an independent Bernoulli(fraud_rate) draw, which keeps the
    marginal fraud rate unchanged.
    """

    features: tuple[int, ...] = (0, 1, 2, 3)
    weights: tuple[float, ...] | None = None
    threshold: float | None = None
    noise: float = 0.1


@dataclass(frozen=True)
class SyntheticConfig:
    d: int = 112
    n: int = 2000
    fraud_rate: float = 0.15
    signal: SignalSpec = field(default_factory=SignalSpec)
    amount_mu: float = 4.0
    amount_sigma: float = 1.0
    n_categorical: int = 0
    n_categories: int = 4
    seed: int = 0

    def validate(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if not 0 < self.fraud_rate < 1:
            raise ConfigError("fraud_rate must lie in (0, 1)")
        if self.amount_sigma <= 0:
            raise ConfigError("amount_sigma must be positive")
        if not 0 <= self.n_categorical < self.d:
            raise ConfigError("n_categorical must be in [0, d)")
        if self.n_categorical and self.n_categories < 2:
            raise ConfigError("categorical features need >= 2 categories")
        sig = self.signal
        feats = tuple(sig.features)
        if not feats:
            raise ConfigError("signal needs at least one feature")
        if len(set(feats)) != len(feats):
            raise ConfigError("signal features must be distinct")
        n_numeric = self.d - self.n_categorical
        if any(not 0 <= j < n_numeric for j in feats):
            raise ConfigError(f"signal features must be numeric feature indices in [0, {n_numeric})")
        if sig.weights is not None:
            if len(sig.weights) != len(feats):
                raise ConfigError("signal weights must match signal features")
            if not any(w != 0 for w in sig.weights):
                raise ConfigError("signal weights are all zero")
        if not 0 <= sig.noise <= 1:
            raise ConfigError("signal noise must lie in [0, 1]")

    def schema(self):
        n_numeric = self.d - self.n_categorical
        cats = [None] * n_numeric + [tuple(f"c{k}" for k in range(self.n_categories))] * self.n_categorical
        return FeatureSchema(tuple(f"f{j}" for j in range(self.d)), tuple(cats))


def planted_scores(cfg: SyntheticConfig, X):
    sig = cfg.signal
    w = np.ones(len(sig.features)) if sig.weights is None else np.asarray(sig.weights, dtype=float)
    return X[:, list(sig.features)] @ w, float(np.linalg.norm(w))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Planted-rule transactions; numeric features are iid standard normal."""
    cfg.validate()
    rng = rng_for(cfg.seed, "synthetic")
    n_numeric = cfg.d - cfg.n_categorical
    X = np.empty((cfg.n, cfg.d))
    X[:, :n_numeric] = rng.standard_normal((cfg.n, n_numeric))
    if cfg.n_categorical:
        X[:, n_numeric:] = rng.integers(0, cfg.n_categories, (cfg.n, cfg.n_categorical))
    score, scale = planted_scores(cfg, X)
    cut = cfg.signal.threshold
    if cut is None:
        cut = scale * stats.norm.ppf(1.0 - cfg.fraud_rate)
    rule = (score > cut).astype(np.int64)
    replaced = rng.random(cfg.n) < cfg.signal.noise
    coin = (rng.random(cfg.n) < cfg.fraud_rate).astype(np.int64)
    labels = np.where(replaced, coin, rule)
    amounts = rng.lognormal(cfg.amount_mu, cfg.amount_sigma, cfg.n)
    width = max(6, len(str(cfg.n - 1)))
    ids = [f"t{k:0{width}d}" for k in range(cfg.n)]
    return Dataset(cfg.schema(), ids, X, amounts, labels)


# ------------------------------------------------------------------- splits


@dataclass(frozen=True)
class ArmSplit:
    arm_name: str
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_ids) & set(self.validation_ids):
            raise DataError(f"arm {self.arm_name!r}: train and validation overlap")


def make_arm_splits(dataset: Dataset, arm_names: Sequence[str], seed, *,
                    validation_size=500, train_size=1000) -> list[ArmSplit]:
    """Per-arm train/validation splits.

    The dataset is cut, in file order, into one validation block of
    ``validation_size`` per arm.  Each arm's training set is a seeded uniform
    subsample (without replacement) of ``train_size`` transactions from
    everything outside its own validation block.
    """
    arm_names = list(arm_names)
    if not arm_names:
        raise ConfigError("at least one arm is required")
    if len(set(arm_names)) != len(arm_names):
        raise ConfigError("arm names must be unique")
    need = validation_size * len(arm_names)
    if len(dataset) < need or len(dataset) - validation_size < train_size:
        raise DataError(
            f"need at least {max(need, validation_size + train_size)} transactions for "
            f"{len(arm_names)} arms, got {len(dataset)}"
        )
    ids = dataset.ids
    splits = []
    for i, name in enumerate(arm_names):
        lo, hi = i * validation_size, (i + 1) * validation_size
        pool = np.concatenate([np.arange(0, lo), np.arange(hi, len(dataset))])
        rng = rng_for(seed, "split", name)
        chosen = np.sort(rng.choice(pool, size=train_size, replace=False))
        splits.append(ArmSplit(name, tuple(ids[chosen].tolist()), tuple(ids[lo:hi].tolist())))
    return splits


@dataclass(frozen=True)
class DistributionReport:
    statistics: dict
    max_statistic: float
    max_feature: str


def distribution_check(a: Iterable[str], b: Iterable[str], dataset: Dataset) -> DistributionReport:
    """Per-feature two-sample Kolmogorov-Smirnov statistic between two id sets."""
    pa, pb = dataset.positions(a), dataset.positions(b)
    if len(pa) == 0 or len(pb) == 0:
        raise DataError("both id sets must be non-empty")
    out = {}
    for j, name in enumerate(dataset.schema.names):
        out[name] = float(stats.ks_2samp(dataset.X[pa, j], dataset.X[pb, j]).statistic)
    worst = max(out, key=lambda k: (out[k], -dataset.schema.names.index(k)))
    return DistributionReport(out, out[worst], worst)


# ------------------------------------------------------------------ analyst


class AnalystLog(dict):
    """Mapping transaction id -> decision in {approved, declined, suspicious}."""

    def __setitem__(self, key, value):
        if value not in DECISIONS:
            raise DataError(f"invalid analyst decision {value!r}")
        super().__setitem__(key, value)

    def __init__(self, items=()):
        super().__init__()
        for k, v in dict(items).items():
            self[k] = v

    def decisions_for(self, ids):
        try:
            return [self[str(i)] for i in ids]
        except KeyError as exc:
            raise DataError(f"no analyst decision for transaction {exc.args[0]!r}") from None


def simulate_analyst(dataset: Dataset, error_rates=(0.1, 0.1), suspicious_rate=0.1, seed=0) -> AnalystLog:
    """Synthetic analyst decisions.

    ``error_rates`` is ``(fraud_error, legit_error)``: the probability of
    approving a fraud and of declining a legit transaction.  Every decline is
    independently turned into "suspicious" with ``suspicious_rate``.
    """
    fraud_err, legit_err = (float(e) for e in error_rates)
    for p in (fraud_err, legit_err, suspicious_rate):
        if not 0 <= p <= 1:
            raise ConfigError("analyst probabilities must lie in [0, 1]")
    rng = rng_for(seed, "analyst")
    flip_u = rng.random(len(dataset))
    susp_u = rng.random(len(dataset))
    fraud = dataset.labels == 1
    flip = np.where(fraud, flip_u < fraud_err, flip_u < legit_err)
    declined = fraud ^ flip
    suspicious = declined & (susp_u < suspicious_rate)
    log = AnalystLog()
    for tid, dec, sus in zip(dataset.ids.tolist(), declined, suspicious):
        log[tid] = "suspicious" if sus else ("declined" if dec else "approved")
    return log


def write_analyst_log(log: AnalystLog, path, order=None):
    order = list(log) if order is None else list(order)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "decision"])
    for tid in order:
        writer.writerow([tid, log[tid]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_analyst_log(path, dataset: Dataset | None = None) -> AnalystLog:
    log = AnalystLog()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "decision"]:
            raise IngestionError(0, "analyst log header must be 'id,decision'")
        for k, row in enumerate(reader, start=1):
            if len(row) != 2:
                raise IngestionError(k, "malformed row")
            tid, dec = row
            if tid in log:
                raise IngestionError(k, f"duplicate id {tid!r}")
            if dec not in DECISIONS:
                raise IngestionError(k, f"invalid decision {dec!r}")
            if dataset is not None and tid not in dataset._pos:
                raise IngestionError(k, f"unknown transaction id {tid!r}")
            log[tid] = dec
    return log
