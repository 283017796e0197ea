"""Evaluation metrics: percent dollar regret, pivotal bootstrap intervals,
ROC AUC against analyst decisions, decision confusion tables, analyst feature
alignment and explanation repetitiveness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DECISIONS, AnalystLog
from .errors import ConfigError, DataError, IngestionError, MetricError

CONCEPT_CLASSES = ("fraudulent", "legitimate")


# ---------------------------------------------------------------------- PDR


@dataclass(frozen=True)
class PDRParams:
    """Revenue model: approving a fraud costs ``chargeback_multiplier`` x its amount."""

    chargeback_multiplier: float = 1.0

    def __post_init__(self):
        if self.chargeback_multiplier < 0:
            raise ConfigError("chargeback_multiplier must be >= 0")


def pdr(decline, labels, amounts, params: PDRParams = PDRParams()) -> float:
    """Percent dollar regret, ``1 - realized / possible``.

    realized = approved legit amounts - multiplier * approved fraud amounts;
    possible = all legit amounts.  ``decline`` is a boolean array (True means
    the transaction is declined).
    """
    decline = np.asarray(decline, dtype=bool)
    labels = np.asarray(labels)
    amounts = np.asarray(amounts, dtype=np.float64)
    if not (decline.shape == labels.shape == amounts.shape):
        raise DataError("decisions, labels and amounts must be aligned")
    legit = labels == 0
    possible = amounts[legit].sum()
    if not possible > 0:
        raise MetricError("PDR undefined: possible revenue is zero (no legit transactions)")
    approved = ~decline
    realized = amounts[approved & legit].sum() - params.chargeback_multiplier * amounts[approved & ~legit].sum()
    return float((possible - realized) / possible)


def select_threshold(probs, labels, amounts, params: PDRParams = PDRParams()) -> float:
    """Decision cut minimizing PDR of ``decline = prob > cut``.

    Candidates are 0, 1 and the midpoints between consecutive distinct
    probabilities; ties go to the lowest cut.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    amounts = np.asarray(amounts, dtype=np.float64)
    uniq = np.unique(probs)
    cands = np.unique(np.concatenate([[0.0, 1.0], 0.5 * (uniq[:-1] + uniq[1:])]))
    order = np.argsort(probs, kind="stable")
    sp = probs[order]
    legit_amt = np.where(labels[order] == 0, amounts[order], 0.0)
    fraud_amt = np.where(labels[order] == 1, amounts[order], 0.0)
    possible = legit_amt.sum()
    if not possible > 0:
        raise MetricError("PDR undefined: possible revenue is zero (no legit transactions)")
    cum_legit = np.concatenate([[0.0], np.cumsum(legit_amt)])
    cum_fraud = np.concatenate([[0.0], np.cumsum(fraud_amt)])
    n_approved = np.searchsorted(sp, cands, side="right")
    realized = cum_legit[n_approved] - params.chargeback_multiplier * cum_fraud[n_approved]
    regret = (possible - realized) / possible
    return float(cands[int(np.argmin(regret))])


# ---------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class CI:
    lo: float
    hi: float
    alpha: float
    B: int
    estimate: float = float("nan")

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.lo > self.hi:
            raise MetricError("confidence interval bounds out of order")

    @property
    def level(self):
        return round(100 * (1 - self.alpha), 6)

    @property
    def label(self):
        return f"{self.level:g}% CI"

    def overlaps(self, other: "CI"):
        return self.lo <= other.hi and other.lo <= self.hi

    def as_record(self):
        return {"estimate": self.estimate, "lo": self.lo, "hi": self.hi, "alpha": self.alpha, "B": self.B}

    @classmethod
    def from_record(cls, rec):
        return cls(rec["lo"], rec["hi"], rec["alpha"], rec["B"], rec["estimate"])


def format_estimate(ci: CI, digits=3, clamp_zero=False):
    """``0.071 (0.054, 0.087)``; ``clamp_zero`` floors displayed bounds at 0."""
    lo, hi = ci.lo, ci.hi
    if clamp_zero:
        lo, hi = max(lo, 0.0), max(hi, 0.0)
    return f"{ci.estimate:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f})"


def bootstrap_indices(n, B, seed):
    """Resample index matrix; row b is replicate b of a single seeded stream."""
    return np.random.default_rng(seed).integers(0, n, size=(B, n))


def bootstrap_pivotal_ci(statistic: Callable[[np.ndarray], float], ids, B=2000, alpha=0.10, seed=0) -> CI:
    """Pivotal (basic) bootstrap interval ``(2t - q_hi, 2t - q_lo)``.

    ``statistic`` receives an array of ids (a resample with replacement of
    ``ids``).  Quantiles of the replicate distribution use linear
    interpolation.
    """
    ids = np.asarray(ids)
    if len(ids) == 0:
        raise MetricError("bootstrap needs a non-empty sample")
    if B < 100:
        raise ConfigError("B must be >= 100")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    theta = float(statistic(ids))
    idx = bootstrap_indices(len(ids), B, seed)
    reps = np.empty(B)
    for b in range(B):
        try:
            reps[b] = statistic(ids[idx[b]])
        except Exception as exc:
            raise MetricError(f"statistic failed on bootstrap replicate {b}: {exc}") from exc
    q_lo, q_hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2], method="linear")
    lo, hi = 2 * theta - q_hi, 2 * theta - q_lo
    # guard against rounding when the replicate distribution is degenerate
    if lo > hi:
        lo = hi = theta
    return CI(float(lo), float(hi), alpha, B, theta)


def pdr_with_ci(decline, labels, amounts, params=PDRParams(), B=2000, alpha=0.10, seed=0) -> CI:
    decline = np.asarray(decline, dtype=bool)
    labels = np.asarray(labels)
    amounts = np.asarray(amounts, dtype=np.float64)
    return bootstrap_pivotal_ci(lambda i: pdr(decline[i], labels[i], amounts[i], params),
                                np.arange(len(labels)), B, alpha, seed)


# ------------------------------------------------------------------ ROC AUC


def mann_whitney_u(scores, targets):
    """U = #(pos > neg) + 0.5 #(ties) over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    pos, neg = scores[targets], np.sort(scores[~targets])
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("ROC AUC undefined: targets contain a single class")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    return float(below.sum() + 0.5 * (upto - below).sum()), len(pos) * len(neg)


def roc_auc(scores, targets) -> float:
    u, pairs = mann_whitney_u(scores, targets)
    return u / pairs


def analyst_fraud_flags(decisions: Sequence[str]):
    """Binarize analyst decisions: declined or suspicious counts as predicted fraud."""
    return np.array([d in ("declined", "suspicious") for d in decisions], dtype=bool)


def analyst_association(ids, proxy_scores, model_scores, analyst_log: AnalystLog):
    """ROC AUC of SimEval output and of the model score for predicting the analyst."""
    flags = analyst_fraud_flags(analyst_log.decisions_for(ids))
    return {"simeval": roc_auc(proxy_scores, flags), "original_model": roc_auc(model_scores, flags)}


# -------------------------------------------------------- confusion tables


@dataclass(frozen=True)
class ConfusionTable:
    """Cells keyed by (proxy declines?, analyst decision) -> (fraud fraction | None, N)."""

    cells: Mapping[tuple[bool, str], tuple[float | None, int]]

    @property
    def total(self):
        return sum(n for _, n in self.cells.values())

    def as_records(self):
        return [{"proxy_declines": p, "analyst": a, "fraud_fraction": self.cells[(p, a)][0],
                 "n": self.cells[(p, a)][1]} for p in (False, True) for a in DECISIONS]

    def render(self):
        lines = ["SimEval \\ analyst  " + "  ".join(f"{a:>14}" for a in DECISIONS)]
        for p in (False, True):
            cells = []
            for a in DECISIONS:
                frac, n = self.cells[(p, a)]
                cells.append(f"{'n/a' if frac is None else f'{frac:.4f}'}, N={n:03d}".rjust(14))
            lines.append(f"{str(p):<18} " + "  ".join(cells))
        return "\n".join(lines)


def confusion_by_decision(ids, proxy_decline, analyst_log: AnalystLog, labels) -> ConfusionTable:
    decisions = analyst_log.decisions_for(ids)
    proxy_decline = np.asarray(proxy_decline, dtype=bool)
    labels = np.asarray(labels)
    if not len(decisions) == len(proxy_decline) == len(labels):
        raise DataError("ids, decisions and labels must be aligned")
    dec = np.asarray(decisions, dtype=object)
    cells = {}
    for p in (False, True):
        for a in DECISIONS:
            sel = (proxy_decline == p) & (dec == a)
            n = int(sel.sum())
            cells[(p, a)] = (float(labels[sel].mean()) if n else None, n)
    return ConfusionTable(cells)


# --------------------------------------------------------- feature alignment


@dataclass
class AnalystScoreSheet:
    """One analyst's 0-4 importance of each feature under each transaction reason."""

    analyst_id: str
    scores: dict[tuple[int, str], int] = field(default_factory=dict)
    concept_class: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key, s in self.scores.items():
            if int(s) != s or not 0 <= s <= 4:
                raise DataError(f"analyst {self.analyst_id}: score {s!r} for {key} outside 0..4")
        for r, c in self.concept_class.items():
            if c not in CONCEPT_CLASSES:
                raise DataError(f"reason {r!r}: concept class must be one of {CONCEPT_CLASSES}")
        missing = {r for _, r in self.scores} - set(self.concept_class)
        if missing:
            raise DataError(f"analyst {self.analyst_id}: unclassified reasons {sorted(missing)}")

    def score(self, feature, reason):
        return self.scores.get((int(feature), reason), 0)


@dataclass(frozen=True)
class AlignmentResult:
    value: float
    ci: CI
    n_transactions: int
    per_transaction: dict


def _reason_classes(sheets):
    classes = {}
    for sheet in sheets:
        for r, c in sheet.concept_class.items():
            if classes.setdefault(r, c) != c:
                raise DataError(f"reason {r!r} classified inconsistently across sheets")
    return classes


def transaction_alignment(explanation_values, reasons, sheets, mode="per_feature"):
    """Inner average of the alignment formula for one transaction."""
    feats = np.flatnonzero(explanation_values)
    if len(feats) == 0:
        raise MetricError("explanation has no nonzero features")
    total = 0.0
    for sheet in sheets:
        if mode == "per_feature":
            total += sum(max(sheet.score(j, r) for r in reasons) for j in feats)
        elif mode == "per_transaction":
            total += max(sum(sheet.score(j, r) for j in feats) for r in reasons)
        else:
            raise ConfigError(f"unknown alignment mode {mode!r}")
    return total / (len(feats) * len(sheets))


def avg_feature_alignment(explanations: Mapping[str, object], sheets: Sequence[AnalystScoreSheet],
                          reasons: Mapping[str, set], concept_class=None, *, mode="per_feature",
                          B=2000, alpha=0.10, seed=0) -> AlignmentResult:
    """Average analyst importance of the features an explainer selects.

    For each transaction whose labeled reasons include one of the requested
    concept class, every nonzero explanation feature is scored with the
    best-scoring reason (``mode="per_feature"``) or all features share the
    reason with the highest total (``mode="per_transaction"``); scores are
    averaged over features and analysts, then over transactions.  Features
    are divided by the actual nonzero count, not K.
    """
    if not sheets:
        raise MetricError("at least one analyst score sheet is required")
    classes = _reason_classes(sheets)
    per_tx = {}
    for tid in sorted(explanations):
        if tid not in reasons:
            continue
        rs = sorted(r for r in reasons[tid] if concept_class is None or classes.get(r) == concept_class)
        if not rs:
            continue
        e = explanations[tid]
        vals = e.values if hasattr(e, "values") else np.asarray(e)
        per_tx[tid] = transaction_alignment(vals, rs, sheets, mode)
    if not per_tx:
        raise MetricError(f"no transaction has a reason in concept class {concept_class!r}")
    ids = np.array(list(per_tx), dtype=object)
    vals = np.array([per_tx[t] for t in ids])
    pos = np.arange(len(ids))
    ci = bootstrap_pivotal_ci(lambda i: vals[i].mean(), pos, B, alpha, seed)
    return AlignmentResult(float(vals.mean()), ci, len(ids), per_tx)


def load_score_sheets(path) -> list[AnalystScoreSheet]:
    """``analyst_id,feature_index,reason_id,concept_class,score`` rows."""
    sheets: dict[str, AnalystScoreSheet] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["analyst_id", "feature_index", "reason_id", "concept_class", "score"]:
            raise IngestionError(0, "score sheet header must be 'analyst_id,feature_index,reason_id,concept_class,score'")
        raw: dict[str, tuple[dict, dict]] = {}
        for k, row in enumerate(reader, start=1):
            if len(row) != 5:
                raise IngestionError(k, "malformed row")
            aid, feat, reason, cls, score = row
            try:
                feat, score = int(feat), int(score)
            except ValueError:
                raise IngestionError(k, "feature_index and score must be integers") from None
            if not 0 <= score <= 4:
                raise IngestionError(k, f"score {score} outside 0..4")
            if cls not in CONCEPT_CLASSES:
                raise IngestionError(k, f"unknown concept class {cls!r}")
            scores, concepts = raw.setdefault(aid, ({}, {}))
            if (feat, reason) in scores:
                raise IngestionError(k, f"duplicate score for analyst {aid!r}, feature {feat}, reason {reason!r}")
            if concepts.setdefault(reason, cls) != cls:
                raise IngestionError(k, f"reason {reason!r} classified inconsistently")
            scores[(feat, reason)] = score
    for aid, (scores, concepts) in raw.items():
        sheets[aid] = AnalystScoreSheet(aid, scores, concepts)
    return [sheets[a] for a in sorted(sheets)]


def load_reasons(path) -> dict[str, set]:
    """``transaction_id,reason_id`` rows; a transaction may repeat."""
    out: dict[str, set] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["transaction_id", "reason_id"]:
            raise IngestionError(0, "reasons header must be 'transaction_id,reason_id'")
        for k, row in enumerate(reader, start=1):
            if len(row) != 2 or not row[0] or not row[1]:
                raise IngestionError(k, "malformed row")
            out.setdefault(row[0], set()).add(row[1])
    return out


def check_reasons(reasons, sheets):
    known = set(_reason_classes(sheets))
    for tid in sorted(reasons):
        unknown = sorted(reasons[tid] - known)
        if unknown:
            raise DataError(f"transaction {tid!r} has reason {unknown[0]!r} unknown to the score sheets")


# ------------------------------------------------------------ repetitiveness


@dataclass(frozen=True)
class RepetitivenessStats:
    proportions: np.ndarray
    variance: float
    unique_feature_count: int


def repetitiveness_stats(explanations, d) -> RepetitivenessStats:
    """Share of explanations using each feature; its population variance and support size."""
    rows = [e.values if hasattr(e, "values") else np.asarray(e) for e in explanations]
    if not rows:
        raise MetricError("no explanations given")
    nz = np.array([np.asarray(r).reshape(-1)[:d] != 0 for r in rows])
    if nz.shape[1] != d:
        raise DataError(f"explanations must have length d = {d}")
    p = nz.mean(axis=0)
    return RepetitivenessStats(p, float(np.var(p)), int(np.count_nonzero(p)))
