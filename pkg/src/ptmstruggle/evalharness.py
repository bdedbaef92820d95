"""Evaluation protocol, metrics and significance testing."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InsufficientHistory, KeyMismatch, SingleClass, TooFewStudents

log = logging.getLogger(__name__)

N_CONTEXT = 30
N_TARGETS = 20


@dataclass(frozen=True)
class SplitPlan:
    folds: dict  # student_id -> fold index
    k: int
    seed: int

    def test_students(self, fold):
        return sorted(s for s, f in self.folds.items() if f == fold)

    def train_students(self, fold):
        return sorted(s for s, f in self.folds.items() if f != fold)


def make_splits(students, k: int = 5, seed: int = 0) -> SplitPlan:
    """Seeded shuffle followed by round-robin fold assignment."""
    ordered = sorted(students)
    if len(ordered) < k:
        raise TooFewStudents(f"{len(ordered)} students cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return SplitPlan({ordered[j]: i % k for i, j in enumerate(perm)}, k, seed)


@dataclass(frozen=True)
class ProtocolSlice:
    student_id: str
    context: tuple  # (TaskSpec, events) pairs
    targets: tuple


def apply_protocol(history, n_context: int = N_CONTEXT, n_targets: int = N_TARGETS) -> ProtocolSlice:
    if len(history) <= n_context:
        raise InsufficientHistory(f"student {history.student_id} has {len(history)} tasks; needs more than {n_context}")
    return ProtocolSlice(history.student_id, history.tasks[:n_context], history.tasks[n_context : n_context + n_targets])


@dataclass(frozen=True)
class PredictionRecord:
    student_id: str
    task_id: str
    predicted_prob: float
    true_label: int
    model_name: str
    fold: int


def _arrays(records_or_scores, labels=None):
    if labels is None:
        recs = list(records_or_scores)
        scores = np.array([r.predicted_prob for r in recs], dtype=float)
        labels = np.array([r.true_label for r in recs], dtype=int)
    else:
        scores = np.asarray(records_or_scores, dtype=float)
        labels = np.asarray(labels, dtype=int)
    return scores, labels


def roc_auc(records, labels=None) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie), via mid-ranks.

    Accepts PredictionRecords, or parallel score and label arrays.
    """
    scores, y = _arrays(records, labels)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def calibration_error(records, labels=None, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width probability bins."""
    probs, y = _arrays(records, labels)
    if probs.size == 0:
        raise ValueError("calibration error of an empty record set")
    bins = np.minimum((probs * n_bins).astype(int), n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            ece += sel.mean() * abs(y[sel].mean() - probs[sel].mean())
    return float(ece)


@dataclass(frozen=True)
class BootstrapResult:
    observed_delta: float
    deltas: np.ndarray
    p_value: float
    ci_low: float
    ci_high: float
    seed: int


_CHUNK = 256


class _WeightedAUC:
    """AUC of fixed scores under per-student multiplicity weights.

    Duplicating a student's records k times is the same as weighting them by
    k, so a resample only changes the weights.  Scores are grouped into tie
    classes once; each call is then a cumulative sum.
    """

    def __init__(self, scores, labels, owner):
        uniq, group = np.unique(scores, return_inverse=True)
        self.n_groups = uniq.size
        self.group = group
        self.pos = labels == 1
        self.owner = owner

    def __call__(self, counts):
        w = counts[:, self.owner]  # (R, N)
        wp = np.zeros((w.shape[0], self.n_groups))
        wn = np.zeros_like(wp)
        for r in range(w.shape[0]):
            wp[r] = np.bincount(self.group[self.pos], weights=w[r, self.pos], minlength=self.n_groups)
            wn[r] = np.bincount(self.group[~self.pos], weights=w[r, ~self.pos], minlength=self.n_groups)
        below = np.cumsum(wn, axis=1) - wn
        num = (wp * (below + 0.5 * wn)).sum(axis=1)
        den = wp.sum(axis=1) * wn.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, np.nan)


def paired_bootstrap(records_a, records_b, B: int = 10000, seed: int = 0) -> BootstrapResult:
    """Resample students with replacement; compare AUC(a) - AUC(b) per resample.

    p-value: twice the share of resampled deltas whose sign contradicts the
    observed delta (a zero delta counts as contradicting), capped at 1.
    Resamples that contain a single class are redrawn.
    """
    key = lambda r: (r.student_id, r.task_id)  # noqa: E731
    a_map = {key(r): r for r in records_a}
    b_map = {key(r): r for r in records_b}
    if a_map.keys() != b_map.keys():
        raise KeyMismatch("paired bootstrap needs identical (student, task) keys")
    for k, ra in a_map.items():
        if ra.true_label != b_map[k].true_label:
            raise KeyMismatch(f"labels disagree for {k}")

    keys = sorted(a_map)
    students = sorted({k[0] for k in keys})
    s_index = {s: i for i, s in enumerate(students)}
    owner = np.array([s_index[k[0]] for k in keys])
    pa = np.array([a_map[k].predicted_prob for k in keys])
    pb = np.array([b_map[k].predicted_prob for k in keys])
    y = np.array([a_map[k].true_label for k in keys])

    observed = roc_auc(pa, y) - roc_auc(pb, y)
    rng = np.random.default_rng(seed)
    auc_a = _WeightedAUC(pa, y, owner)
    auc_b = _WeightedAUC(pb, y, owner)
    deltas = np.empty(B)
    filled = 0
    while filled < B:
        n = min(_CHUNK, B - filled)
        picks = rng.integers(0, len(students), size=(n, len(students)))
        counts = np.stack([np.bincount(row, minlength=len(students)) for row in picks]).astype(float)
        d = auc_a(counts) - auc_b(counts)
        d = d[np.isfinite(d)][: B - filled]
        deltas[filled : filled + d.size] = d
        filled += d.size

    if observed > 0:
        contradict = np.count_nonzero(deltas <= 0)
    elif observed < 0:
        contradict = np.count_nonzero(deltas >= 0)
    else:
        contradict = B
    p = min(1.0, 2.0 * contradict / B)
    lo, hi = np.percentile(deltas, [2.5, 97.5])
    return BootstrapResult(float(observed), deltas, float(p), float(lo), float(hi), seed)


def bonferroni(p_values, alpha: float = 0.05) -> list:
    """True (reject) iff p < alpha / m."""
    p_values = list(p_values)
    if not p_values:
        return []
    if any(not 0.0 <= p <= 1.0 for p in p_values):
        raise ValueError("p-values must lie in [0, 1]")
    threshold = alpha / len(p_values)
    return [p < threshold for p in p_values]


def fold_auc_summary(records) -> dict:
    """Per-fold AUC on pooled fold records, then mean and sample std across folds."""
    by_fold = defaultdict(list)
    for r in records:
        by_fold[r.fold].append(r)
    per_fold = {f: roc_auc(rs) for f, rs in sorted(by_fold.items())}
    values = np.array(list(per_fold.values()))
    return {
        "per_fold": per_fold,
        "mean": float(values.mean()),
        "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
    }


def sensitivity_sweep(predict_fn, fold_samples: dict, lengths) -> list:
    """AUC as a function of how many of the most recent context tasks are kept.

    ``predict_fn(fold, samples) -> list of (M,) prob arrays`` runs inference
    with the model trained for ``fold``; ``fold_samples`` maps fold -> test
    samples.  The value at each length is the mean of per-fold AUCs, the same
    aggregation as :func:`fold_auc_summary`.
    """
    from .features import truncate_context

    curve = []
    for length in lengths:
        aucs = []
        for fold, samples in sorted(fold_samples.items()):
            cut = [truncate_context(s, length) for s in samples]
            probs = predict_fn(fold, cut)
            scores = np.concatenate(probs)
            labels = np.concatenate([s.labels for s in cut]).astype(int)
            aucs.append(roc_auc(scores, labels))
        curve.append((int(length), float(np.mean(aucs))))
    return curve


# ---------------------------------------------------------------------------
# File formats


def records_for(model_name, fold, samples, probs) -> list:
    out = []
    for s, p in zip(samples, probs):
        for tid, prob, lab in zip(s.target_task_ids, p, s.labels):
            out.append(PredictionRecord(s.student_id, tid, float(prob), int(lab), model_name, fold))
    return out


def write_predictions(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "student_id", "task_id", "prob", "label"])
        for r in records:
            w.writerow([r.model_name, r.fold, r.student_id, r.task_id, repr(r.predicted_prob), r.true_label])


def read_predictions(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            PredictionRecord(row["student_id"], row["task_id"], float(row["prob"]), int(row["label"]), row["model"], int(row["fold"]))
            for row in csv.DictReader(fh)
        ]


def write_sensitivity(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["length", "auc"])
        for length, auc in curve:
            w.writerow([length, repr(auc)])
