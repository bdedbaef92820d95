"""End-to-end wiring: labelled corpus -> samples -> cross-validated training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import evalharness as ev
from .baselines import build_model
from .corpus import build_histories
from .errors import InsufficientHistory, PTMError
from .features import TaskVocab, build_sample
from .labeling import canonicalize_tasks, label_corpus
from .ptm import TrainConfig, predict, train

log = logging.getLogger(__name__)


class LeakageError(PTMError):
    code = "EVAL_LEAKAGE"


@dataclass
class PreparedData:
    corpus: object
    labels: dict
    samples: dict  # student_id -> StudentSample
    excluded: dict  # student_id -> reason
    vocab: TaskVocab
    code_dim: int
    text_dim: int


def prepare(corpus, code_backend, text_backend, cache, n_context=ev.N_CONTEXT, n_targets=ev.N_TARGETS,
            max_attempts=100, normalization="per_skill_mean") -> PreparedData:
    corpus = canonicalize_tasks(corpus)
    labels = label_corpus(corpus)
    samples, excluded = {}, {}
    for sid, history in build_histories(corpus).items():
        try:
            ev.apply_protocol(history, n_context, n_targets)
        except InsufficientHistory as exc:
            log.info("excluding %s: %s", sid, exc)
            excluded[sid] = str(exc)
            continue
        samples[sid] = build_sample(history, labels, code_backend, text_backend, cache, n_context, n_targets,
                                    max_attempts, normalization)
    return PreparedData(corpus, labels, samples, excluded, TaskVocab(corpus.tasks), code_backend.dim, text_backend.dim)


@dataclass
class CVResult:
    plan: ev.SplitPlan
    records: dict  # model -> list[PredictionRecord]
    traces: dict  # (model, fold) -> list[EpochLoss]
    models: dict = field(default_factory=dict)  # (model, fold) -> trained module
    parameter_counts: dict = field(default_factory=dict)
    sensitivity: list = field(default_factory=list)


def run_cv(data: PreparedData, model_names, config: TrainConfig, k=5, split_seed=0, folds=None,
           sweep_lengths=None, sweep_model="ptm", checkpoint_dir=None, epoch_checkpoints=False) -> CVResult:
    """Train and evaluate every model on each per-student fold.

    ``folds`` restricts evaluation to a subset of fold indices (all by default).
    With ``checkpoint_dir`` set, the final weights of each (model, fold) are
    saved there, and every epoch too when ``epoch_checkpoints`` is true.
    """
    from pathlib import Path

    from .ptm import parameter_count, save_checkpoint

    plan = ev.make_splits(data.samples, k=k, seed=split_seed)
    folds = range(k) if folds is None else folds
    result = CVResult(plan, {m: [] for m in model_names}, {})
    fold_tests = {}
    for fold in folds:
        train_ids = plan.train_students(fold)
        test_ids = plan.test_students(fold)
        if set(train_ids) & set(test_ids):
            raise LeakageError(f"fold {fold}: test students present in training data")
        train_samples = [data.samples[s] for s in train_ids]
        test_samples = [data.samples[s] for s in test_ids]
        fold_tests[fold] = test_samples
        for name in model_names:
            model = build_model(name, config, data.code_dim, data.text_dim, len(data.vocab), students=train_ids)
            vocab = data.vocab if getattr(model, "uses_vocab", False) else None
            epoch_dir = Path(checkpoint_dir) / f"{name}_fold{fold}" if checkpoint_dir is not None and epoch_checkpoints else None
            trace = train(model, train_samples, config, vocab=vocab, checkpoint_dir=epoch_dir)
            result.traces[(name, fold)] = trace
            result.models[(name, fold)] = model
            result.parameter_counts[name] = parameter_count(model)
            probs = predict(model, test_samples, vocab, max_attempts=config.max_attempts_per_task)
            result.records[name].extend(ev.records_for(name, fold, test_samples, probs))
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"{name}_fold{fold}.npz", model, config, {"fold": fold})
            log.info("fold %d %s: final loss %.4f", fold, name, trace[-1].total if trace else float("nan"))

    if sweep_lengths and sweep_model in model_names:
        def predict_fn(fold, samples):
            model = result.models[(sweep_model, fold)]
            vocab = data.vocab if getattr(model, "uses_vocab", False) else None
            return predict(model, samples, vocab, max_attempts=config.max_attempts_per_task)

        result.sensitivity = ev.sensitivity_sweep(predict_fn, fold_tests, sweep_lengths)
    return result


def summarize(result: CVResult, reference="ptm", bootstrap_B=10000, seed=0, alpha=0.05) -> dict:
    """Per-model AUC mean/std across folds, ECE, and bootstrap tests of the reference model."""
    out = {"models": {}, "significance": {}}
    for name, recs in result.records.items():
        summary = ev.fold_auc_summary(recs)
        out["models"][name] = {
            "auc_mean": summary["mean"],
            "auc_std": summary["std"],
            "auc_per_fold": {str(f): v for f, v in summary["per_fold"].items()},
            "ece": ev.calibration_error(recs),
            "n_records": len(recs),
            "n_parameters": result.parameter_counts.get(name),
        }
    others = [m for m in result.records if m != reference]
    if reference in result.records and others:
        tests = {m: ev.paired_bootstrap(result.records[reference], result.records[m], B=bootstrap_B, seed=seed) for m in others}
        decisions = ev.bonferroni([t.p_value for t in tests.values()], alpha=alpha)
        for (m, t), reject in zip(tests.items(), decisions):
            out["significance"][f"{reference}_vs_{m}"] = {
                "observed_delta": t.observed_delta,
                "p_value": t.p_value,
                "ci95": [t.ci_low, t.ci_high],
                "bonferroni_reject": bool(reject),
            }
        out["bonferroni"] = {"alpha": alpha, "m": len(others), "threshold": alpha / len(others)}
    return out


def mean_fold_auc(records) -> float:
    return float(np.mean(list(ev.fold_auc_summary(records)["per_fold"].values())))
