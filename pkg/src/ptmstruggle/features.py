"""Per-student model inputs and padded batch tensors shared by every model."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from . import tbpp as tbpp_mod
from .encoders import embed_code, embed_task_text
from .errors import UnknownTaskId


@dataclass
class StudentSample:
    student_id: str
    context_task_ids: list
    codes: list  # one (T_k, D) float32 array per context task, most recent attempts
    struggle: np.ndarray  # (K,) 0/1 labels of the context tasks
    scores: np.ndarray  # (K,) final scores of the context tasks
    context_req: np.ndarray  # (K, 13)
    target_task_ids: list
    target_req: np.ndarray  # (M, 13)
    target_text: np.ndarray  # (M, Dt)
    labels: np.ndarray  # (M,) 0/1
    tbpp_target: np.ndarray  # (13,)

    @property
    def n_context(self):
        return len(self.context_task_ids)


class TaskVocab:
    """Task id <-> 1-based index (0 is padding) for the ID-based baselines."""

    def __init__(self, task_ids):
        self.ids = sorted(task_ids)
        self.index = {tid: i + 1 for i, tid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, task_id):
        try:
            return self.index[task_id]
        except KeyError:
            raise UnknownTaskId(f"task {task_id!r} not in vocabulary") from None


def build_sample(history, labels, code_backend, text_backend, cache, n_context=30, n_targets=20,
                 max_attempts=100, normalization="per_skill_mean") -> StudentSample:
    """Split one StudentHistory into context and target tasks and embed it.

    ``labels`` maps (student_id, task_id) to LabeledPair.  Callers decide
    beforehand whether the history is long enough for the protocol.
    """
    context = history.tasks[:n_context]
    targets = history.tasks[n_context : n_context + n_targets]
    sid = history.student_id

    codes, struggle, scores, reqs = [], [], [], []
    for spec, events in context:
        recent = events[-max_attempts:]
        codes.append(np.stack([embed_code(e.source_code, code_backend, cache) for e in recent]))
        lab = labels[(sid, spec.task_id)]
        struggle.append(float(lab.label.value))
        scores.append(lab.outcome.final_score)
        reqs.append(tbpp_mod.requirement_vector(spec))
    target_req = [tbpp_mod.requirement_vector(spec) for spec, _ in targets]
    target_text = [embed_task_text(spec.prompt_text, text_backend, cache) for spec, _ in targets]
    target_labels = [float(labels[(sid, spec.task_id)].label.value) for spec, _ in targets]
    target_profile = tbpp_mod.estimate_tbpp(zip(reqs, scores), normalization=normalization)

    return StudentSample(
        student_id=sid,
        context_task_ids=[spec.task_id for spec, _ in context],
        codes=codes,
        struggle=np.asarray(struggle, dtype=np.float32),
        scores=np.asarray(scores, dtype=np.float32),
        context_req=np.asarray(reqs, dtype=np.float32).reshape(-1, tbpp_mod.N_SKILLS),
        target_task_ids=[spec.task_id for spec, _ in targets],
        target_req=np.asarray(target_req, dtype=np.float32).reshape(-1, tbpp_mod.N_SKILLS),
        target_text=np.asarray(target_text, dtype=np.float32).reshape(len(targets), text_backend.dim),
        labels=np.asarray(target_labels, dtype=np.float32),
        tbpp_target=target_profile.astype(np.float32),
    )


def truncate_context(sample: StudentSample, length: int) -> StudentSample:
    """Keep only the most recent ``length`` context tasks (targets untouched)."""
    if length < 1:
        raise ValueError("context length must be >= 1")
    keep = slice(max(0, sample.n_context - length), None)
    return replace(
        sample,
        context_task_ids=sample.context_task_ids[keep],
        codes=sample.codes[keep],
        struggle=sample.struggle[keep],
        scores=sample.scores[keep],
        context_req=sample.context_req[keep],
    )


@dataclass
class Batch:
    student_ids: list
    codes: torch.Tensor  # (B, K, T, D) padded
    attempt_len: torch.Tensor  # (B, K) long, 0 for padded tasks
    n_tasks: torch.Tensor  # (B,) long
    struggle: torch.Tensor  # (B, K)
    context_idx: torch.Tensor  # (B, K) long task indices, 0 = pad
    target_idx: torch.Tensor  # (B, M) long
    target_req: torch.Tensor  # (B, M, 13)
    target_text: torch.Tensor  # (B, M, Dt)
    labels: torch.Tensor  # (B, M)
    target_mask: torch.Tensor  # (B, M) bool
    tbpp_target: torch.Tensor  # (B, 13)

    def to(self, dtype):
        conv = {f: getattr(self, f).to(dtype) for f in ("codes", "struggle", "target_req", "target_text", "labels", "tbpp_target")}
        return replace(self, **conv)


def collate(samples, vocab: TaskVocab | None = None, max_attempts: int = 100) -> Batch:
    B = len(samples)
    K = max(s.n_context for s in samples)
    T = min(max_attempts, max(c.shape[0] for s in samples for c in s.codes))
    D = samples[0].codes[0].shape[1]
    M = max(1, max(len(s.target_task_ids) for s in samples))
    Dt = samples[0].target_text.shape[1] if samples[0].target_text.size else 1

    codes = np.zeros((B, K, T, D), dtype=np.float32)
    attempt_len = np.zeros((B, K), dtype=np.int64)
    struggle = np.zeros((B, K), dtype=np.float32)
    context_idx = np.zeros((B, K), dtype=np.int64)
    target_idx = np.zeros((B, M), dtype=np.int64)
    target_req = np.zeros((B, M, tbpp_mod.N_SKILLS), dtype=np.float32)
    target_text = np.zeros((B, M, Dt), dtype=np.float32)
    labels = np.zeros((B, M), dtype=np.float32)
    mask = np.zeros((B, M), dtype=bool)
    profile = np.zeros((B, tbpp_mod.N_SKILLS), dtype=np.float32)

    for b, s in enumerate(samples):
        for k, c in enumerate(s.codes):
            c = c[-T:]
            codes[b, k, : len(c)] = c
            attempt_len[b, k] = len(c)
        struggle[b, : s.n_context] = s.struggle
        m = len(s.target_task_ids)
        target_req[b, :m] = s.target_req
        target_text[b, :m] = s.target_text
        labels[b, :m] = s.labels
        mask[b, :m] = True
        profile[b] = s.tbpp_target
        if vocab is not None:
            context_idx[b, : s.n_context] = [vocab[t] for t in s.context_task_ids]
            target_idx[b, :m] = [vocab[t] for t in s.target_task_ids]

    return Batch(
        student_ids=[s.student_id for s in samples],
        codes=torch.from_numpy(codes),
        attempt_len=torch.from_numpy(attempt_len),
        n_tasks=torch.tensor([s.n_context for s in samples], dtype=torch.long),
        struggle=torch.from_numpy(struggle),
        context_idx=torch.from_numpy(context_idx),
        target_idx=torch.from_numpy(target_idx),
        target_req=torch.from_numpy(target_req),
        target_text=torch.from_numpy(target_text),
        labels=torch.from_numpy(labels),
        target_mask=torch.from_numpy(mask),
        tbpp_target=torch.from_numpy(profile),
    )
