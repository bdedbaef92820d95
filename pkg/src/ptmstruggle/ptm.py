"""Proficiency Taxonomy Model: architecture, combined loss, training loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import DivergenceDetected, EmptyHistory, EmptySequence, InvalidConfig
from .features import collate
from .tbpp import N_LATENT, N_OBSERVED, N_SKILLS, check_requirement_vector

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    hidden_size: int = 512
    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 32
    alpha: float = 0.5
    max_attempts_per_task: int = 100
    seed: int = 0
    attn_dim: int = 64
    student_dim: int = 16
    student_dropout: float = 0.1

    def __post_init__(self):
        for name in ("hidden_size", "batch_size", "max_attempts_per_task", "attn_dim", "student_dim"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise InvalidConfig("epochs must be >= 0 and learning_rate > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must lie in [0,1], got {self.alpha}")
        if not 0.0 <= self.student_dropout < 1.0:
            raise InvalidConfig("student_dropout must lie in [0,1)")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Loss


@dataclass(frozen=True)
class LossBreakdown:
    mae_term: float
    bce_term: float
    alpha: float
    total: float


def loss_terms(tbpp_pred, tbpp_target, struggle_prob, label, alpha, mask=None):
    """Differentiable (mae, bce, total); ``mask`` selects valid struggle entries."""
    mae = (tbpp_pred - tbpp_target).abs().mean()
    p = struggle_prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    bce = -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p))
    bce = bce[mask].mean() if mask is not None else bce.mean()
    return mae, bce, alpha * mae + (1.0 - alpha) * bce


def combined_loss(tbpp_pred, tbpp_target, struggle_prob, label, alpha: float = 0.5) -> LossBreakdown:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0,1], got {alpha}")
    as_t = lambda x: torch.as_tensor(x, dtype=torch.float64)  # noqa: E731
    mae, bce, _ = loss_terms(as_t(tbpp_pred), as_t(tbpp_target), as_t(struggle_prob), as_t(label), alpha)
    mae, bce = float(mae), float(bce)
    return LossBreakdown(mae, bce, alpha, alpha * mae + (1.0 - alpha) * bce)


# ---------------------------------------------------------------------------
# Shared encoders


def _last_attempts(codes, lengths, keep):
    """Right-align each padded sequence to its last ``keep`` valid steps."""
    T = codes.shape[1]
    if T <= keep and bool((lengths <= keep).all()):
        return codes, lengths
    new_len = lengths.clamp(max=keep)
    start = lengths - new_len
    steps = torch.arange(min(T, keep), device=codes.device)
    idx = (start.unsqueeze(1) + steps.unsqueeze(0)).clamp(max=T - 1)
    out = torch.gather(codes, 1, idx.unsqueeze(-1).expand(-1, -1, codes.shape[-1]))
    return out, new_len


class SubmissionEncoder(nn.Module):
    """LSTM over one task's attempt embeddings; final state + struggle bit -> Z."""

    def __init__(self, code_dim, hidden, max_attempts=100, last_only=False):
        super().__init__()
        self.max_attempts = max_attempts
        self.last_only = last_only
        self.lstm = nn.LSTM(code_dim, hidden, batch_first=True)
        self.proj = nn.Linear(hidden + 1, hidden)

    def forward(self, codes, attempt_len, struggle):
        """codes (B, K, T, D) -> Z (B, K, H); padded tasks get zeros."""
        B, K = attempt_len.shape
        valid = attempt_len > 0
        seqs = codes[valid]
        lens = attempt_len[valid]
        if self.last_only:
            seqs = seqs[torch.arange(seqs.shape[0]), lens - 1].unsqueeze(1)
            lens = torch.ones_like(lens)
        else:
            seqs, lens = _last_attempts(seqs, lens, self.max_attempts)
        packed = pack_padded_sequence(seqs, lens.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        z = self.proj(torch.cat([h[-1], struggle[valid].unsqueeze(-1)], dim=-1))
        Z = z.new_zeros(B, K, z.shape[-1])
        Z[valid] = z
        return Z


class HistoryEncoder(nn.Module):
    def __init__(self, hidden):
        super().__init__()
        self.lstm = nn.LSTM(hidden, hidden, batch_first=True)

    def forward(self, Z, n_tasks):
        if bool((n_tasks < 1).any()):
            raise EmptyHistory("every student needs at least one context task")
        packed = pack_padded_sequence(Z, n_tasks.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        return h[-1]


# ---------------------------------------------------------------------------
# PTM


class PTM(nn.Module):
    kind = "ptm"
    multitask = True

    def __init__(self, code_dim, text_dim, students=(), hidden=512, attn_dim=64, student_dim=16,
                 max_attempts=100, student_dropout=0.1):
        super().__init__()
        self.init_kwargs = dict(code_dim=code_dim, text_dim=text_dim, students=list(students), hidden=hidden,
                                attn_dim=attn_dim, student_dim=student_dim, max_attempts=max_attempts,
                                student_dropout=student_dropout)
        self.student_index = {sid: i + 1 for i, sid in enumerate(sorted(students))}
        self.student_dropout = student_dropout

        self.submissions = SubmissionEncoder(code_dim, hidden, max_attempts)
        self.history = HistoryEncoder(hidden)
        self.observed = nn.Linear(hidden, N_OBSERVED)
        # row 0 is the shared embedding for students unseen in training
        self.student_emb = nn.Embedding(len(self.student_index) + 1, student_dim)
        self.latent = nn.Linear(N_OBSERVED + student_dim, N_LATENT)

        self.skill_tokens = nn.Parameter(torch.randn(N_SKILLS, attn_dim) / math.sqrt(attn_dim))
        self.query = nn.Linear(attn_dim, attn_dim)
        self.key = nn.Linear(attn_dim, attn_dim)
        self.values = nn.Parameter(torch.randn(N_SKILLS, text_dim, attn_dim) / math.sqrt(text_dim))
        self.value_bias = nn.Parameter(torch.zeros(N_SKILLS, attn_dim))
        self.skill_weight = nn.Sequential(nn.Linear(N_SKILLS, hidden), nn.ReLU(), nn.Linear(hidden, N_SKILLS), nn.Softplus())
        self.head = nn.Sequential(nn.Linear(attn_dim + N_SKILLS, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def student_refs(self, student_ids):
        idx = torch.tensor([self.student_index.get(s, 0) for s in student_ids], dtype=torch.long)
        if self.training and self.student_dropout > 0:
            drop = torch.rand(idx.shape) < self.student_dropout
            idx = idx.masked_fill(drop, 0)
        return idx

    def encode_task_submissions(self, code_embeddings, struggle_indicator):
        """Z for a single task from its ordered (T, D) attempt embeddings."""
        emb = torch.as_tensor(np.asarray(code_embeddings), dtype=self.observed.weight.dtype)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise EmptySequence("a task needs at least one attempt embedding")
        emb = emb[-self.submissions.max_attempts :]
        Z = self.submissions(
            emb[None, None],
            torch.tensor([[emb.shape[0]]]),
            torch.tensor([[float(struggle_indicator)]], dtype=emb.dtype),
        )
        return Z[0, 0]

    def compute_tbpp_head(self, Z, n_tasks, student_ref):
        """Z (B, K, H) -> profile (B, 13): 10 observed scores then 3 latent."""
        summary = self.history(Z, n_tasks)
        observed = torch.sigmoid(self.observed(summary))
        latent = torch.sigmoid(self.latent(torch.cat([observed, self.student_emb(student_ref)], dim=-1)))
        return torch.cat([observed, latent], dim=-1)

    def predict_struggle(self, tbpp, task_text, req):
        """tbpp (B, 13), task_text (B, M, Dt), req (B, M, 13) -> logits (B, M)."""
        tokens = tbpp.unsqueeze(-1) * self.skill_tokens  # (B, 13, E)
        q, k = self.query(tokens), self.key(tokens)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)  # (B, 13, 13)
        v = torch.einsum("bmd,sde->bmse", task_text, self.values) + self.value_bias  # (B, M, 13, E)
        attended = torch.einsum("bst,bmte->bmse", attn, v).mean(dim=2)  # (B, M, E)
        weighted = self.skill_weight(req) * tbpp.unsqueeze(1)  # (B, M, 13)
        return self.head(torch.cat([attended, weighted], dim=-1)).squeeze(-1)

    def forward(self, batch):
        Z = self.submissions(batch.codes, batch.attempt_len, batch.struggle)
        profile = self.compute_tbpp_head(Z, batch.n_tasks, self.student_refs(batch.student_ids))
        logits = self.predict_struggle(profile, batch.target_text, batch.target_req)
        return {"tbpp": profile, "logit": logits, "prob": torch.sigmoid(logits)}


def predict_struggle(model: PTM, tbpp, task_text_emb, req) -> float:
    """Probability for one (profile, task text, requirement vector) triple."""
    req = check_requirement_vector(np.asarray(req))
    dtype = model.observed.weight.dtype
    t = torch.as_tensor(np.asarray(tbpp), dtype=dtype).reshape(1, N_SKILLS)
    text = torch.as_tensor(np.asarray(task_text_emb), dtype=dtype).reshape(1, 1, -1)
    r = torch.as_tensor(req, dtype=dtype).reshape(1, 1, N_SKILLS)
    with torch.no_grad():
        return float(torch.sigmoid(model.predict_struggle(t, text, r))[0, 0])


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    mae: float
    bce: float
    total: float


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(model, samples, config: TrainConfig, vocab=None, checkpoint_dir=None):
    """Adam over mini-batches of students; returns the per-epoch loss trace.

    Multi-task models (``model.multitask``) minimise the combined loss;
    the others use the struggle BCE alone.  The shuffling stream and any
    stochastic layers are seeded from ``config.seed``.
    """
    trace = []
    if config.epochs == 0 or not samples:
        return trace
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    alpha = config.alpha if getattr(model, "multitask", False) else 0.0
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(samples), config.batch_size, rng):
            batch = collate([samples[i] for i in idx], vocab, config.max_attempts_per_task)
            out = model(batch)
            tbpp_pred = out.get("tbpp", batch.tbpp_target)
            mae, bce, total = loss_terms(tbpp_pred, batch.tbpp_target, out["prob"], batch.labels, alpha, batch.target_mask)
            if not torch.isfinite(total):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += len(idx) * np.array([mae.item(), bce.item(), total.item()])
            count += len(idx)
        mean = sums / count
        trace.append(EpochLoss(epoch, *map(float, mean)))
        log.debug("epoch %d: mae=%.4f bce=%.4f total=%.4f", epoch, *mean)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"{model.kind}_epoch{epoch:03d}.npz", model, config)
    return trace


@torch.no_grad()
def predict(model, samples, vocab=None, batch_size=64, max_attempts=100):
    """Struggle probabilities per sample, as a list of (M,) float arrays."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        batch = collate(chunk, vocab, max_attempts)
        probs = model(batch)["prob"].double().numpy()
        for b, s in enumerate(chunk):
            out.append(probs[b, : len(s.target_task_ids)])
    return out


def write_loss_trace(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mae", "bce", "total"])
        for row in trace:
            w.writerow([row.epoch, repr(row.mae), repr(row.bce), repr(row.total)])


# ---------------------------------------------------------------------------
# Checkpoints: an .npz container of little-endian float32 tensors plus a
# JSON header under "__meta__" (model kind, constructor arguments, config, seed).


def save_checkpoint(path, model, config: TrainConfig, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": model.kind,
        "init_kwargs": model.init_kwargs,
        "config": asdict(config),
        "seed": config.seed,
        "extra": extra or {},
    }
    arrays = {f"param/{name}": t.detach().cpu().numpy().astype("<f4") for name, t in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns ``(model, config, meta)``."""
    from .baselines import MODEL_CLASSES

    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        state = {k[len("param/") :]: torch.from_numpy(data[k].astype(np.float32)) for k in data.files if k.startswith("param/")}
    cls = MODEL_CLASSES[meta["kind"]]
    model = cls(**meta["init_kwargs"])
    current = model.state_dict()
    model.load_state_dict({k: v.to(current[k].dtype) for k, v in state.items()})
    return model, TrainConfig(**meta["config"]), meta


def build_ptm(code_dim, text_dim, students, config: TrainConfig) -> PTM:
    torch.manual_seed(config.seed)
    return PTM(code_dim, text_dim, students=students, hidden=config.hidden_size, attn_dim=config.attn_dim,
               student_dim=config.student_dim, max_attempts=config.max_attempts_per_task,
               student_dropout=config.student_dropout)


def parameter_count(model) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = [
    "EpochLoss",
    "LossBreakdown",
    "PTM",
    "TrainConfig",
    "build_ptm",
    "combined_loss",
    "load_checkpoint",
    "loss_terms",
    "parameter_count",
    "predict",
    "predict_struggle",
    "save_checkpoint",
    "train",
    "write_loss_trace",
]
