"""Comparison models sharing the PTM prediction interface.

Every model maps a :class:`~ptmstruggle.features.Batch` to ``{"logit", "prob"}``
of shape (B, M); only PTM additionally returns a profile.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import UnknownTaskId
from .ptm import PTM, HistoryEncoder, SubmissionEncoder, TrainConfig
from .tbpp import N_OBSERVED

BASELINE_NAMES = ("dkt_target", "sakt", "no_tax", "no_tax_no_hist")


class DKTTarget(nn.Module):
    """DKT over (task, struggle) interactions; target-task embedding joins the final state."""

    kind = "dkt_target"
    multitask = False
    uses_vocab = True

    def __init__(self, n_tasks, hidden=512, embed_dim=None):
        super().__init__()
        embed_dim = embed_dim or hidden
        self.init_kwargs = dict(n_tasks=n_tasks, hidden=hidden, embed_dim=embed_dim)
        self.n_tasks = n_tasks
        self.interactions = nn.Embedding(2 * n_tasks + 1, embed_dim, padding_idx=0)
        self.lstm = nn.LSTM(embed_dim, hidden, batch_first=True)
        self.target = nn.Embedding(n_tasks + 1, embed_dim, padding_idx=0)
        self.out = nn.Linear(hidden + embed_dim, 1)

    def _check(self, idx):
        if bool(((idx < 0) | (idx > self.n_tasks)).any()):
            raise UnknownTaskId("task index outside the model vocabulary")

    def score(self, context_idx, struggle, n_tasks, target_idx):
        self._check(context_idx)
        self._check(target_idx)
        inter = torch.where(context_idx > 0, 2 * (context_idx - 1) + struggle.long() + 1, torch.zeros_like(context_idx))
        packed = nn.utils.rnn.pack_padded_sequence(self.interactions(inter), n_tasks.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        state = h[-1].unsqueeze(1).expand(-1, target_idx.shape[1], -1)
        return self.out(torch.cat([state, self.target(target_idx)], dim=-1)).squeeze(-1)

    def forward(self, batch):
        logits = self.score(batch.context_idx, batch.struggle, batch.n_tasks, batch.target_idx)
        return {"logit": logits, "prob": torch.sigmoid(logits)}


class SAKT(nn.Module):
    """Single-block self-attentive knowledge tracing.

    The target task's exercise embedding is the query; keys and values are
    the (task, struggle) interaction embeddings plus positions.  Positions at
    or after ``target_pos`` are masked out.
    """

    kind = "sakt"
    multitask = False
    uses_vocab = True

    def __init__(self, n_tasks, hidden=512, heads=8, max_len=256, dropout=0.0):
        super().__init__()
        if hidden % heads:
            heads = 1
        self.init_kwargs = dict(n_tasks=n_tasks, hidden=hidden, heads=heads, max_len=max_len, dropout=dropout)
        self.n_tasks = n_tasks
        self.max_len = max_len
        self.interactions = nn.Embedding(2 * n_tasks + 1, hidden, padding_idx=0)
        self.exercises = nn.Embedding(n_tasks + 1, hidden, padding_idx=0)
        self.positions = nn.Embedding(max_len, hidden)
        self.attn = nn.MultiheadAttention(hidden, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, hidden))
        self.norm2 = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, 1)

    def score(self, context_idx, struggle, target_pos, target_idx):
        if bool(((context_idx < 0) | (context_idx > self.n_tasks)).any() or ((target_idx < 0) | (target_idx > self.n_tasks)).any()):
            raise UnknownTaskId("task index outside the model vocabulary")
        B, L = context_idx.shape
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.max_len}")
        inter = torch.where(context_idx > 0, 2 * (context_idx - 1) + struggle.long() + 1, torch.zeros_like(context_idx))
        pos = torch.arange(L)
        keys = self.interactions(inter) + self.positions(pos)
        query = self.exercises(target_idx)
        blocked = (pos.unsqueeze(0) >= target_pos.unsqueeze(1)) | (context_idx == 0)
        attended, _ = self.attn(query, keys, keys, key_padding_mask=blocked, need_weights=False)
        x = self.norm1(attended + query)
        x = self.norm2(self.ffn(x) + x)
        return self.out(x).squeeze(-1)

    def forward(self, batch):
        logits = self.score(batch.context_idx, batch.struggle, batch.n_tasks, batch.target_idx)
        return {"logit": logits, "prob": torch.sigmoid(logits)}


class NoTax(nn.Module):
    """Single-task ablation: submission and history encoders without the taxonomy.

    History summary -> 10 sigmoid scores -> MLP, task text -> MLP, the two
    combined by learned weighted addition and a final linear layer.
    ``history=False`` feeds each task's final submission only.
    """

    multitask = False
    uses_vocab = False

    def __init__(self, code_dim, text_dim, hidden=512, max_attempts=100, history=True):
        super().__init__()
        self.init_kwargs = dict(code_dim=code_dim, text_dim=text_dim, hidden=hidden, max_attempts=max_attempts, history=history)
        self.kind = "no_tax" if history else "no_tax_no_hist"
        self.submissions = SubmissionEncoder(code_dim, hidden, max_attempts, last_only=not history)
        self.history = HistoryEncoder(hidden)
        self.observed = nn.Linear(hidden, N_OBSERVED)
        self.skill_mlp = nn.Sequential(nn.Linear(N_OBSERVED, hidden), nn.ReLU(), nn.Linear(hidden, hidden))
        self.text_mlp = nn.Sequential(nn.Linear(text_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden))
        self.mix = nn.Parameter(torch.ones(2))
        self.out = nn.Linear(hidden, 1)

    def forward(self, batch):
        Z = self.submissions(batch.codes, batch.attempt_len, batch.struggle)
        skills = torch.sigmoid(self.observed(self.history(Z, batch.n_tasks)))
        a = self.skill_mlp(skills).unsqueeze(1)
        b = self.text_mlp(batch.target_text)
        logits = self.out(self.mix[0] * a + self.mix[1] * b).squeeze(-1)
        return {"logit": logits, "prob": torch.sigmoid(logits)}


class NoTaxNoHist(NoTax):
    def __init__(self, code_dim, text_dim, hidden=512, max_attempts=100, history=False):
        super().__init__(code_dim, text_dim, hidden=hidden, max_attempts=max_attempts, history=False)


MODEL_CLASSES = {"ptm": PTM, "dkt_target": DKTTarget, "sakt": SAKT, "no_tax": NoTax, "no_tax_no_hist": NoTaxNoHist}
MODEL_NAMES = tuple(MODEL_CLASSES)


def build_model(name, config: TrainConfig, code_dim, text_dim, n_tasks, students=()):
    """Instantiate a model by name with seeded initialisation."""
    torch.manual_seed(config.seed)
    h = config.hidden_size
    if name == "ptm":
        return PTM(code_dim, text_dim, students=students, hidden=h, attn_dim=config.attn_dim,
                   student_dim=config.student_dim, max_attempts=config.max_attempts_per_task,
                   student_dropout=config.student_dropout)
    if name == "dkt_target":
        return DKTTarget(n_tasks, hidden=h)
    if name == "sakt":
        return SAKT(n_tasks, hidden=h)
    if name == "no_tax":
        return NoTax(code_dim, text_dim, hidden=h, max_attempts=config.max_attempts_per_task)
    if name == "no_tax_no_hist":
        return NoTaxNoHist(code_dim, text_dim, hidden=h, max_attempts=config.max_attempts_per_task)
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


# ---------------------------------------------------------------------------
# Single-sequence functional entry points


def _interaction_tensors(interaction_sequence, vocab):
    ids = torch.tensor([[vocab[t] for t, _ in interaction_sequence]], dtype=torch.long)
    labels = torch.tensor([[float(bool(s)) for _, s in interaction_sequence]])
    return ids, labels


@torch.no_grad()
def dkt_target_forward(interaction_sequence, target_task_id, model: DKTTarget, vocab) -> float:
    if not interaction_sequence:
        raise ValueError("interaction sequence must be non-empty")
    ids, labels = _interaction_tensors(interaction_sequence, vocab)
    target = torch.tensor([[vocab[target_task_id]]])
    model.eval()
    return float(torch.sigmoid(model.score(ids, labels, torch.tensor([ids.shape[1]]), target))[0, 0])


@torch.no_grad()
def sakt_forward(interaction_sequence, target_task_id, model: SAKT, vocab, target_position=None) -> float:
    """Probability for the target placed at ``target_position`` (default: after the sequence)."""
    pos = len(interaction_sequence) if target_position is None else target_position
    visible = list(interaction_sequence)[:pos]
    if not visible:
        raise ValueError("no interactions precede the target position")
    ids, labels = _interaction_tensors(visible, vocab)
    target = torch.tensor([[vocab[target_task_id]]])
    model.eval()
    return float(torch.sigmoid(model.score(ids, labels, torch.tensor([pos]), target))[0, 0])


@torch.no_grad()
def ablation_forward(variant, batch, model: NoTax) -> torch.Tensor:
    if variant != model.kind:
        raise ValueError(f"model is a {model.kind!r} variant, not {variant!r}")
    model.eval()
    return model(batch)["prob"]
