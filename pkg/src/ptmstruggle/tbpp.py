"""Skill requirement vectors and the ground-truth proficiency profile.

A profile has 13 entries: the ten canonical concepts (in
``labeling.CANONICAL_CONCEPTS`` order) followed by three latent skills that
every task requires.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import EmptyHistory
from .labeling import CANONICAL_CONCEPTS

N_OBSERVED = len(CANONICAL_CONCEPTS)
N_LATENT = 3
N_SKILLS = N_OBSERVED + N_LATENT
SKILL_NAMES = CANONICAL_CONCEPTS + ("latent_1", "latent_2", "latent_3")

NORMALIZATIONS = ("per_skill_mean", "global_minmax")


def requirement_vector(task) -> np.ndarray:
    """Binary 13-vector; ``task`` is a TaskSpec or an iterable of canonical tags."""
    concepts = getattr(task, "canonical_concepts", task)
    unknown = set(concepts) - set(CANONICAL_CONCEPTS)
    if unknown:
        raise ValueError(f"not canonical concepts: {sorted(unknown)}")
    vec = np.zeros(N_SKILLS, dtype=np.int8)
    for c in concepts:
        vec[CANONICAL_CONCEPTS.index(c)] = 1
    vec[N_OBSERVED:] = 1
    return vec


def check_requirement_vector(vec) -> np.ndarray:
    vec = np.asarray(vec)
    if vec.shape != (N_SKILLS,):
        raise ValueError(f"requirement vector must have {N_SKILLS} entries, got shape {vec.shape}")
    if not np.isin(vec, (0, 1)).all():
        raise ValueError("requirement vector entries must be 0 or 1")
    if not (vec[N_OBSERVED:] == 1).all():
        raise ValueError("latent skills are always required; entries 11-13 must be 1")
    return vec


def check_tbpp(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (N_SKILLS,):
        raise ValueError(f"TBPP must have {N_SKILLS} entries, got shape {vec.shape}")
    if not np.isfinite(vec).all() or (vec < 0).any() or (vec > 1).any():
        raise ValueError("TBPP entries must lie in [0, 1]")
    return vec


def skill_matrix(requirements) -> np.ndarray:
    """Stack K requirement vectors into the 13 x K matrix A."""
    cols = [check_requirement_vector(r) for r in requirements]
    return np.stack(cols, axis=1) if cols else np.zeros((N_SKILLS, 0), dtype=np.int8)


def estimate_tbpp(history_outcomes, normalization: str = "per_skill_mean") -> np.ndarray:
    """Ground-truth profile from ``(requirement_vector, final_score)`` pairs.

    ``per_skill_mean`` divides each entry of ``A @ S`` by the number of history
    tasks requiring that skill (scores already lie in [0, 1], so the maximum
    score is 1); skills no task required stay 0.  ``global_minmax`` rescales
    the raw product to [0, 1] by its own min and max instead.

    Each mean is computed in exact rational arithmetic and rounded once, so
    the result does not depend on task order.
    """
    pairs = list(history_outcomes)
    if not pairs:
        raise EmptyHistory("TBPP estimation needs at least one history task")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    A = skill_matrix(r for r, _ in pairs)
    S = np.array([float(s) for _, s in pairs])
    if ((S < 0) | (S > 1)).any():
        raise ValueError("final scores must lie in [0, 1]")

    return normalized_product(A, S, normalization)[1]


def normalized_product(A, S, normalization: str = "per_skill_mean"):
    """``(raw, normalized)`` for a binary skill-by-task matrix and a score vector."""
    A = np.asarray(A)
    S = np.asarray(S, dtype=float)
    raw = np.array([math.fsum(S[A[i] == 1]) for i in range(A.shape[0])])
    if normalization == "global_minmax":
        lo, hi = raw.min(), raw.max()
        return raw, (np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo))
    # exact rational mean, rounded once
    out = np.array([float(sum(map(Fraction, S[A[i] == 1]), Fraction(0)) / n) if (n := int(A[i].sum())) else 0.0
                    for i in range(A.shape[0])])
    return raw, out
