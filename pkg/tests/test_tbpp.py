from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptmstruggle.corpus import TaskSpec
from ptmstruggle.errors import EmptyHistory
from ptmstruggle.labeling import CANONICAL_CONCEPTS
from ptmstruggle.tbpp import (
    N_SKILLS,
    check_requirement_vector,
    check_tbpp,
    estimate_tbpp,
    normalized_product,
    requirement_vector,
    skill_matrix,
)


def test_requirement_vector_two_concepts():
    t = TaskSpec("t", "p", canonical_concepts=frozenset({"loops", "conditional_clauses"}))
    assert requirement_vector(t).tolist() == [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1]


def test_requirement_vector_empty_and_full():
    assert requirement_vector([]).tolist() == [0] * 10 + [1, 1, 1]
    assert requirement_vector(CANONICAL_CONCEPTS).tolist() == [1] * 13


def test_requirement_vector_rejects_unknown():
    with pytest.raises(ValueError):
        requirement_vector(["recursion"])


def test_latent_entries_must_be_one():
    vec = requirement_vector(["loops"])
    vec[11] = 0
    with pytest.raises(ValueError):
        check_requirement_vector(vec)


def test_illustration_matrix():
    A = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]])
    raw, norm = normalized_product(A, [1.0, 0.5, 0.0])
    np.testing.assert_array_equal(raw, [1.0, 0.5, 1.5])
    np.testing.assert_array_equal(norm, [0.5, 0.25, 0.5])


def test_all_scores_one():
    reqs = [requirement_vector(["loops"]), requirement_vector(["loops", "lists"])]
    profile = estimate_tbpp(zip(reqs, [1.0, 1.0]))
    expected = np.zeros(N_SKILLS)
    expected[[CANONICAL_CONCEPTS.index("loops"), CANONICAL_CONCEPTS.index("lists"), 10, 11, 12]] = 1.0
    np.testing.assert_array_equal(profile, expected)


def test_single_zero_score():
    np.testing.assert_array_equal(estimate_tbpp([(requirement_vector(["tuples"]), 0.0)]), np.zeros(N_SKILLS))


def test_empty_history():
    with pytest.raises(EmptyHistory):
        estimate_tbpp([])


def test_global_minmax_mode():
    reqs = [requirement_vector(["loops"]), requirement_vector(["lists"])]
    profile = estimate_tbpp(zip(reqs, [1.0, 0.5]), normalization="global_minmax")
    assert profile.min() == 0.0 and profile.max() == 1.0


def test_example_profile_is_valid():
    vec = [0.26, 0.86, 0.89, 0.91, 0.93, 0.43, 0.45, 0.29, 0.43, 0.41, 0.55, 0.68, 0.5]
    np.testing.assert_array_equal(check_tbpp(vec), vec)


def test_skill_matrix_shape():
    assert skill_matrix([requirement_vector([])] * 4).shape == (13, 4)


def tbpp_oracle(pairs):
    """Per-skill mean in exact rational arithmetic, rounded once."""
    out = []
    for i in range(N_SKILLS):
        scores = [Fraction(s) for r, s in pairs if r[i] == 1]
        out.append(float(sum(scores, Fraction(0)) / len(scores)) if scores else 0.0)
    return np.array(out)


histories = st.lists(
    st.tuples(
        st.frozensets(st.sampled_from(CANONICAL_CONCEPTS)),
        st.floats(0.0, 1.0, allow_nan=False),
    ),
    min_size=1,
    max_size=10,
)


@given(histories)
def test_matches_oracle(hist):
    pairs = [(requirement_vector(c), s) for c, s in hist]
    got = estimate_tbpp(pairs)
    assert got.tolist() == tbpp_oracle(pairs).tolist()
    assert np.all((0.0 <= got) & (got <= 1.0))
    assert np.all(np.abs(got[10:] - np.mean([s for _, s in pairs])) <= 1e-12)


@given(histories, st.randoms())
def test_permutation_invariant(hist, rnd):
    pairs = [(requirement_vector(c), s) for c, s in hist]
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert estimate_tbpp(pairs).tolist() == estimate_tbpp(shuffled).tolist()
