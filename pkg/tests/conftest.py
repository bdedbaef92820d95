from datetime import datetime, timedelta, timezone

import pytest

from ptmstruggle.corpus import Corpus, SubmissionEvent, SyntheticConfig, TaskSpec, generate_synthetic_corpus
from ptmstruggle.encoders import EmbeddingCache, HashingEncoder
from ptmstruggle.experiment import prepare

T0 = datetime(2024, 3, 1, 12, 0, tzinfo=timezone.utc)


def event(sid, tid, attempt, passed, total=3, minutes=0, code="x = 1"):
    return SubmissionEvent(sid, tid, attempt, T0 + timedelta(minutes=minutes), passed, total, code)


def task(tid, concepts=(), prompt=None, ordinal=None):
    return TaskSpec(tid, prompt or f"solve {tid}", frozenset(concepts), ordinal=ordinal)


def make_corpus(tasks, events):
    return Corpus({t.task_id: t for t in tasks}, tuple(events), frozenset(e.student_id for e in events))


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic_corpus(SyntheticConfig(n_students=60, n_tasks=40, seed=3))


@pytest.fixture(scope="session")
def encoder():
    return HashingEncoder(dim=32)


@pytest.fixture(scope="session")
def prepared(small_synthetic, encoder):
    corpus, _ = small_synthetic
    return prepare(corpus, encoder, encoder, EmbeddingCache())


_ACCEPTANCE = {}


def record_acceptance(criterion, ok, detail):
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    _ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
