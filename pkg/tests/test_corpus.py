import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import event, make_corpus, task
from ptmstruggle.corpus import (
    EVENT_COLUMNS,
    TASK_COLUMNS,
    Corpus,
    SyntheticConfig,
    build_histories,
    build_history,
    fingerprint,
    generate_synthetic_corpus,
    load_corpus,
    write_corpus,
)
from ptmstruggle.errors import DuplicateAttempt, InvalidConfig, MissingFile, SchemaError, UnknownStudent
from ptmstruggle.labeling import label_corpus


def _write_raw(root, tasks_rows, event_rows):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "tasks.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TASK_COLUMNS)
        w.writerows(tasks_rows)
    with open(root / "events.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        w.writerows(event_rows)
    return root


def _ev_row(sid="s1", tid="t1", attempt=1, minute=0, passed=1, total=3, code="print(1)"):
    return [sid, tid, attempt, f"2024-03-01T12:{minute:02d}:00Z", passed, total, code]


class TestLoadCorpus:
    def test_minimal_input(self, tmp_path):
        rows = [_ev_row(attempt=a, minute=a, passed=a) for a in (1, 2, 3)]
        corpus = load_corpus(_write_raw(tmp_path, [["t1", 0, "ForLoop", "loop it"]], rows))
        assert len(corpus.events) == 3
        assert len(corpus.pairs()[("s1", "t1")]) == 3

    def test_passed_exceeds_total(self, tmp_path):
        root = _write_raw(tmp_path, [["t1", 0, "", "p"]], [_ev_row(passed=5, total=3)])
        with pytest.raises(SchemaError) as err:
            load_corpus(root)
        assert err.value.row == 1 and err.value.column == "tests_passed"

    def test_duplicate_attempt(self, tmp_path):
        rows = [_ev_row(attempt=1, minute=0), _ev_row(attempt=2, minute=1), _ev_row(attempt=2, minute=2)]
        with pytest.raises(DuplicateAttempt) as err:
            load_corpus(_write_raw(tmp_path, [["t1", 0, "", "p"]], rows))
        assert (err.value.student, err.value.task, err.value.attempt) == ("s1", "t1", 2)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingFile):
            load_corpus(tmp_path / "absent")

    def test_unknown_task(self, tmp_path):
        with pytest.raises(SchemaError):
            load_corpus(_write_raw(tmp_path, [["t1", 0, "", "p"]], [_ev_row(tid="t9")]))

    def test_non_contiguous_attempts(self, tmp_path):
        rows = [_ev_row(attempt=1, minute=0), _ev_row(attempt=3, minute=1)]
        with pytest.raises(SchemaError):
            load_corpus(_write_raw(tmp_path, [["t1", 0, "", "p"]], rows))

    def test_timestamps_must_increase(self, tmp_path):
        rows = [_ev_row(attempt=1, minute=5), _ev_row(attempt=2, minute=1)]
        with pytest.raises(SchemaError):
            load_corpus(_write_raw(tmp_path, [["t1", 0, "", "p"]], rows))

    def test_empty_prompt(self, tmp_path):
        with pytest.raises(SchemaError):
            load_corpus(_write_raw(tmp_path, [["t1", 0, "", "  "]], [_ev_row()]))

    def test_multiline_code_survives(self, tmp_path):
        code = 'def f(x):\n    return "a,b"\n'
        root = _write_raw(tmp_path, [["t1", 0, "", "p"]], [_ev_row(code=code)])
        assert load_corpus(root).events[0].source_code == code

    def test_unsupported_format(self, tmp_path):
        with pytest.raises(InvalidConfig):
            load_corpus(tmp_path, format="progsnap2")


class TestBuildHistory:
    def test_orders_by_first_attempt(self):
        c = make_corpus([task("A"), task("B")], [event("s", "A", 1, 3, minutes=10), event("s", "B", 1, 3, minutes=5)])
        assert build_history(c, "s").task_ids == ["B", "A"]

    def test_tie_broken_by_task_id(self):
        c = make_corpus([task("b"), task("a")], [event("s", "b", 1, 3), event("s", "a", 1, 3)])
        assert build_history(c, "s").task_ids == ["a", "b"]

    def test_unknown_student(self):
        c = make_corpus([task("A")], [event("s", "A", 1, 3)])
        with pytest.raises(UnknownStudent):
            build_history(c, "nobody")

    def test_matches_bulk_builder(self, small_synthetic):
        corpus, _ = small_synthetic
        bulk = build_histories(corpus)
        for sid in sorted(corpus.students)[:5]:
            assert bulk[sid] == build_history(corpus, sid)

    def test_row_order_irrelevant(self, small_synthetic):
        corpus, _ = small_synthetic
        events = list(corpus.events)
        random.Random(0).shuffle(events)
        shuffled = Corpus(corpus.tasks, tuple(events), corpus.students)
        sid = sorted(corpus.students)[0]
        assert build_history(shuffled, sid) == build_history(corpus, sid)


_ident = st.text(alphabet="abcdefghij0123456789", min_size=1, max_size=6)
_code = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x00"), max_size=40)


@st.composite
def corpora(draw):
    task_ids = draw(st.lists(_ident, min_size=1, max_size=4, unique=True))
    tasks = [task(t, draw(st.frozensets(st.sampled_from(["ForLoop", "If/Else", "list"]), max_size=2)),
                  prompt=draw(st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x00"), min_size=1, max_size=20).filter(str.strip)), ordinal=i)
             for i, t in enumerate(task_ids)]
    events = []
    for sid in draw(st.lists(_ident, min_size=1, max_size=3, unique=True)):
        for tid in draw(st.lists(st.sampled_from(task_ids), min_size=1, unique=True)):
            total = draw(st.integers(1, 6))
            start = draw(st.integers(0, 100_000))
            for a in range(1, draw(st.integers(1, 3)) + 1):
                events.append(event(sid, tid, a, draw(st.integers(0, total)), total, start + 7 * a, draw(_code)))
    return make_corpus(tasks, events)


@settings(max_examples=40, deadline=None)
@given(corpora())
def test_round_trip(tmp_path_factory, corpus):
    root = write_corpus(corpus, tmp_path_factory.mktemp("rt"))
    assert load_corpus(root) == corpus


def test_nul_rejected_on_write(tmp_path):
    corpus = make_corpus([task("t1")], [event("s1", "t1", 1, 3, code="a\x00b")])
    with pytest.raises(SchemaError):
        write_corpus(corpus, tmp_path)


def test_round_trip_synthetic(tmp_path, small_synthetic):
    corpus, _ = small_synthetic
    assert load_corpus(write_corpus(corpus, tmp_path)) == corpus


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(n_students=30, n_tasks=10, seed=1)
        a, _ = generate_synthetic_corpus(cfg)
        b, _ = generate_synthetic_corpus(cfg)
        assert fingerprint(a) == fingerprint(b)

    def test_bytes_identical(self, tmp_path):
        cfg = SyntheticConfig(n_students=20, n_tasks=8, seed=1)
        for name in ("a", "b"):
            write_corpus(generate_synthetic_corpus(cfg)[0], tmp_path / name)
        for f in ("tasks.csv", "events.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_different_seed_differs(self):
        a, _ = generate_synthetic_corpus(SyntheticConfig(n_students=20, n_tasks=8, seed=1))
        b, _ = generate_synthetic_corpus(SyntheticConfig(n_students=20, n_tasks=8, seed=2))
        assert fingerprint(a) != fingerprint(b)

    def test_perfect_student_never_struggles(self):
        cfg = SyntheticConfig(n_students=50, n_tasks=20, seed=4, noise_rate=0.0)
        _, truth = generate_synthetic_corpus(cfg, skills_override={"s0000": np.ones(10)})
        assert not any(v for (sid, _), v in truth.struggled.items() if sid == "s0000")

    def test_base_rates_within_band(self):
        cfg = SyntheticConfig(n_students=200, n_tasks=50, seed=5)
        corpus, truth = generate_synthetic_corpus(cfg)
        lo, hi = cfg.struggle_band
        n = corpus.attempting_students()
        for tid in corpus.tasks:
            rate = sum(truth.struggled[(sid, tid)] for sid in corpus.students) / n[tid]
            # counts are rounded to whole students
            assert lo - 0.5 / n[tid] <= rate <= hi + 0.5 / n[tid]

    def test_mastery_anticorrelated_with_struggle(self):
        _, truth = generate_synthetic_corpus(SyntheticConfig(n_students=100, n_tasks=20, seed=6))
        keys = sorted(truth.struggled)
        assert len(keys) >= 1000
        m = np.array([truth.mastery[k] for k in keys])
        y = np.array([truth.struggled[k] for k in keys], dtype=float)
        assert np.corrcoef(m, y)[0, 1] < 0

    def test_generative_labels_match_labeling_rules(self, small_synthetic):
        corpus, truth = small_synthetic
        labels = label_corpus(corpus)
        assert all(labels[k].label.value == v for k, v in truth.struggled.items())

    def test_tests_passed_bounded(self, small_synthetic):
        corpus, _ = small_synthetic
        assert all(0 <= e.tests_passed <= e.tests_total for e in corpus.events)

    @pytest.mark.parametrize("bad", [dict(noise_rate=1.5), dict(noise_rate=-0.1), dict(n_students=0),
                                     dict(struggle_band=(0.6, 0.2)), dict(max_attempts=1)])
    def test_invalid_config(self, bad):
        with pytest.raises(InvalidConfig):
            generate_synthetic_corpus(SyntheticConfig(**bad))
