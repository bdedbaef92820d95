"""Submission-log data model, canonical CSV I/O and the synthetic corpus generator.

Canonical layout on disk (UTF-8, header row, RFC-4180 quoting)::

    tasks.csv   task_id, ordinal, concepts, prompt_text
    events.csv  student_id, task_id, attempt_index, timestamp, tests_passed,
                tests_total, source_code
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import DuplicateAttempt, InvalidConfig, MissingFile, SchemaError, UnknownStudent

TASK_COLUMNS = ("task_id", "ordinal", "concepts", "prompt_text")
EVENT_COLUMNS = (
    "student_id",
    "task_id",
    "attempt_index",
    "timestamp",
    "tests_passed",
    "tests_total",
    "source_code",
)


@dataclass(frozen=True, order=True)
class SubmissionEvent:
    student_id: str
    task_id: str
    attempt_index: int
    timestamp: datetime
    tests_passed: int
    tests_total: int
    source_code: str

    @property
    def score(self) -> float:
        return self.tests_passed / self.tests_total


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    prompt_text: str
    raw_concepts: frozenset = frozenset()
    canonical_concepts: frozenset = frozenset()
    ordinal: int | None = None


@dataclass(frozen=True)
class StudentHistory:
    student_id: str
    tasks: tuple  # of (TaskSpec, tuple[SubmissionEvent, ...])

    def __len__(self):
        return len(self.tasks)

    @property
    def task_ids(self):
        return [spec.task_id for spec, _ in self.tasks]


@dataclass
class Corpus:
    tasks: dict
    events: tuple
    students: frozenset = field(default=frozenset())

    def __post_init__(self):
        self.events = tuple(self.events)
        if not self.students:
            self.students = frozenset(e.student_id for e in self.events)
        else:
            self.students = frozenset(self.students)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.tasks == other.tasks
            and sorted(self.events) == sorted(other.events)
            and self.students == other.students
        )

    def pairs(self) -> dict:
        """Group events by (student_id, task_id), each list sorted by attempt."""
        grouped = defaultdict(list)
        for ev in self.events:
            grouped[(ev.student_id, ev.task_id)].append(ev)
        for evs in grouped.values():
            evs.sort(key=lambda e: e.attempt_index)
        return dict(grouped)

    def attempting_students(self) -> dict:
        """task_id -> number of distinct students with at least one event."""
        seen = defaultdict(set)
        for ev in self.events:
            seen[ev.task_id].add(ev.student_id)
        return {tid: len(seen.get(tid, ())) for tid in self.tasks}

    def with_tasks(self, tasks: dict) -> "Corpus":
        return Corpus(tasks=dict(tasks), events=self.events, students=self.students)

    def subset(self, student_ids) -> "Corpus":
        keep = frozenset(student_ids)
        return Corpus(
            tasks=self.tasks,
            events=tuple(e for e in self.events if e.student_id in keep),
            students=keep & self.students,
        )


# ---------------------------------------------------------------------------
# CSV I/O


def _format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _parse_ts(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _parse_int(value, row, column, minimum):
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise SchemaError(row, column, f"not an integer: {value!r}") from None
    if out < minimum:
        raise SchemaError(row, column, f"must be >= {minimum}, got {out}")
    return out


def _read_rows(path: Path, columns):
    if not path.is_file():
        raise MissingFile(f"{path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(0, missing[0], "missing column in header")
        # row numbers are 1-based data rows (header excluded)
        yield from enumerate(reader, start=1)


def load_corpus(path, format: str = "canonical-csv") -> Corpus:
    """Read and validate a canonical ``tasks.csv`` / ``events.csv`` pair from a directory."""
    if format != "canonical-csv":
        raise InvalidConfig(f"unsupported corpus format {format!r}")
    root = Path(path)
    if not root.exists():
        raise MissingFile(f"{root} does not exist")

    tasks = {}
    for row_no, row in _read_rows(root / "tasks.csv", TASK_COLUMNS):
        tid = (row["task_id"] or "").strip()
        if not tid:
            raise SchemaError(row_no, "task_id", "empty task_id")
        if tid in tasks:
            raise SchemaError(row_no, "task_id", f"duplicate task {tid!r}")
        prompt = row["prompt_text"] or ""
        if not prompt.strip():
            raise SchemaError(row_no, "prompt_text", "empty prompt")
        ordinal = row["ordinal"].strip() if row["ordinal"] else ""
        concepts = frozenset(c.strip() for c in (row["concepts"] or "").split(";") if c.strip())
        tasks[tid] = TaskSpec(
            task_id=tid,
            prompt_text=prompt,
            raw_concepts=concepts,
            ordinal=_parse_int(ordinal, row_no, "ordinal", 0) if ordinal else None,
        )

    events = []
    seen = set()
    for row_no, row in _read_rows(root / "events.csv", EVENT_COLUMNS):
        sid = (row["student_id"] or "").strip()
        tid = (row["task_id"] or "").strip()
        if not sid:
            raise SchemaError(row_no, "student_id", "empty student_id")
        if tid not in tasks:
            raise SchemaError(row_no, "task_id", f"unknown task {tid!r}")
        attempt = _parse_int(row["attempt_index"], row_no, "attempt_index", 1)
        passed = _parse_int(row["tests_passed"], row_no, "tests_passed", 0)
        total = _parse_int(row["tests_total"], row_no, "tests_total", 1)
        if passed > total:
            raise SchemaError(row_no, "tests_passed", f"tests_passed={passed} > tests_total={total}")
        try:
            ts = _parse_ts(row["timestamp"] or "")
        except ValueError:
            raise SchemaError(row_no, "timestamp", f"bad ISO-8601 timestamp {row['timestamp']!r}") from None
        key = (sid, tid, attempt)
        if key in seen:
            raise DuplicateAttempt(sid, tid, attempt)
        seen.add(key)
        events.append(SubmissionEvent(sid, tid, attempt, ts, passed, total, row["source_code"] or ""))

    corpus = Corpus(tasks=tasks, events=tuple(events))
    _check_attempt_sequences(corpus)
    return corpus


def _check_attempt_sequences(corpus: Corpus):
    for (sid, tid), evs in corpus.pairs().items():
        indices = [e.attempt_index for e in evs]
        if indices != list(range(1, len(evs) + 1)):
            raise SchemaError(0, "attempt_index", f"attempts for ({sid}, {tid}) are not contiguous 1..T: {indices}")
        stamps = [e.timestamp for e in evs]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise SchemaError(0, "timestamp", f"timestamps for ({sid}, {tid}) are not strictly increasing")


def write_corpus(corpus: Corpus, path) -> Path:
    # the csv module cannot represent NUL
    for t in corpus.tasks.values():
        if "\x00" in t.prompt_text:
            raise SchemaError(0, "prompt_text", f"task {t.task_id} contains a NUL character")
    for e in corpus.events:
        if "\x00" in e.source_code:
            raise SchemaError(0, "source_code", f"({e.student_id}, {e.task_id}) attempt {e.attempt_index} contains a NUL character")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "tasks.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(TASK_COLUMNS)
        for tid in sorted(corpus.tasks):
            t = corpus.tasks[tid]
            w.writerow([t.task_id, "" if t.ordinal is None else t.ordinal, ";".join(sorted(t.raw_concepts)), t.prompt_text])
    with open(root / "events.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(EVENT_COLUMNS)
        for e in sorted(corpus.events, key=lambda e: (e.student_id, e.timestamp, e.task_id, e.attempt_index)):
            w.writerow([e.student_id, e.task_id, e.attempt_index, _format_ts(e.timestamp), e.tests_passed, e.tests_total, e.source_code])
    return root


# ---------------------------------------------------------------------------
# Histories


def build_history(corpus: Corpus, student_id: str) -> StudentHistory:
    """Tasks ordered by first-attempt timestamp (ties: task_id), attempts by index."""
    if student_id not in corpus.students:
        raise UnknownStudent(f"student {student_id!r} not in corpus")
    per_task = defaultdict(list)
    for ev in corpus.events:
        if ev.student_id == student_id:
            per_task[ev.task_id].append(ev)
    entries = []
    for tid, evs in per_task.items():
        evs.sort(key=lambda e: e.attempt_index)
        first = min(e.timestamp for e in evs)
        entries.append((first, tid, tuple(evs)))
    entries.sort(key=lambda x: (x[0], x[1]))
    return StudentHistory(student_id, tuple((corpus.tasks[tid], evs) for _, tid, evs in entries))


def build_histories(corpus: Corpus) -> dict:
    """Histories for every student in one pass over the events."""
    per_student = defaultdict(lambda: defaultdict(list))
    for ev in corpus.events:
        per_student[ev.student_id][ev.task_id].append(ev)
    out = {}
    for sid in sorted(corpus.students):
        entries = []
        for tid, evs in per_student[sid].items():
            evs = sorted(evs, key=lambda e: e.attempt_index)
            entries.append((min(e.timestamp for e in evs), tid, tuple(evs)))
        entries.sort(key=lambda x: (x[0], x[1]))
        out[sid] = StudentHistory(sid, tuple((corpus.tasks[tid], evs) for _, tid, evs in entries))
    return out


# ---------------------------------------------------------------------------
# Synthetic generator

# raw tag emitted per canonical concept; all appear in the shipped concept map
_RAW_TAGS = {
    "conditional_clauses": ("If/Else", "NestedIf"),
    "loops": ("ForLoop", "WhileLoop"),
    "math_operations": ("Math+-*/", "Math%"),
    "logic_operations": ("LogicAndNotOr", "LogicCompareNum"),
    "string_manipulations": ("StringFormat", "StringIndex"),
    "lists": ("ArrayIndex", "list"),
    "file_operations": ("file_io",),
    "functions": ("DefFunction",),
    "dictionaries": ("dictionary",),
    "tuples": ("tuple",),
}

_SNIPPETS = {
    "conditional_clauses": ["if {v} > {n}:", "    {v} = {v} - {n}", "else:", "    {v} = {v} + 1"],
    "loops": ["for i in range({n}):", "    {v} += i"],
    "math_operations": ["{v} = ({v} * {n}) % 7 + {n} / 2"],
    "logic_operations": ["ok = {v} > 0 and not {v} == {n}"],
    "string_manipulations": ["s = str({v}).upper().replace('1', '+')"],
    "lists": ["xs = [{v}, {n}]", "xs.append({v})"],
    "file_operations": ["fh = open('data.txt')", "lines = fh.readlines()"],
    "functions": ["def helper_{n}(a):", "    return a * 2", "{v} = helper_{n}({v})"],
    "dictionaries": ["d = dict()", "d['k'] = {v}"],
    "tuples": ["t = tuple([{v}, {n}])"],
}

# starter-code parameter per concept; every attempt keeps the task's signature
_PARAMS = {
    "conditional_clauses": "threshold",
    "loops": "n_times",
    "math_operations": "factor",
    "logic_operations": "flag",
    "string_manipulations": "text",
    "lists": "items",
    "file_operations": "path",
    "functions": "callback",
    "dictionaries": "mapping",
    "tuples": "pair",
}

_PROMPT_HINTS = {
    "conditional_clauses": "decide between cases depending on the value",
    "loops": "repeat the computation for every element",
    "math_operations": "compute the arithmetic result",
    "logic_operations": "combine the boolean conditions",
    "string_manipulations": "build the resulting string",
    "lists": "store the values in a list",
    "file_operations": "read the input file",
    "functions": "write a helper function",
    "dictionaries": "map each key to its count",
    "tuples": "return the pair as a tuple",
}

_FILLER = (
    "given", "number", "value", "input", "output", "result", "the", "student", "score",
    "grade", "word", "array", "count", "positive", "table", "sum", "total", "print",
)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic generative model.

    Student skill on concept c is ``sigmoid(g + e_c)`` with a general ability
    ``g ~ N(skill_mean, skill_sd_general)`` and per-concept offsets
    ``e_c ~ N(0, skill_sd_concept)``.  Struggle propensity on a task is
    ``(1 - mastery)**sharpness`` where mastery is the mean current skill over
    the required concepts, scaled by ``persistence**persistence_effect``
    where a per-student ``persistence ~ LogNormal(0, persistence_sd)`` also
    stretches the number of attempts.  Attempts reveal per-student effort
    that the final submission alone does not.  The per-task number of strugglers is
    ``round(rate * attempting)`` with ``rate`` drawn from ``struggle_band``.
    """

    n_students: int = 100
    n_tasks: int = 50
    seed: int = 0
    skill_mean: float = 0.5
    skill_sd_general: float = 1.0
    skill_sd_concept: float = 1.5
    noise_rate: float = 0.0
    struggle_band: tuple = (0.15, 0.45)
    sharpness: float = 3.0
    learning_rate: float = 0.04
    fail_share: float = 0.7
    max_concepts_per_task: int = 3
    mean_extra_attempts: float = 4.0
    max_attempts: int = 12
    skip_rate: float = 0.0
    prompt_hint_rate: float = 0.5
    persistence_sd: float = 0.7
    persistence_effect: float = 1.0

    def validate(self):
        if self.n_students < 1 or self.n_tasks < 1:
            raise InvalidConfig("n_students and n_tasks must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidConfig(f"noise_rate must lie in [0,1], got {self.noise_rate}")
        lo, hi = self.struggle_band
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidConfig(f"struggle_band must satisfy 0 <= lo <= hi <= 1, got {self.struggle_band}")
        if not 0.0 <= self.fail_share <= 1.0:
            raise InvalidConfig("fail_share must lie in [0,1]")
        if not 0.0 <= self.skip_rate < 1.0:
            raise InvalidConfig("skip_rate must lie in [0,1)")
        if self.persistence_sd < 0:
            raise InvalidConfig("persistence_sd must be >= 0")
        if self.max_attempts < 2 or not 1 <= self.max_concepts_per_task <= 10:
            raise InvalidConfig("max_attempts >= 2 and 1 <= max_concepts_per_task <= 10 required")


@dataclass
class SyntheticTruth:
    """Ground truth retained by the generator for tests and diagnostics."""

    skills: dict  # student -> (10,) initial skill vector, canonical order
    required: dict  # task -> tuple of canonical concepts
    struggled: dict  # (student, task) -> bool generative outcome
    mastery: dict  # (student, task) -> mean required mastery at attempt time
    rates: dict  # task -> target struggle rate


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _render_code(rng, concepts, present, var, n, salt):
    params = ", ".join([var] + [_PARAMS[c] for c in concepts])
    lines = [f"def solve_{salt}({params}):"]
    for c in concepts:
        if present[c]:
            lines.extend("    " + s.format(v=var, n=n) for s in _SNIPPETS[c])
    if len(lines) == 1 or rng.random() < 0.5:
        lines.append(f"    {var} = {var} + {int(rng.integers(0, 9))}")
    lines.append(f"    return {var}")
    return "\n".join(lines) + "\n"


def generate_synthetic_corpus(config: SyntheticConfig, skills_override: dict | None = None):
    """Sample a corpus from the generative model; returns ``(corpus, truth)``.

    ``skills_override`` maps student ids (``s0000`` ...) to fixed initial skill
    vectors, used to pin degenerate students in tests.
    """
    from .labeling import CANONICAL_CONCEPTS

    config.validate()
    rng = np.random.default_rng(config.seed)
    n_c = len(CANONICAL_CONCEPTS)
    width = max(4, len(str(config.n_students - 1)))
    students = [f"s{i:0{width}d}" for i in range(config.n_students)]

    general = rng.normal(config.skill_mean, config.skill_sd_general, size=(config.n_students, 1))
    offsets = rng.normal(0.0, config.skill_sd_concept, size=(config.n_students, n_c))
    skills = _sigmoid(general + offsets)
    for idx, sid in enumerate(students):
        if skills_override and sid in skills_override:
            skills[idx] = np.asarray(skills_override[sid], dtype=float)
    initial = {sid: skills[i].copy() for i, sid in enumerate(students)}
    persistence = np.exp(rng.normal(0.0, config.persistence_sd, size=config.n_students))

    tasks = {}
    required = {}
    rates = {}
    for k in range(config.n_tasks):
        tid = f"t{k:03d}"
        n_req = int(rng.integers(1, config.max_concepts_per_task + 1))
        req = tuple(sorted(rng.choice(n_c, size=n_req, replace=False).tolist()))
        names = tuple(CANONICAL_CONCEPTS[i] for i in req)
        raw = frozenset(_RAW_TAGS[c][int(rng.integers(0, len(_RAW_TAGS[c])))] for c in names)
        words = list(rng.choice(_FILLER, size=6))
        hints = [_PROMPT_HINTS[c] for c in names if rng.random() < config.prompt_hint_rate]
        prompt = f"Task {k}: write a program that " + " ".join(words) + ". " + " and ".join(hints)
        tasks[tid] = TaskSpec(task_id=tid, prompt_text=prompt.strip(), raw_concepts=raw, ordinal=k)
        required[tid] = names
        rates[tid] = float(rng.uniform(*config.struggle_band))

    base_time = datetime(2024, 1, 8, 9, 0, tzinfo=timezone.utc)
    attending = rng.random((config.n_students, config.n_tasks)) >= config.skip_rate
    events = []
    struggled = {}
    mastery_log = {}

    for k, tid in enumerate(tasks):
        req_idx = [CANONICAL_CONCEPTS.index(c) for c in required[tid]]
        who = np.flatnonzero(attending[:, k])
        if who.size == 0:
            continue
        mastery = skills[who][:, req_idx].mean(axis=1)
        weight = (1.0 - mastery) ** config.sharpness * persistence[who] ** config.persistence_effect
        weight = (1.0 - config.noise_rate) * weight + config.noise_rate
        n_struggle = min(int(round(rates[tid] * who.size)), int(np.count_nonzero(weight > 0)))
        # weighted sampling without replacement (Gumbel top-k)
        with np.errstate(divide="ignore"):
            keys = np.log(weight) + rng.gumbel(size=who.size)
        chosen = set(who[np.argsort(-keys, kind="stable")[:n_struggle]].tolist()) if n_struggle else set()

        # struggle mode: fail the tests, or pass after excess attempts; the
        # excess group must stay under a quarter of the successful completers
        is_struggle = np.array([i in chosen for i in who])
        fails = is_struggle & (rng.random(who.size) < config.fail_share)
        excess = is_struggle & ~fails
        n_success = int(np.count_nonzero(~fails))
        order = np.flatnonzero(excess)
        while order.size and order.size >= 0.25 * n_success:
            fails[order[-1]] = True
            excess[order[-1]] = False
            order = order[:-1]

        ok = ~is_struggle
        extra = rng.poisson(config.mean_extra_attempts * (1.0 - mastery) * persistence[who])
        attempts = np.minimum(1 + extra, config.max_attempts // 2)
        pool = np.concatenate([np.sort(attempts[ok]), np.full(int(np.count_nonzero(excess)), np.iinfo(np.int64).max)])
        if ok.any():
            rank = math.ceil(0.75 * pool.size)
            threshold = int(pool[rank - 1])
            attempts[ok] = np.minimum(attempts[ok], threshold)
        else:
            threshold = 1
        attempts[excess] = threshold + 1 + rng.geometric(0.5, size=int(np.count_nonzero(excess))) - 1
        attempts[fails] = rng.geometric(1.0 / (1.0 + 1.9 * persistence[who][fails]))
        attempts = np.minimum(attempts, config.max_attempts)

        n_tests = int(rng.integers(3, 9))
        for j, s_idx in enumerate(who):
            sid = students[s_idx]
            t_count = int(attempts[j])
            final_pass = not fails[j]
            final_score = n_tests if final_pass else int(rng.integers(0, n_tests))
            start = base_time + timedelta(days=k, minutes=int(s_idx % 240))
            var = "xyzabc"[int(rng.integers(0, 6))]
            skill_row = skills[s_idx]
            for a in range(1, t_count + 1):
                frac = a / t_count
                present = {}
                for c in required[tid]:
                    p_use = skill_row[CANONICAL_CONCEPTS.index(c)]
                    present[c] = (final_pass and a == t_count) or rng.random() < p_use * (0.5 + 0.5 * frac)
                if a == t_count:
                    passed = final_score
                else:
                    passed = int(rng.integers(0, max(1, final_score) + (0 if final_pass else 1)))
                    passed = min(passed, n_tests - 1)
                code = _render_code(rng, required[tid], present, var, k % 7 + 2, k)
                events.append(
                    SubmissionEvent(sid, tid, a, start + timedelta(minutes=3 * a), passed, n_tests, code)
                )
            struggled[(sid, tid)] = bool(is_struggle[j])
            mastery_log[(sid, tid)] = float(mastery[j])

        # practice effect: required skills improve, less so after struggling
        gain = config.learning_rate * np.where(is_struggle, 0.5, 1.0)
        for c in req_idx:
            skills[who, c] += gain * (1.0 - skills[who, c])

    corpus = Corpus(tasks=tasks, events=tuple(events), students=frozenset(students))
    truth = SyntheticTruth(skills=initial, required=required, struggled=struggled, mastery=mastery_log, rates=rates)
    return corpus, truth


def fingerprint(corpus: Corpus) -> str:
    """Stable digest of a corpus, independent of event order."""
    import hashlib

    h = hashlib.sha256()
    for tid in sorted(corpus.tasks):
        t = corpus.tasks[tid]
        h.update(repr((t.task_id, t.prompt_text, sorted(t.raw_concepts), sorted(t.canonical_concepts), t.ordinal)).encode())
    for e in sorted(corpus.events):
        h.update(repr((e.student_id, e.task_id, e.attempt_index, _format_ts(e.timestamp), e.tests_passed, e.tests_total, e.source_code)).encode())
    return h.hexdigest()


__all__ = [
    "Corpus",
    "StudentHistory",
    "SubmissionEvent",
    "SyntheticConfig",
    "SyntheticTruth",
    "TaskSpec",
    "build_histories",
    "build_history",
    "fingerprint",
    "generate_synthetic_corpus",
    "load_corpus",
    "write_corpus",
]
