"""Task outcomes, struggling labels, canonical concepts and concept-presence detection."""

from __future__ import annotations

import csv
import enum
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

from .errors import EmptyInput, MixedPair, NoSuccessfulPeers

log = logging.getLogger(__name__)

# Index order shared by requirement vectors and TBPP vectors.
CANONICAL_CONCEPTS = (
    "conditional_clauses",
    "loops",
    "math_operations",
    "logic_operations",
    "string_manipulations",
    "lists",
    "file_operations",
    "functions",
    "dictionaries",
    "tuples",
)

STRUGGLE_PERCENTILE = 0.75


class StruggleRule(str, enum.Enum):
    FAILED_TESTS = "failed_tests"
    EXCESS_ATTEMPTS = "excess_attempts"
    BOTH = "both"
    NONE = "none"


@dataclass(frozen=True)
class TaskOutcome:
    student_id: str
    task_id: str
    attempt_count: int
    final_score: float
    passed_all: bool


@dataclass(frozen=True)
class StrugglingLabel:
    value: bool
    rule: StruggleRule

    def __post_init__(self):
        if self.value != (self.rule is not StruggleRule.NONE):
            raise ValueError(f"inconsistent label: value={self.value}, rule={self.rule}")


def compute_task_outcome(events) -> TaskOutcome:
    events = list(events)
    if not events:
        raise EmptyInput("no events for outcome")
    pairs = {(e.student_id, e.task_id) for e in events}
    if len(pairs) > 1:
        raise MixedPair(f"events span several student-task pairs: {sorted(pairs)}")
    last = max(events, key=lambda e: e.attempt_index)
    return TaskOutcome(
        student_id=last.student_id,
        task_id=last.task_id,
        attempt_count=len(events),
        final_score=last.tests_passed / last.tests_total,
        passed_all=last.tests_passed == last.tests_total,
    )


def nearest_rank(values, fraction: float):
    """Nearest-rank percentile: the ``ceil(fraction * n)``-th smallest value."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("percentile of empty sample")
    rank = max(1, math.ceil(fraction * len(ordered)))
    return ordered[rank - 1]


def attempt_threshold(task_id: str, corpus=None, outcomes=None) -> int:
    """75th nearest-rank percentile of attempt counts among successful completers.

    Pass either the corpus or precomputed ``outcomes`` (iterable of TaskOutcome).
    """
    if outcomes is None:
        outcomes = [compute_task_outcome(evs) for (_, tid), evs in corpus.pairs().items() if tid == task_id]
    counts = [o.attempt_count for o in outcomes if o.task_id == task_id and o.passed_all]
    if not counts:
        raise NoSuccessfulPeers(f"no student completed task {task_id!r}")
    return nearest_rank(counts, STRUGGLE_PERCENTILE)


def label_struggling(outcome: TaskOutcome, threshold: int | None) -> StrugglingLabel:
    if not outcome.passed_all:
        return StrugglingLabel(True, StruggleRule.FAILED_TESTS)
    if threshold is not None and outcome.attempt_count > threshold:
        return StrugglingLabel(True, StruggleRule.EXCESS_ATTEMPTS)
    return StrugglingLabel(False, StruggleRule.NONE)


@dataclass(frozen=True)
class LabeledPair:
    outcome: TaskOutcome
    label: StrugglingLabel
    threshold: int | None


def label_corpus(corpus) -> dict:
    """(student_id, task_id) -> LabeledPair, thresholds computed over the whole corpus."""
    outcomes = {key: compute_task_outcome(evs) for key, evs in corpus.pairs().items()}
    by_task = defaultdict(list)
    for o in outcomes.values():
        by_task[o.task_id].append(o)
    thresholds = {}
    for tid, group in by_task.items():
        try:
            thresholds[tid] = attempt_threshold(tid, outcomes=group)
        except NoSuccessfulPeers:
            log.info("task %s has no successful completers; failed-tests rule only", tid)
            thresholds[tid] = None
    return {
        key: LabeledPair(o, label_struggling(o, thresholds[o.task_id]), thresholds[o.task_id])
        for key, o in outcomes.items()
    }


# ---------------------------------------------------------------------------
# Concepts


@lru_cache(maxsize=None)
def default_concept_map() -> dict:
    text = resources.files("ptmstruggle").joinpath("data/concept_map.csv").read_text(encoding="utf-8")
    return read_concept_map(text.splitlines())


def read_concept_map(lines) -> dict:
    table = {}
    for row in csv.DictReader(lines):
        tag = row["canonical_tag"].strip()
        if tag not in CANONICAL_CONCEPTS:
            raise ValueError(f"concept map targets unknown canonical tag {tag!r}")
        table[row["raw_tag"].strip()] = tag
    return table


def map_concepts(raw_concepts, mapping_table=None) -> frozenset:
    table = default_concept_map() if mapping_table is None else mapping_table
    out = set()
    for raw in raw_concepts:
        tag = table.get(raw)
        if tag is None:
            log.warning("dropping unmapped concept %r", raw)
            continue
        out.add(tag)
    return frozenset(out)


def canonicalize_tasks(corpus, mapping_table=None):
    """Return a corpus whose TaskSpecs carry canonical concepts."""
    tasks = {
        tid: replace(t, canonical_concepts=map_concepts(t.raw_concepts, mapping_table))
        for tid, t in corpus.tasks.items()
    }
    return corpus.with_tasks(tasks)


_LITERALS = {
    "python": re.compile(
        r'(?s)[rRbBuUfF]{0,2}(?:"""(?:\\.|.)*?"""|\'\'\'(?:\\.|.)*?\'\'\'|"(?:\\.|[^"\\\n])*"|\'(?:\\.|[^\'\\\n])*\')|#[^\n]*'
    ),
    "java": re.compile(r'(?s)"""(?:\\.|.)*?"""|"(?:\\.|[^"\\\n])*"|\'(?:\\.|[^\'\\\n])*\'|//[^\n]*|/\*.*?\*/'),
}


def strip_literals(source_code: str, language: str) -> str:
    """Blank out string/char literals and comments so patterns only see code tokens."""
    return _LITERALS[language].sub(" ", source_code)


@lru_cache(maxsize=None)
def default_patterns() -> dict:
    text = resources.files("ptmstruggle").joinpath("data/concept_patterns.csv").read_text(encoding="utf-8")
    table = {}
    for row in csv.DictReader(text.splitlines()):
        table[(row["language"], row["canonical_tag"])] = re.compile(row["pattern"])
    return table


def detect_concept_presence(source_code: str, concept: str, language: str = "python", patterns=None) -> bool:
    if language not in _LITERALS:
        raise ValueError(f"unsupported language {language!r}")
    table = default_patterns() if patterns is None else patterns
    pattern = table.get((language, concept))
    if pattern is None:
        return False
    return pattern.search(strip_literals(source_code, language)) is not None


def lacking_concepts_table(corpus, labels: dict, language: str = "python") -> list:
    """Share of student-task pairs whose final submission lacks a required concept.

    Returns rows ``(concept, group, n_pairs, pct_lacking)`` with group in
    {struggling, non_struggling}, one row per canonical concept and group.
    """
    counts = defaultdict(lambda: [0, 0])
    for (sid, tid), evs in corpus.pairs().items():
        task = corpus.tasks[tid]
        group = "struggling" if labels[(sid, tid)].label.value else "non_struggling"
        final = evs[-1].source_code
        for concept in task.canonical_concepts:
            cell = counts[(concept, group)]
            cell[0] += 1
            cell[1] += not detect_concept_presence(final, concept, language)
    rows = []
    for concept in CANONICAL_CONCEPTS:
        for group in ("struggling", "non_struggling"):
            n, lacking = counts.get((concept, group), (0, 0))
            rows.append((concept, group, n, 100.0 * lacking / n if n else 0.0))
    return rows
