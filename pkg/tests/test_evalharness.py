import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import event, make_corpus, task
from ptmstruggle.corpus import build_history
from ptmstruggle.errors import InsufficientHistory, KeyMismatch, SingleClass, TooFewStudents
from ptmstruggle.evalharness import (
    PredictionRecord,
    apply_protocol,
    bonferroni,
    calibration_error,
    fold_auc_summary,
    make_splits,
    paired_bootstrap,
    read_predictions,
    roc_auc,
    sensitivity_sweep,
    write_predictions,
    write_sensitivity,
)


def pairwise_auc(scores, labels):
    """O(P*N) Mann-Whitney count with exact rational arithmetic."""
    from fractions import Fraction

    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return float(wins / (len(pos) * len(neg)))


def binned_ece(probs, labels, n_bins=10):
    total = 0.0
    n = len(probs)
    for b in range(n_bins):
        members = [i for i, p in enumerate(probs) if min(int(p * n_bins), n_bins - 1) == b]
        if members:
            conf = np.mean([probs[i] for i in members])
            acc = np.mean([labels[i] for i in members])
            total += len(members) / n * abs(acc - conf)
    return total


def _records(scores, labels, students=None, model="m", fold=0):
    students = students or [f"s{i}" for i in range(len(scores))]
    return [PredictionRecord(s, f"t{i}", float(p), int(y), model, fold) for i, (s, p, y) in enumerate(zip(students, scores, labels))]


class TestSplits:
    def test_even_folds(self):
        plan = make_splits({f"s{i}" for i in range(10)}, k=5, seed=0)
        assert sorted(len(plan.test_students(f)) for f in range(5)) == [2] * 5

    def test_deterministic(self):
        students = {f"s{i}" for i in range(23)}
        assert make_splits(students, 5, 7) == make_splits(students, 5, 7)

    def test_too_few(self):
        with pytest.raises(TooFewStudents):
            make_splits({"a", "b", "c"}, k=5)

    def test_disjoint_and_complete(self):
        students = {f"s{i}" for i in range(17)}
        plan = make_splits(students, 5, 1)
        for f in range(5):
            assert not set(plan.test_students(f)) & set(plan.train_students(f))
            assert set(plan.test_students(f)) | set(plan.train_students(f)) == students


class TestProtocol:
    def _history(self, n):
        tasks = [task(f"t{i:02d}") for i in range(n)]
        return build_history(make_corpus(tasks, [event("s", t.task_id, 1, 3, minutes=i) for i, t in enumerate(tasks)]), "s")

    def test_fifty(self):
        sl = apply_protocol(self._history(50))
        assert (len(sl.context), len(sl.targets)) == (30, 20)

    def test_thirty_five(self):
        sl = apply_protocol(self._history(35))
        assert (len(sl.context), len(sl.targets)) == (30, 5)

    def test_thirty_is_too_short(self):
        with pytest.raises(InsufficientHistory):
            apply_protocol(self._history(30))


class TestAUC:
    def test_worked_example(self):
        assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75

    def test_separated(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert roc_auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(SingleClass):
            roc_auc([0.1, 0.2], [1, 1])

    def test_records_input(self):
        assert roc_auc(_records([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])) == 0.75

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]) | st.floats(0, 1), st.integers(0, 1)),
                    min_size=2, max_size=200).filter(lambda xs: 0 < sum(y for _, y in xs) < len(xs)))
    def test_matches_pairwise_oracle(self, data):
        scores, labels = zip(*data)
        assert roc_auc(scores, labels) == pairwise_auc(scores, labels)

    # grid scores keep exp and affine maps strictly monotone in floating point
    @given(st.lists(st.tuples(st.integers(-500, 500).map(lambda i: i / 100), st.integers(0, 1)), min_size=2, max_size=60)
           .filter(lambda xs: 0 < sum(y for _, y in xs) < len(xs)))
    def test_monotone_invariance(self, data):
        scores, labels = map(np.array, zip(*data))
        base = roc_auc(scores, labels)
        assert roc_auc(np.exp(scores), labels) == base
        assert roc_auc(3.0 * scores + 1.0, labels) == base


class TestECE:
    def test_calibrated(self):
        probs = [0.2] * 10 + [0.8] * 10
        labels = [1, 1] + [0] * 8 + [1] * 8 + [0, 0]
        assert calibration_error(probs, labels) == pytest.approx(0.0, abs=1e-15)

    def test_worst_case(self):
        assert calibration_error([1.0] * 5, [0] * 5) == 1.0

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=100, max_size=100))
    def test_matches_binning_oracle(self, data):
        probs, labels = zip(*data)
        assert calibration_error(probs, labels) == binned_ece(probs, labels)


class TestBootstrap:
    def _data(self, seed=0, n_students=30, per=5):
        rng = np.random.default_rng(seed)
        students = [f"s{i}" for i in range(n_students) for _ in range(per)]
        labels = rng.integers(0, 2, len(students))
        good = labels * 0.5 + rng.random(len(students)) * 0.7
        return students, labels, good

    def test_self_comparison(self):
        students, labels, good = self._data()
        recs = _records(good, labels, students)
        res = paired_bootstrap(recs, recs, B=500, seed=0)
        assert res.observed_delta == 0.0 and res.p_value == 1.0

    def test_dominance(self):
        students, labels, _ = self._data()
        perfect = _records(labels.astype(float), labels, students, "a")
        noise = _records(np.random.default_rng(9).random(len(labels)), labels, students, "b")
        res = paired_bootstrap(perfect, noise, B=1000, seed=1)
        assert res.observed_delta > 0 and res.p_value <= 2 / 1000

    def test_deterministic(self):
        students, labels, good = self._data()
        a = _records(good, labels, students)
        b = _records(good[::-1].copy(), labels, students)
        r1, r2 = paired_bootstrap(a, b, B=300, seed=5), paired_bootstrap(a, b, B=300, seed=5)
        assert r1.p_value == r2.p_value and np.array_equal(r1.deltas, r2.deltas)

    def test_weighted_auc_matches_duplication(self):
        from ptmstruggle.evalharness import _WeightedAUC

        students, labels, good = self._data(n_students=8, per=3)
        owner = np.array([int(s[1:]) for s in students])
        counts = np.array([[2, 0, 1, 0, 3, 1, 0, 1]], dtype=float)
        idx = np.concatenate([np.flatnonzero(owner == s).repeat(1) for s in range(8) for _ in range(int(counts[0, s]))])
        expected = roc_auc(good[idx], labels[idx])
        assert _WeightedAUC(good, labels, owner)(counts)[0] == pytest.approx(expected, abs=1e-12)

    def test_key_mismatch(self):
        a = _records([0.1, 0.9], [0, 1])
        b = _records([0.1, 0.9, 0.5], [0, 1, 1])
        with pytest.raises(KeyMismatch):
            paired_bootstrap(a, b, B=10)


class TestBonferroni:
    def test_example(self):
        assert bonferroni([0.01, 0.04, 0.20], 0.05) == [True, False, False]

    def test_empty(self):
        assert bonferroni([]) == []

    def test_zero(self):
        assert bonferroni([0.0]) == [True]

    def test_invalid(self):
        with pytest.raises(ValueError):
            bonferroni([1.2])


def test_fold_summary():
    recs = _records([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0], fold=0) + _records([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0], fold=1)
    summary = fold_auc_summary(recs)
    assert summary["per_fold"] == {0: 1.0, 1: 0.75}
    assert summary["mean"] == 0.875
    assert summary["std"] == pytest.approx(np.std([1.0, 0.75], ddof=1))


def test_sensitivity_identity_and_length(prepared):
    samples = [prepared.samples[s] for s in sorted(prepared.samples)]

    def predict_fn(fold, cut):
        # score = share of struggled context tasks; varies with kept length
        return [np.full(len(s.target_task_ids), s.struggle.mean()) for s in cut]

    folds = {0: samples[:30], 1: samples[30:]}
    curve = sensitivity_sweep(predict_fn, folds, range(1, 31))
    assert [n for n, _ in curve] == list(range(1, 31))
    full = np.mean([roc_auc(np.concatenate(predict_fn(f, s)), np.concatenate([x.labels for x in s])) for f, s in folds.items()])
    assert curve[-1][1] == full


def test_file_round_trip(tmp_path):
    recs = _records([0.123456789012345, 0.5], [1, 0])
    write_predictions(recs, tmp_path / "p.csv")
    assert read_predictions(tmp_path / "p.csv") == recs
    write_sensitivity([(1, 0.5), (2, 0.75)], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["length,auc", "1,0.5", "2,0.75"]
