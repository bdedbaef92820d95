import numpy as np
import pytest

from ptmstruggle.errors import UnknownTaskId
from ptmstruggle.features import TaskVocab, collate, truncate_context
from ptmstruggle.tbpp import estimate_tbpp


def test_sample_layout(prepared):
    s = prepared.samples[sorted(prepared.samples)[0]]
    assert s.n_context == 30 and len(s.target_task_ids) == 10
    assert s.context_req.shape == (30, 13) and s.target_req.shape == (10, 13)
    assert s.target_text.shape == (10, prepared.text_dim)
    assert all(c.shape[1] == prepared.code_dim for c in s.codes)
    np.testing.assert_array_equal(s.tbpp_target, estimate_tbpp(zip(s.context_req.astype(int), s.scores.astype(float))).astype(np.float32))


def test_labels_match_labeling(prepared):
    s = prepared.samples[sorted(prepared.samples)[0]]
    expected = [prepared.labels[(s.student_id, t)].label.value for t in s.target_task_ids]
    assert s.labels.tolist() == [float(v) for v in expected]


def test_truncate_keeps_recent(prepared):
    s = prepared.samples[sorted(prepared.samples)[0]]
    cut = truncate_context(s, 5)
    assert cut.context_task_ids == s.context_task_ids[-5:]
    assert cut.target_task_ids == s.target_task_ids
    assert truncate_context(s, 30).context_task_ids == s.context_task_ids
    with pytest.raises(ValueError):
        truncate_context(s, 0)


def test_collate_padding(prepared):
    samples = [prepared.samples[s] for s in sorted(prepared.samples)[:3]]
    samples[0] = truncate_context(samples[0], 4)
    b = collate(samples, prepared.vocab)
    assert b.n_tasks.tolist() == [4, 30, 30]
    assert (b.attempt_len[0, 4:] == 0).all() and (b.context_idx[0, 4:] == 0).all()
    assert b.target_mask.all()
    assert (b.context_idx[1:] > 0).all()


def test_vocab():
    v = TaskVocab(["b", "a"])
    assert (v["a"], v["b"], len(v)) == (1, 2, 2)
    with pytest.raises(UnknownTaskId):
        v["c"]
