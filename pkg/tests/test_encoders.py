import logging
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptmstruggle.encoders import (
    EmbeddingCache,
    HashingEncoder,
    TransformerEncoder,
    embed_code,
    embed_task_text,
    make_backend,
)
from ptmstruggle.errors import BackendUnavailable, CacheCorrupt

PROMPT = (
    "Given a string and a non-empty word string, return a version of the original string where all chars "
    "have been replaced by pluses, except for appearances of the word string which are preserved unchanged."
)


def test_cache_hit_on_repeat():
    enc, cache = HashingEncoder(64), EmbeddingCache()
    a = embed_code("x = 1", enc, cache)
    b = embed_code("x = 1", enc, cache)
    assert np.array_equal(a, b)
    assert (cache.misses, cache.hits) == (1, 1)


def test_distinct_sources():
    enc, cache = HashingEncoder(64), EmbeddingCache()
    assert not np.array_equal(embed_code("x=1", enc, cache), embed_code("x=2", enc, cache))


def test_empty_string():
    vec = embed_code("", HashingEncoder(64), EmbeddingCache())
    assert vec.shape == (64,) and np.isfinite(vec).all()


def test_prompt_embedding():
    enc, cache = HashingEncoder(48), EmbeddingCache()
    vec = embed_task_text(PROMPT, enc, cache)
    assert vec.shape == (48,) and vec.dtype == np.float32
    embed_task_text(PROMPT, enc, cache)
    assert cache.hits == 1


def test_identical_prompts_identical_vectors():
    enc = HashingEncoder(32)
    assert np.array_equal(embed_task_text("same", enc, EmbeddingCache()), embed_task_text("same", enc, EmbeddingCache()))


def test_whitespace_prompt_warns(caplog):
    with caplog.at_level(logging.WARNING):
        vec = embed_task_text("   \n", HashingEncoder(16), EmbeddingCache())
    assert vec.shape == (16,) and "whitespace" in caplog.text


def test_unit_norm():
    vec = HashingEncoder(64).encode("for i in range(3): print(i)")
    assert abs(np.linalg.norm(vec) - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=200))
def test_persisted_round_trip(tmp_path_factory, text):
    root = tmp_path_factory.mktemp("cache")
    enc = HashingEncoder(24)
    first = embed_code(text, enc, EmbeddingCache(root))
    fresh = EmbeddingCache(root)
    again = embed_code(text, enc, fresh)
    assert first.tobytes() == again.tobytes()
    assert fresh.hits == 1 and fresh.misses == 0
    assert np.isfinite(again).all()


@given(st.text(max_size=100))
def test_hashing_is_pure(text):
    assert np.array_equal(HashingEncoder(16).encode(text), HashingEncoder(16).encode(text))


def test_layout_and_index(tmp_path):
    enc, cache = HashingEncoder(8), EmbeddingCache(tmp_path)
    embed_code("a = 1", enc, cache)
    key = EmbeddingCache.key("a = 1")
    path = tmp_path / enc.name / key[:2] / f"{key}.vec"
    assert path.stat().st_size == 8 * 4
    assert cache.verify_index(enc) == 1


def test_truncated_vector_is_corrupt(tmp_path):
    enc = HashingEncoder(8)
    embed_code("a = 1", enc, EmbeddingCache(tmp_path))
    key = EmbeddingCache.key("a = 1")
    (tmp_path / enc.name / key[:2] / f"{key}.vec").write_bytes(b"\0" * 5)
    with pytest.raises(CacheCorrupt):
        embed_code("a = 1", enc, EmbeddingCache(tmp_path))


def test_non_finite_vector_is_corrupt(tmp_path):
    enc = HashingEncoder(2)
    embed_code("b", enc, EmbeddingCache(tmp_path))
    key = EmbeddingCache.key("b")
    (tmp_path / enc.name / key[:2] / f"{key}.vec").write_bytes(np.array([np.nan, 0], dtype="<f4").tobytes())
    with pytest.raises(CacheCorrupt):
        embed_code("b", enc, EmbeddingCache(tmp_path))


def test_backends_do_not_collide(tmp_path):
    cache = EmbeddingCache(tmp_path)
    a = embed_code("x", HashingEncoder(8), cache)
    b = embed_code("x", HashingEncoder(16), cache)
    assert a.shape == (8,) and b.shape == (16,)


def test_concurrent_writers(tmp_path):
    enc, cache = HashingEncoder(16), EmbeddingCache(tmp_path)
    texts = [f"v = {i}" for i in range(50)]

    def work():
        for t in texts:
            embed_code(t, enc, cache)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    fresh = EmbeddingCache(tmp_path)
    for t in texts:
        assert np.array_equal(embed_code(t, enc, fresh), enc.encode(t).astype(np.float32))


def test_missing_pretrained_weights():
    with pytest.raises(BackendUnavailable):
        TransformerEncoder("no-such-org/no-such-model")


def test_make_backend():
    assert isinstance(make_backend("hashing", dim=8), HashingEncoder)
    with pytest.raises(ValueError):
        make_backend("word2vec")
