"""Fixed-dimension text/code embeddings with a persistent content-addressed cache.

Two backends are provided:

* :class:`HashingEncoder` -- token n-gram feature hashing with signed counts,
  L2-normalised.  Pure, dependency-free, used by the test suite.
* :class:`TransformerEncoder` -- mean-pooled last hidden states of a pretrained
  Hugging Face model (CodeBERT for code, BERT for task text).  Inputs longer
  than ``max_length`` tokens keep their first ``max_length`` tokens.

Cache layout::

    <root>/<backend>/index.tsv              key, dim, relative path
    <root>/<backend>/<key[:2]>/<key>.vec    D little-endian float32 values
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import tempfile
import threading
from pathlib import Path

import numpy as np

from .errors import BackendUnavailable, CacheCorrupt

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"\w+|[^\w\s]")


class HashingEncoder:
    deterministic = True

    def __init__(self, dim: int = 64, ngram: int = 2):
        if dim < 1 or ngram < 1:
            raise ValueError("dim and ngram must be positive")
        self.dim = dim
        self.ngram = ngram
        self.name = f"hashing-{dim}-n{ngram}"

    def _bucket(self, feature: str):
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        return value % self.dim, 1.0 if (value >> 63) & 1 else -1.0

    def encode(self, text: str) -> np.ndarray:
        tokens = _TOKEN.findall(text)
        vec = np.zeros(self.dim, dtype=np.float64)
        for n in range(1, self.ngram + 1):
            for i in range(len(tokens) - n + 1):
                idx, sign = self._bucket(f"{n}\x1f" + "\x1f".join(tokens[i : i + n]))
                vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


class TransformerEncoder:
    """Mean-pooled pretrained encoder; weights must already be present locally."""

    deterministic = True

    def __init__(self, model_name: str = "microsoft/codebert-base", max_length: int = 512, pooling: str = "mean"):
        if pooling not in ("mean", "cls"):
            raise ValueError(f"unknown pooling {pooling!r}")
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer

            self._tokenizer = AutoTokenizer.from_pretrained(model_name, local_files_only=True)
            self._model = AutoModel.from_pretrained(model_name, local_files_only=True).eval()
        except Exception as exc:  # missing weights, no transformers, offline hub
            raise BackendUnavailable(f"cannot load pretrained encoder {model_name!r}: {exc}") from exc
        self._torch = torch
        self.model_name = model_name
        self.max_length = max_length
        self.pooling = pooling
        self.dim = int(self._model.config.hidden_size)
        self.name = f"{model_name.replace('/', '__')}-{pooling}-{max_length}"

    def encode(self, text: str) -> np.ndarray:
        torch = self._torch
        batch = self._tokenizer(text, truncation=True, max_length=self.max_length, return_tensors="pt")
        with torch.no_grad():
            hidden = self._model(**batch).last_hidden_state[0]
        if self.pooling == "cls":
            return hidden[0].double().numpy()
        mask = batch["attention_mask"][0].unsqueeze(-1).to(hidden.dtype)
        return ((hidden * mask).sum(0) / mask.sum()).double().numpy()


def make_backend(kind: str = "hashing", **kwargs):
    if kind == "hashing":
        return HashingEncoder(**kwargs)
    if kind == "transformer":
        return TransformerEncoder(**kwargs)
    raise ValueError(f"unknown encoder backend {kind!r}")


class EmbeddingCache:
    """Content-addressed float32 vector store keyed by (backend, D, sha256(text)).

    ``root=None`` keeps vectors in memory only.  Writes go through a lock and
    an atomic rename, so concurrent readers never see partial vectors.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self.hits = 0
        self.misses = 0
        self._memory = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _path(self, backend, key):
        return self.root / backend.name / key[:2] / f"{key}.vec"

    def _read(self, backend, key):
        path = self._path(backend, key)
        if not path.exists():
            return None
        data = path.read_bytes()
        if len(data) != 4 * backend.dim:
            raise CacheCorrupt(f"{path}: expected {4 * backend.dim} bytes, found {len(data)}")
        vec = np.frombuffer(data, dtype="<f4").copy()
        if not np.isfinite(vec).all():
            raise CacheCorrupt(f"{path}: non-finite entries")
        return vec

    def _write(self, backend, key, vec):
        path = self._path(backend, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(vec.astype("<f4").tobytes())
        os.replace(tmp, path)
        with open(self.root / backend.name / "index.tsv", "a", encoding="utf-8") as fh:
            fh.write(f"{key}\t{backend.dim}\t{path.relative_to(self.root / backend.name).as_posix()}\n")

    def get(self, text: str, backend) -> np.ndarray:
        key = self.key(text)
        mem_key = (backend.name, backend.dim, key)
        vec = self._memory.get(mem_key)
        if vec is None and self.root is not None:
            vec = self._read(backend, key)
            if vec is not None:
                self._memory[mem_key] = vec
        if vec is not None:
            self.hits += 1
            return vec
        self.misses += 1
        raw = np.asarray(backend.encode(text), dtype=np.float64)
        if raw.shape != (backend.dim,) or not np.isfinite(raw).all():
            raise ValueError(f"backend {backend.name} returned an invalid vector")
        vec = raw.astype("<f4")
        with self._lock:
            self._memory[mem_key] = vec
            if self.root is not None:
                self._write(backend, key, vec)
        return vec

    def verify_index(self, backend) -> int:
        """Check every indexed vector is present and well-formed; returns the count."""
        index = self.root / backend.name / "index.tsv"
        if not index.exists():
            return 0
        n = 0
        for line in index.read_text(encoding="utf-8").splitlines():
            key, dim, rel = line.split("\t")
            if int(dim) != backend.dim or not (self.root / backend.name / rel).exists():
                raise CacheCorrupt(f"index entry {key} does not match the store")
            self._read(backend, key)
            n += 1
        return n


def embed_code(source_code: str, backend, cache: EmbeddingCache) -> np.ndarray:
    return cache.get(source_code, backend)


def embed_task_text(prompt_text: str, backend, cache: EmbeddingCache) -> np.ndarray:
    if not prompt_text.strip():
        log.warning("task prompt is empty or whitespace only")
    return cache.get(prompt_text, backend)
