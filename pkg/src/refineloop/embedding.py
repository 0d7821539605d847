"""Dense text embeddings and cosine similarity.

Two backends share the :class:`EmbedderBackend` protocol: a remote HTTP
embedding service and :class:`HashMockEmbedder`, a deterministic feature
hashing embedder used for offline runs. :class:`EmbeddingCache` memoizes
vectors by (backend id, content digest), optionally on disk.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import threading
import time
from pathlib import Path
from typing import Mapping, Optional, Protocol, runtime_checkable

import numpy as np
import requests

from .errors import BackendUnavailable, DimensionMismatch, EmptyText, ZeroVector

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError("embedding must be a non-empty 1-D array")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite entries")
    return vec


def cosine(a, b) -> float:
    """Cosine similarity clamped to [-1, 1]."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dim {a.size} != {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for a zero vector")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def content_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@runtime_checkable
class EmbedderBackend(Protocol):
    backend_id: str
    dim: int
    max_chars: int

    def embed_text(self, text: str) -> np.ndarray: ...


_STOPWORDS = frozenset(
    "a an the and or of to in on for with by is are be been was were we our this that these it its as at "
    "from into via using use used than then also which while when where each all both can".split()
)


class HashMockEmbedder:
    """Signed feature hashing over lowercase content tokens and bigrams.

    Texts sharing vocabulary get positive cosine similarity, which keeps the
    scoring pipeline meaningful without a model. Common English stopwords are
    skipped so shared phrasing does not swamp topical overlap. Output is unit norm.
    """

    def __init__(self, dim: int = 256, seed: int = 0, max_chars: int = 32_768):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.max_chars = max_chars
        self.backend_id = f"hash-mock-{dim}-{seed}"

    def _bucket(self, feature: str) -> tuple[int, float]:
        h = hashlib.blake2b(f"{self.seed}:{feature}".encode("utf-8"), digest_size=8).digest()
        n = int.from_bytes(h, "little")
        return n % self.dim, 1.0 if (n >> 63) & 1 else -1.0

    def embed_text(self, text: str) -> np.ndarray:
        tokens = [t for t in _TOKEN_RE.findall(text.lower()) if t not in _STOPWORDS]
        features = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
        if not features:
            features = [text]
        vec = np.zeros(self.dim, dtype=np.float64)
        for feat in features:
            idx, sign = self._bucket(feat)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # all features cancelled out; fall back to the raw text bucket
            idx, sign = self._bucket("\x00" + text)
            vec[idx] = sign
            norm = 1.0
        return vec / norm


class RemoteEmbeddingClient:
    """Client for an OpenAI-style ``/embeddings`` endpoint.

    The request body is ``{"model": ..., "input": [text]}`` and the vector is
    read from ``data[0].embedding``. The auth token comes from the environment
    variable named by ``api_key_env``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        api_key_env: str = "REFINELOOP_EMBED_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        max_chars: int = 32_768,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.max_chars = max_chars
        self.backend_id = f"remote-{model}"
        self._session = session or requests.Session()

    def embed_text(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.model, "input": [text]}
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                vec = as_vector(resp.json()["data"][0]["embedding"])
                if vec.size != self.dim:
                    raise DimensionMismatch(f"endpoint returned dim {vec.size}, expected {self.dim}")
                return vec
            except DimensionMismatch:
                raise
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                logger.warning("embedding request failed (attempt %d/%d): %s", attempt + 1, self.max_retries, exc)
                time.sleep(min(2.0 ** attempt, 10.0) if attempt + 1 < self.max_retries else 0)
        raise BackendUnavailable(f"embedding endpoint {self.endpoint} unavailable: {last_error}")


def embed(backend: EmbedderBackend, text: str) -> np.ndarray:
    if not text or not text.strip():
        raise EmptyText("cannot embed empty text")
    if len(text) > backend.max_chars:
        logger.warning("truncating %d chars to backend limit %d", len(text), backend.max_chars)
        text = text[: backend.max_chars]
    vec = as_vector(backend.embed_text(text))
    if vec.size != backend.dim:
        raise DimensionMismatch(f"backend produced dim {vec.size}, expected {backend.dim}")
    return vec


_HEADER = struct.Struct("<4sIH")  # magic, dim, backend id length
_MAGIC = b"RLEV"


class EmbeddingCache:
    """Thread-safe memo of embeddings keyed by (backend id, content digest).

    With ``directory`` set, vectors persist as ``<digest>.vec`` files holding a
    small header (magic, dim, backend id) followed by float64 values.
    """

    def __init__(self, backend: EmbedderBackend, directory: Optional[Path] = None):
        self.backend = backend
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, digest: str) -> Path:
        bid = hashlib.sha256(self.backend.backend_id.encode()).hexdigest()[:12]
        return self.directory / f"{bid}-{digest}.vec"

    def _read(self, path: Path) -> Optional[np.ndarray]:
        raw = path.read_bytes()
        magic, dim, blen = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            return None
        bid = raw[_HEADER.size : _HEADER.size + blen].decode("utf-8")
        if bid != self.backend.backend_id or dim != self.backend.dim:
            return None
        return np.frombuffer(raw[_HEADER.size + blen :], dtype="<f8").copy()

    def _write(self, path: Path, vec: np.ndarray) -> None:
        bid = self.backend.backend_id.encode("utf-8")
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(_HEADER.pack(_MAGIC, vec.size, len(bid)) + bid + vec.astype("<f8").tobytes())
        os.replace(tmp, path)

    def get(self, text: str) -> np.ndarray:
        key = (self.backend.backend_id, content_digest(text))
        with self._lock:
            if key in self._mem:
                self.hits += 1
                return self._mem[key]
        vec = None
        if self.directory is not None:
            path = self._path(key[1])
            if path.exists():
                vec = self._read(path)
        if vec is None:
            vec = embed(self.backend, text)
            with self._lock:
                self.misses += 1
            if self.directory is not None:
                self._write(self._path(key[1]), vec)
        else:
            with self._lock:
                self.hits += 1
        with self._lock:
            self._mem[key] = vec
        return vec


def serialize_codebase(files: Mapping[str, str], max_chars: Optional[int] = None) -> str:
    """Concatenate source files in sorted path order, each under a path header."""
    parts = [f"### {path}\n{files[path]}" for path in sorted(files)]
    text = "\n".join(parts)
    if max_chars is not None and len(text) > max_chars:
        text = text[:max_chars]
    return text
