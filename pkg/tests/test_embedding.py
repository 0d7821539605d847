import math
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refineloop.embedding import (
    EmbeddingCache,
    HashMockEmbedder,
    RemoteEmbeddingClient,
    cosine,
    embed,
    serialize_codebase,
)
from refineloop.errors import BackendUnavailable, DimensionMismatch, EmptyText, ZeroVector


def test_mock_vector_is_unit_norm_with_configured_dim():
    v = embed(HashMockEmbedder(dim=64), "graph attention autoencoder")
    assert v.shape == (64,)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def test_mock_is_deterministic():
    e = HashMockEmbedder(dim=128, seed=3)
    assert np.array_equal(embed(e, "spatial domains"), embed(HashMockEmbedder(dim=128, seed=3), "spatial domains"))


def test_empty_text_rejected():
    with pytest.raises(EmptyText):
        embed(HashMockEmbedder(), "")
    with pytest.raises(EmptyText):
        embed(HashMockEmbedder(), "   ")


def test_long_text_truncated_with_warning(caplog):
    e = HashMockEmbedder(max_chars=10)
    with caplog.at_level("WARNING"):
        v = embed(e, "graph attention " * 10)
    assert "truncating" in caplog.text
    assert np.array_equal(v, embed(e, ("graph attention " * 10)[:10]))


def test_cosine_examples():
    v = np.array([0.3, -1.0, 2.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine([1, 0], [1, 0, 0])
    with pytest.raises(ZeroVector):
        cosine([0, 0], [1, 0])


vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3).filter(
    lambda xs: np.linalg.norm(xs) > 1e-6)


@settings(max_examples=300, deadline=None)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, s):
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)
    assert cosine(a, np.array(a) * s) == pytest.approx(1.0, abs=1e-9)


def test_shared_vocabulary_raises_similarity():
    e = HashMockEmbedder(dim=512)
    base = embed(e, "graph attention autoencoder for spatial domains")
    near = embed(e, "spatial domains with a graph attention encoder")
    far = embed(e, "weather prediction using recurrent units")
    assert cosine(base, near) > cosine(base, far)


class CountingEmbedder(HashMockEmbedder):
    def __init__(self, **kw):
        super().__init__(**kw)
        self.calls = 0

    def embed_text(self, text):
        self.calls += 1
        return super().embed_text(text)


def test_cache_embeds_once(tmp_path):
    backend = CountingEmbedder(dim=32)
    cache = EmbeddingCache(backend)
    a = cache.get("abc def")
    b = cache.get("abc def")
    assert backend.calls == 1 and np.array_equal(a, b)
    assert cache.hits == 1 and cache.misses == 1


def test_cache_persists_vector_files(tmp_path):
    backend = CountingEmbedder(dim=16)
    cache = EmbeddingCache(backend, tmp_path)
    v = cache.get("persist me")
    files = list(tmp_path.glob("*.vec"))
    assert len(files) == 1
    raw = files[0].read_bytes()
    magic, dim, blen = struct.unpack_from("<4sIH", raw)
    assert magic == b"RLEV" and dim == 16
    assert raw[10 : 10 + blen].decode() == backend.backend_id

    other = CountingEmbedder(dim=16)
    again = EmbeddingCache(other, tmp_path).get("persist me")
    assert other.calls == 0
    assert np.array_equal(v, again)


def test_cache_thread_safety():
    cache = EmbeddingCache(HashMockEmbedder(dim=32))
    texts = [f"text {i % 7}" for i in range(200)]
    out = {}

    def work(i):
        out[i] = cache.get(texts[i])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(texts))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i, t in enumerate(texts):
        assert np.array_equal(out[i], cache.get(t))


def test_serialize_codebase_is_path_ordered_and_truncated():
    text = serialize_codebase({"b.py": "B", "a.py": "A"})
    assert text.index("### a.py") < text.index("### b.py")
    assert len(serialize_codebase({"a.py": "x" * 100}, max_chars=20)) == 20


class FakeResponse:
    def __init__(self, status, body):
        self.status_code = status
        self._body = body

    def raise_for_status(self):
        import requests
        if self.status_code >= 400:
            raise requests.HTTPError(str(self.status_code))

    def json(self):
        return self._body


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.bodies = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.bodies.append(json)
        return self.responses.pop(0)


def test_remote_client_parses_embedding(monkeypatch):
    monkeypatch.setenv("TEST_EMBED_KEY", "k")
    session = FakeSession([FakeResponse(200, {"data": [{"embedding": [0.0, 3.0, 4.0]}]})])
    client = RemoteEmbeddingClient("http://x/embeddings", "m", 3, "TEST_EMBED_KEY", session=session)
    v = embed(client, "hello")
    assert list(v) == [0.0, 3.0, 4.0]
    assert session.bodies[0] == {"model": "m", "input": ["hello"]}


def test_remote_client_gives_up(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda s: None)
    session = FakeSession([FakeResponse(500, {})] * 3)
    client = RemoteEmbeddingClient("http://x/embeddings", "m", 3, max_retries=3, session=session)
    with pytest.raises(BackendUnavailable):
        embed(client, "hello")
