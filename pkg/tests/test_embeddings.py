"""Embedding backends, normalization, batch caching, and the vector store."""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from pkre.embeddings import (
    STORE_MAGIC,
    EmbeddingError,
    EmbeddingProvider,
    ProviderConfig,
    cosine,
    normalize,
    read_vector_store,
    text_hash,
    write_vector_store,
)

from conftest import DIM

# -- primitives ---------------------------------------------------------------


def test_normalize_three_four():
    out = normalize([3.0, 4.0])
    assert out.dtype == np.float32
    assert np.allclose(out, [0.6, 0.8])
    assert np.isclose(np.linalg.norm(out.astype(np.float64)), 1.0, atol=1e-6)


def test_normalize_is_idempotent():
    vec = np.random.default_rng(3).standard_normal(16)
    once = normalize(vec)
    assert np.allclose(normalize(once), once, atol=1e-6)


@pytest.mark.parametrize(
    "vec,needle",
    [
        ([0.0, 0.0], "zero vector"),
        ([1.0, float("nan")], "NaN or Inf"),
        ([[1.0, 0.0]], "1-d"),
    ],
)
def test_normalize_rejects(vec, needle):
    with pytest.raises(EmbeddingError, match=needle):
        normalize(vec)


def test_cosine_bounds_and_identity():
    vec = np.array([1.0, 2.0, 3.0])
    assert cosine(vec, vec) == 1.0
    assert cosine(vec, -vec) == -1.0
    assert cosine([1, 0], [0, 1]) == 0.0


def test_text_hash_is_sha256():
    assert text_hash("abc") == hashlib.sha256(b"abc").digest()


def test_provider_config_from_dict_keeps_unknown_keys():
    cfg = ProviderConfig.from_dict({"backend": "hash", "dimension": 8, "model": "x"})
    assert cfg.dimension == 8
    assert cfg.extra == {"model": "x"}


@pytest.mark.parametrize(
    "raw",
    [
        {"backend": "faiss"},
        {"backend": "hash", "dimension": 0},
        {"backend": "hash", "batch_size": 0},
        {"backend": "http"},  # no endpoint
        {"backend": "hash", "endpoint": "http://x"},  # endpoint without http
        {"backend": "file"},  # no store path
    ],
)
def test_provider_config_validation(raw):
    with pytest.raises(ValueError):
        ProviderConfig.from_dict(raw)


# -- hash backend and caching --------------------------------------------------


def test_hash_backend_is_deterministic(provider):
    again = EmbeddingProvider(ProviderConfig(backend="hash", dimension=DIM))
    a = provider.embed("some pattern text")
    b = again.embed("some pattern text")
    assert a.dtype == np.float32 and a.shape == (DIM,)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, provider.embed("other text"))


def test_embed_batch_preserves_order_and_dedups(provider, monkeypatch):
    fetched: list[list[str]] = []
    real_fetch = provider._backend.fetch

    def counting_fetch(texts):
        fetched.append(list(texts))
        return real_fetch(texts)

    monkeypatch.setattr(provider._backend, "fetch", counting_fetch)
    texts = ["a", "b", "a", "c", "b"]
    out = provider.embed_batch(texts)
    assert out.shape == (5, DIM)
    assert np.array_equal(out[0], out[2]) and np.array_equal(out[1], out[4])
    assert fetched == [["a", "b", "c"]]  # unique texts, one backend call
    provider.embed_batch(["c", "a"])  # now fully cached
    assert len(fetched) == 1


def test_embed_batch_rejects_empty_text(provider):
    with pytest.raises(EmbeddingError, match="non-empty"):
        provider.embed_batch(["ok", ""])


def test_fetches_run_in_configured_chunks(monkeypatch):
    provider = EmbeddingProvider(ProviderConfig(backend="hash", dimension=8, batch_size=2))
    sizes = []
    real_fetch = provider._backend.fetch

    def counting_fetch(texts):
        sizes.append(len(texts))
        return real_fetch(texts)

    monkeypatch.setattr(provider._backend, "fetch", counting_fetch)
    provider.embed_batch([f"t{i}" for i in range(5)])
    assert sizes == [2, 2, 1]


def test_disk_cache_survives_restart(tmp_path):
    cache = tmp_path / "cache.pkev"
    first = EmbeddingProvider(
        ProviderConfig(backend="hash", dimension=DIM, cache_path=str(cache))
    )
    vec = first.embed("cached text")
    assert cache.exists()

    second = EmbeddingProvider(
        ProviderConfig(backend="hash", dimension=DIM, cache_path=str(cache))
    )

    def explode(texts):  # any backend traffic means the cache was ignored
        raise AssertionError("backend consulted despite warm cache")

    second._backend.fetch = explode
    assert np.array_equal(second.embed("cached text"), vec)


def test_clear_memory_cache_refetches_identically(provider):
    before = provider.embed("stable")
    provider.clear_memory_cache()
    assert np.array_equal(provider.embed("stable"), before)


# -- vector store -------------------------------------------------------------


def test_vector_store_round_trip(tmp_path):
    path = tmp_path / "store.pkev"
    vectors = {
        "alpha": np.arange(4, dtype=np.float32),
        "beta": np.ones(4, dtype=np.float32),
    }
    write_vector_store(path, vectors, dimension=4)
    dimension, by_hash, texts = read_vector_store(path)
    assert dimension == 4
    assert set(texts.values()) == {"alpha", "beta"}
    for digest, text in texts.items():
        assert np.array_equal(by_hash[digest], vectors[text])


def test_vector_store_rejects_bad_magic(tmp_path):
    path = tmp_path / "store.pkev"
    path.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(EmbeddingError, match="bad magic"):
        read_vector_store(path)


def test_vector_store_rejects_truncation(tmp_path):
    path = tmp_path / "store.pkev"
    write_vector_store(path, {"a": np.zeros(4, dtype=np.float32)}, dimension=4)
    data = path.read_bytes()
    assert data[:4] == STORE_MAGIC
    path.write_bytes(data[:-8])
    with pytest.raises(EmbeddingError, match="truncated"):
        read_vector_store(path)


def test_vector_store_rejects_wrong_shape(tmp_path):
    with pytest.raises(EmbeddingError, match="shape"):
        write_vector_store(tmp_path / "s.pkev", {"a": np.zeros(3)}, dimension=4)


# -- file backend -------------------------------------------------------------


def test_file_backend_serves_precomputed_vectors(tmp_path):
    path = tmp_path / "store.pkev"
    raw = np.array([3.0, 4.0, 0.0, 0.0], dtype=np.float32)
    write_vector_store(path, {"the pattern": raw}, dimension=4)
    provider = EmbeddingProvider(
        ProviderConfig(backend="file", dimension=4, path=str(path))
    )
    out = provider.embed("the pattern")
    assert np.allclose(out, [0.6, 0.8, 0.0, 0.0])  # normalized on the way out
    with pytest.raises(EmbeddingError, match="no embedding stored for text 'missing'"):
        provider.embed("missing")


def test_file_backend_checks_dimension(tmp_path):
    path = tmp_path / "store.pkev"
    write_vector_store(path, {"a": np.ones(4, dtype=np.float32)}, dimension=4)
    with pytest.raises(EmbeddingError, match="dimension"):
        EmbeddingProvider(ProviderConfig(backend="file", dimension=8, path=str(path)))


# -- http backend -------------------------------------------------------------


class _FakeReply:
    def __init__(self, payload):
        self._payload = payload

    def raise_for_status(self):
        pass

    def json(self):
        return self._payload


def http_provider(dimension=4) -> EmbeddingProvider:
    return EmbeddingProvider(
        ProviderConfig(backend="http", dimension=dimension, endpoint="http://encoder.test")
    )


def test_http_backend_posts_to_embed_route(monkeypatch):
    seen = {}

    def fake_post(url, json=None, timeout=None):
        seen["url"], seen["texts"] = url, json["texts"]
        return _FakeReply({"vectors": [[1.0, 0.0, 0.0, 0.0]] * len(json["texts"])})

    monkeypatch.setattr("pkre.embeddings.requests.post", fake_post)
    out = http_provider().embed_batch(["x", "y"])
    assert seen["url"] == "http://encoder.test/embed"
    assert seen["texts"] == ["x", "y"]
    assert out.shape == (2, 4)


def test_http_backend_rejects_dimension_mismatch(monkeypatch):
    def fake_post(url, json=None, timeout=None):
        return _FakeReply({"vectors": [[1.0, 0.0] for _ in json["texts"]]})

    monkeypatch.setattr("pkre.embeddings.requests.post", fake_post)
    with pytest.raises(EmbeddingError, match="expected"):
        http_provider(dimension=4).embed("x")


def test_http_backend_rejects_misaligned_reply(monkeypatch):
    monkeypatch.setattr(
        "pkre.embeddings.requests.post",
        lambda url, json=None, timeout=None: _FakeReply({"embeddings": []}),
    )
    with pytest.raises(EmbeddingError, match="vectors"):
        http_provider().embed("x")


def test_http_backend_wraps_transport_errors():
    provider = EmbeddingProvider(
        ProviderConfig(backend="http", dimension=4, endpoint="http://127.0.0.1:9", timeout=0.2)
    )
    with pytest.raises(EmbeddingError, match="unreachable"):
        provider.embed("x")


class _StubEncoder(BaseHTTPRequestHandler):
    dimension = 6

    def do_POST(self):
        assert self.path == "/embed"
        length = int(self.headers["Content-Length"])
        texts = json.loads(self.rfile.read(length))["texts"]
        vectors = []
        for text in texts:
            rng = np.random.default_rng(len(text))
            vectors.append([float(x) for x in rng.standard_normal(self.dimension)])
        body = json.dumps({"vectors": vectors}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_encoder():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubEncoder)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_backend_against_live_stub(stub_encoder):
    provider = EmbeddingProvider(
        ProviderConfig(backend="http", dimension=6, endpoint=stub_encoder)
    )
    out = provider.embed_batch(["abc", "defg", "abc"])
    assert out.shape == (3, 6)
    assert np.array_equal(out[0], out[2])
    assert np.allclose(np.linalg.norm(out.astype(np.float64), axis=1), 1.0, atol=1e-6)
