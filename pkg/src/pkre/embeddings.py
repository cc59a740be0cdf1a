"""Pluggable text-embedding backends with a persistent cache.

Three backends share one contract (a batch of strings in, one unit-norm
float32 vector per string out):

* ``file`` reads a precomputed binary vector store for fully offline runs;
* ``http`` POSTs to an external encoder service (``/embed``);
* ``hash`` derives a deterministic pseudo-random vector from each text's
  SHA-256 digest — no semantics, but stable, which makes whole-pipeline runs
  and tests reproducible without any model.

Vector store layout: header ``PKEV`` + dimension (u32 LE) + count (u64 LE),
then per record a 32-byte SHA-256 of the UTF-8 text followed by ``dimension``
float32 LE values.  A plain-text manifest alongside maps each hash back to
its original text for audit.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import requests

STORE_MAGIC = b"PKEV"
_HEADER = struct.Struct("<4sIQ")
DEFAULT_DIMENSION = 768

BACKENDS = ("file", "http", "hash")


class EmbeddingError(Exception):
    """Backend unreachable, malformed reply, or missing/invalid vector."""


def normalize(vector: np.ndarray | Sequence[float]) -> np.ndarray:
    """Scale to unit L2 norm (float32); a zero or non-finite vector raises."""
    arr = np.asarray(vector, dtype=np.float64)
    if arr.ndim != 1:
        raise EmbeddingError(f"expected a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("vector contains NaN or Inf")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return (arr / norm).astype(np.float32)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity via normalized dot product, clamped to [-1, 1]."""
    value = float(np.dot(normalize(u).astype(np.float64), normalize(v).astype(np.float64)))
    return min(1.0, max(-1.0, value))


def text_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class ProviderConfig:
    """Where vectors come from and where they get cached."""

    backend: str = "hash"
    dimension: int = DEFAULT_DIMENSION
    path: str | None = None
    endpoint: str | None = None
    batch_size: int = 64
    cache_path: str | None = None
    timeout: float = 60.0
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown embedding backend {self.backend!r}; expected {BACKENDS}")
        if self.dimension <= 0:
            raise ValueError("embedding dimension must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.backend == "http" and not self.endpoint:
            raise ValueError("http backend requires an endpoint")
        if self.backend != "http" and self.endpoint:
            raise ValueError("endpoint is only valid with the http backend")
        if self.backend == "file" and not self.path:
            raise ValueError("file backend requires a store path")

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "dimension": self.dimension,
            "path": self.path,
            "endpoint": self.endpoint,
            "batch_size": self.batch_size,
            "cache_path": self.cache_path,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ProviderConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in raw.items() if k in known and k != "extra"}
        extra = {k: v for k, v in raw.items() if k not in known}
        cfg = cls(**kwargs, extra=extra)
        cfg.validate()
        return cfg


def write_vector_store(
    path: str | Path,
    vectors: Mapping[str, np.ndarray],
    dimension: int,
    manifest_path: str | Path | None = None,
) -> None:
    """Write a text->vector mapping as a binary store plus its audit manifest."""
    path = Path(path)
    manifest_path = Path(manifest_path) if manifest_path else _manifest_path(path)
    items = sorted(vectors.items())
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, dimension, len(items)))
        for text, vector in items:
            arr = np.asarray(vector, dtype=np.float32)
            if arr.shape != (dimension,):
                raise EmbeddingError(
                    f"vector for {text!r} has shape {arr.shape}, expected ({dimension},)"
                )
            fh.write(text_hash(text))
            fh.write(arr.astype("<f4").tobytes())
    with manifest_path.open("w", encoding="utf-8") as fh:
        for text, _ in items:
            fh.write(f"{text_hash(text).hex()}\t{json.dumps(text, ensure_ascii=False)}\n")


def read_vector_store(
    path: str | Path,
) -> tuple[int, dict[bytes, np.ndarray], dict[bytes, str]]:
    """Read a binary store; returns (dimension, hash->vector, hash->text)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise EmbeddingError(f"{path}: truncated vector store header")
    magic, dimension, count = _HEADER.unpack_from(data)
    if magic != STORE_MAGIC:
        raise EmbeddingError(f"{path}: bad magic {magic!r}")
    record = 32 + 4 * dimension
    expected = _HEADER.size + count * record
    if len(data) < expected:
        raise EmbeddingError(f"{path}: truncated vector store ({len(data)} < {expected} bytes)")
    vectors: dict[bytes, np.ndarray] = {}
    offset = _HEADER.size
    for _ in range(count):
        digest = data[offset : offset + 32]
        arr = np.frombuffer(data, dtype="<f4", count=dimension, offset=offset + 32).copy()
        vectors[digest] = arr
        offset += record
    texts: dict[bytes, str] = {}
    manifest = _manifest_path(path)
    if manifest.exists():
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            digest_hex, _, encoded = line.partition("\t")
            texts[bytes.fromhex(digest_hex)] = json.loads(encoded)
    return dimension, vectors, texts


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest")


class _FileBackend:
    def __init__(self, cfg: ProviderConfig) -> None:
        dimension, vectors, texts = read_vector_store(cfg.path)
        if dimension != cfg.dimension:
            raise EmbeddingError(
                f"store dimension {dimension} does not match configured {cfg.dimension}"
            )
        self._by_hash = vectors
        self._texts = texts

    def fetch(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            vector = self._by_hash.get(text_hash(text))
            if vector is None:
                raise EmbeddingError(f"no embedding stored for text {text!r}")
            rows.append(vector)
        return np.stack(rows)


class _HttpBackend:
    """Client for the encoder service: POST /embed {"texts": [...]}."""

    def __init__(self, cfg: ProviderConfig) -> None:
        self._url = cfg.endpoint.rstrip("/") + "/embed"
        self._timeout = cfg.timeout

    def fetch(self, texts: Sequence[str]) -> np.ndarray:
        try:
            reply = requests.post(self._url, json={"texts": list(texts)}, timeout=self._timeout)
            reply.raise_for_status()
            payload = reply.json()
        except requests.RequestException as exc:
            raise EmbeddingError(f"embedding backend unreachable: {exc}") from exc
        except ValueError as exc:
            raise EmbeddingError(f"embedding backend returned invalid JSON: {exc}") from exc
        vectors = payload.get("vectors") if isinstance(payload, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise EmbeddingError("embedding backend reply missing aligned 'vectors' list")
        return np.asarray(vectors, dtype=np.float64)


class _HashBackend:
    """Deterministic stand-in encoder: a seeded Gaussian vector per text."""

    def __init__(self, cfg: ProviderConfig) -> None:
        self._dimension = cfg.dimension

    def fetch(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            seed = int.from_bytes(text_hash(text)[:8], "big")
            rng = np.random.default_rng(seed)
            rows.append(rng.standard_normal(self._dimension))
        return np.stack(rows)


class EmbeddingProvider:
    """Order-preserving batch embedding with in-memory and on-disk caching.

    The cache is consulted first; misses are fetched from the backend in
    configured batch sizes, normalized, and written back.  Reads are lock-free
    once a vector is cached; disk appends are serialized.
    """

    def __init__(self, cfg: ProviderConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if cfg.backend == "file":
            self._backend = _FileBackend(cfg)
        elif cfg.backend == "http":
            self._backend = _HttpBackend(cfg)
        else:
            self._backend = _HashBackend(cfg)
        if cfg.cache_path and Path(cfg.cache_path).exists():
            dimension, vectors, texts = read_vector_store(cfg.cache_path)
            if dimension != cfg.dimension:
                raise EmbeddingError(
                    f"cache dimension {dimension} does not match configured {cfg.dimension}"
                )
            for digest, text in texts.items():
                if digest in vectors:
                    self._cache[text] = vectors[digest]

    @property
    def dimension(self) -> int:
        return self.cfg.dimension

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        """One unit-norm float32 vector per input text, in input order."""
        if any(not isinstance(t, str) or not t for t in texts):
            raise EmbeddingError("texts must be non-empty strings")
        misses = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if misses:
            fetched: dict[str, np.ndarray] = {}
            for start in range(0, len(misses), self.cfg.batch_size):
                chunk = misses[start : start + self.cfg.batch_size]
                raw = self._backend.fetch(chunk)
                if raw.shape != (len(chunk), self.cfg.dimension):
                    raise EmbeddingError(
                        f"backend returned shape {raw.shape}, expected "
                        f"({len(chunk)}, {self.cfg.dimension})"
                    )
                for text, row in zip(chunk, raw):
                    fetched[text] = normalize(row)
            with self._lock:
                self._cache.update(fetched)
                if self.cfg.cache_path:
                    self._persist_cache()
        out = np.empty((len(texts), self.cfg.dimension), dtype=np.float32)
        for row, text in enumerate(texts):
            out[row] = self._cache[text]
        return out

    def _persist_cache(self) -> None:
        write_vector_store(self.cfg.cache_path, self._cache, self.cfg.dimension)

    def clear_memory_cache(self) -> None:
        with self._lock:
            self._cache.clear()
