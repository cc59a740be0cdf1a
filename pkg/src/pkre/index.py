"""Class-partitioned vector indices: build, query, persist.

Every relation class gets its own index per pattern variant, and the
no-relation training data is split into one index per entity-type pair, so a
query only ever scans the classes admissible for its entity pair.  Search is
an exact brute-force scan over unit vectors (cosine == dot product): at the
corpus sizes involved this is fast, reproducible, and trivially checkable
against a naive oracle.

Index file layout (all integers little-endian):

    magic "PKRE" | version u32 | dimension u32
    variant count u8, then per variant: name length u8 + UTF-8 name
    bucket count u32
    per bucket: variant name (u8 len + UTF-8), kind u8 (0 relation, 1 no-rel
      pair), the key strings (u16 len + UTF-8 each), entry count u32, then
      per entry: id (u16 len + UTF-8 bytes) + dimension float32 values
    trailing manifest: UTF-8 JSON to end of file
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import NO_RELATION, EntityPairType, ParsedInstance, entity_pair_type
from .embeddings import EmbeddingProvider
from .patterns import SDP_VARIANTS, PathFailure, PatternVariant, render_pattern

INDEX_MAGIC = b"PKRE"
FORMAT_VERSION = 1

_KIND_RELATION = 0
_KIND_NO_RELATION = 1


class IndexFormatError(Exception):
    """Corrupt, truncated, or incompatible index file."""


class DuplicateEntry(ValueError):
    """An instance id was inserted twice into the same bucket."""


@dataclass(frozen=True)
class ClassIndexKey:
    """Identifies one bucket: a pattern variant plus a relation label or a
    no-relation entity-pair split."""

    variant: PatternVariant
    relation: str | None = None
    pair: EntityPairType | None = None

    def __post_init__(self) -> None:
        if (self.relation is None) == (self.pair is None):
            raise ValueError("exactly one of relation/pair must be set")
        if self.relation == NO_RELATION:
            raise ValueError("no-relation buckets are keyed by entity pair, not label")

    @classmethod
    def for_relation(cls, variant: PatternVariant, label: str) -> "ClassIndexKey":
        return cls(variant=variant, relation=label)

    @classmethod
    def for_no_relation(cls, variant: PatternVariant, pair: EntityPairType) -> "ClassIndexKey":
        return cls(variant=variant, pair=EntityPairType(*pair))

    @property
    def bucket_name(self) -> str:
        if self.relation is not None:
            return self.relation
        return f"{NO_RELATION}({self.pair.first},{self.pair.second})"

    @property
    def label(self) -> str:
        """The relation label this bucket votes for when it wins."""
        return self.relation if self.relation is not None else NO_RELATION


class ClassIndex:
    """All vectors of one bucket, with ids, in insertion order."""

    def __init__(self, key: ClassIndexKey, dimension: int) -> None:
        self.key = key
        self.dimension = dimension
        self.ids: list[str] = []
        self._id_set: set[str] = set()
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def append(self, instance_id: str, vector: np.ndarray) -> None:
        if instance_id in self._id_set:
            raise DuplicateEntry(
                f"id {instance_id!r} already present in bucket {self.key.bucket_name!r}"
            )
        arr = np.asarray(vector, dtype=np.float32)
        if arr.shape != (self.dimension,):
            raise ValueError(f"vector shape {arr.shape} != ({self.dimension},)")
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-4:
            raise ValueError(f"vector for {instance_id!r} is not unit-norm (|v|={norm:.6f})")
        self.ids.append(instance_id)
        self._id_set.add(instance_id)
        self._rows.append(arr)
        self._matrix = None

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self._rows:
                self._matrix = np.stack(self._rows)
            else:
                self._matrix = np.empty((0, self.dimension), dtype=np.float32)
        return self._matrix


def top_k(index: ClassIndex, query: np.ndarray, k: int) -> list[tuple[float, str]]:
    """Exact top-min(k, |index|) entries by cosine similarity, descending.

    Similarities are clamped to [-1, 1] (dot products of unit float32 vectors
    can overshoot by rounding); ties break by ascending instance id.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    n = len(index)
    if n == 0:
        return []
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (index.dimension,):
        raise ValueError(f"query shape {q.shape} != ({index.dimension},)")
    sims = np.clip(index.matrix @ q, -1.0, 1.0)
    kk = min(k, n)
    if kk < n:
        part = np.argpartition(-sims, kk - 1)[:kk]
        threshold = sims[part].min()
        candidates = np.flatnonzero(sims >= threshold).tolist()
    else:
        candidates = list(range(n))
    candidates.sort(key=lambda i: (-float(sims[i]), index.ids[i]))
    return [(float(sims[i]), index.ids[i]) for i in candidates[:kk]]


@dataclass
class BuildManifest:
    """What went into a store: sources, sizes, and the parse-failure rate."""

    dimension: int
    variants: list[str]
    source_splits: list[str]
    instance_count: int
    parse_failure_count: int
    bucket_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    compatibility: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def parse_failure_fraction(self) -> float:
        if self.instance_count == 0:
            return 0.0
        return self.parse_failure_count / self.instance_count

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "variants": self.variants,
            "source_splits": self.source_splits,
            "instance_count": self.instance_count,
            "parse_failure_count": self.parse_failure_count,
            "parse_failure_fraction": self.parse_failure_fraction,
            "bucket_counts": self.bucket_counts,
            "compatibility": self.compatibility,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BuildManifest":
        return cls(
            dimension=raw["dimension"],
            variants=list(raw["variants"]),
            source_splits=list(raw["source_splits"]),
            instance_count=raw["instance_count"],
            parse_failure_count=raw["parse_failure_count"],
            bucket_counts={k: dict(v) for k, v in raw.get("bucket_counts", {}).items()},
            compatibility=[dict(row) for row in raw.get("compatibility", [])],
            config=dict(raw.get("config", {})),
        )


class IndexStore:
    """A set of class indices over one or more pattern variants."""

    def __init__(self, dimension: int, manifest: BuildManifest | None = None) -> None:
        self.dimension = dimension
        self.indices: dict[ClassIndexKey, ClassIndex] = {}
        self.manifest = manifest or BuildManifest(
            dimension=dimension,
            variants=[],
            source_splits=[],
            instance_count=0,
            parse_failure_count=0,
        )

    def bucket(self, key: ClassIndexKey, create: bool = False) -> ClassIndex | None:
        index = self.indices.get(key)
        if index is None and create:
            index = ClassIndex(key, self.dimension)
            self.indices[key] = index
        return index

    def insert(self, key: ClassIndexKey, instance_id: str, vector: np.ndarray) -> ClassIndex:
        """Append one entry, creating the bucket on first use; never removes."""
        index = self.bucket(key, create=True)
        index.append(instance_id, vector)
        counts = self.manifest.bucket_counts.setdefault(key.variant.value, {})
        counts[key.bucket_name] = len(index)
        return index

    def family(self, variant: PatternVariant) -> dict[ClassIndexKey, ClassIndex]:
        return {k: v for k, v in self.indices.items() if k.variant is variant}

    def variant_names(self) -> list[str]:
        return sorted({k.variant.value for k in self.indices})

    def total_entries(self, variant: PatternVariant | None = None) -> int:
        return sum(
            len(v) for k, v in self.indices.items() if variant is None or k.variant is variant
        )

    def refresh_manifest_counts(self) -> None:
        self.manifest.bucket_counts = {}
        for key, index in self.indices.items():
            self.manifest.bucket_counts.setdefault(key.variant.value, {})[
                key.bucket_name
            ] = len(index)
        self.manifest.variants = sorted(
            set(self.manifest.variants) | {k.variant.value for k in self.indices}
        )


def bucket_key_for(
    variant: PatternVariant, label: str, pair: EntityPairType
) -> ClassIndexKey:
    """Routing rule: labeled instances go to their class, no-relation ones to
    the index of their entity-type pair."""
    if label == NO_RELATION:
        return ClassIndexKey.for_no_relation(variant, pair)
    return ClassIndexKey.for_relation(variant, label)


def bucket_name_for(label: str, pair: EntityPairType) -> str:
    """Bucket name shared by all variant families for a (label, pair) route."""
    if label == NO_RELATION:
        return f"{NO_RELATION}({pair.first},{pair.second})"
    return label


def build_store(
    instances: Sequence[ParsedInstance],
    variants: Iterable[PatternVariant],
    provider: EmbeddingProvider,
    source_splits: Sequence[str] = (),
    unordered_pairs: bool = False,
    substitute_targets_in_plain: bool = True,
    config_echo: Mapping | None = None,
) -> IndexStore:
    """Embed every instance's patterns and route them into class buckets.

    Instances with a usable parse contribute to each requested path variant;
    every instance (parse failures included) also contributes its sentence
    vector to the fallback family.
    """
    wanted = [v for v in dict.fromkeys(variants) if v is not PatternVariant.SENTENCE_FALLBACK]
    store = IndexStore(provider.dimension)

    jobs: list[tuple[ClassIndexKey, str, str]] = []  # (bucket, instance id, text)
    failures = 0
    seen_labels: dict[EntityPairType, set[str]] = {}
    norel_pairs: set[EntityPairType] = set()
    for pi in instances:
        if pi.instance.gold_label is None or not pi.instance.gold_label:
            raise ValueError(f"instance {pi.id} has no gold label; cannot build an index")
        pair = entity_pair_type(pi.instance, unordered_pairs)
        if pi.instance.gold_label == NO_RELATION:
            norel_pairs.add(pair)
        else:
            seen_labels.setdefault(pair, set()).add(pi.instance.gold_label)
        failed = pi.parse_failed
        if not failed:
            try:
                for variant in wanted:
                    pattern = render_pattern(pi, variant, substitute_targets_in_plain)
                    key = bucket_key_for(variant, pi.instance.gold_label, pair)
                    jobs.append((key, pi.id, pattern.text))
            except PathFailure:
                failed = True
        if failed:
            failures += 1
        fallback = render_pattern(pi, PatternVariant.SENTENCE_FALLBACK)
        key = bucket_key_for(PatternVariant.SENTENCE_FALLBACK, pi.instance.gold_label, pair)
        jobs.append((key, pi.id, fallback.text))

    vectors = provider.embed_batch([text for _, _, text in jobs]) if jobs else []
    for (key, instance_id, _), vector in zip(jobs, vectors):
        store.insert(key, instance_id, vector)

    store.manifest.source_splits = list(source_splits)
    store.manifest.instance_count = len(instances)
    store.manifest.parse_failure_count = failures
    store.manifest.compatibility = [
        {
            "first": pair.first,
            "second": pair.second,
            "labels": sorted(seen_labels.get(pair, ())),
            "no_relation": pair in norel_pairs,
        }
        for pair in sorted(set(seen_labels) | norel_pairs)
    ]
    store.manifest.config = dict(config_echo or {})
    store.manifest.config.setdefault("unordered_pairs", unordered_pairs)
    store.manifest.config.setdefault(
        "substitute_targets_in_plain", substitute_targets_in_plain
    )
    store.refresh_manifest_counts()
    return store


def _write_str(out: bytearray, text: str, width: str) -> None:
    raw = text.encode("utf-8")
    out += struct.pack(width, len(raw))
    out += raw


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise IndexFormatError("truncated index file")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def read_str(self, width: str) -> str:
        (length,) = self.unpack(width)
        return self.take(length).decode("utf-8")


def persist_store(store: IndexStore, path: str | Path) -> None:
    """Serialize a store; ``load_store(persist_store(s))`` is bit-identical."""
    path = Path(path)
    out = bytearray()
    variants = store.variant_names()
    out += struct.pack("<4sII", INDEX_MAGIC, FORMAT_VERSION, store.dimension)
    out += struct.pack("<B", len(variants))
    for name in variants:
        _write_str(out, name, "<B")
    keys = sorted(store.indices, key=lambda k: (k.variant.value, k.bucket_name))
    out += struct.pack("<I", len(keys))
    for key in keys:
        index = store.indices[key]
        _write_str(out, key.variant.value, "<B")
        if key.relation is not None:
            out += struct.pack("<B", _KIND_RELATION)
            _write_str(out, key.relation, "<H")
        else:
            out += struct.pack("<B", _KIND_NO_RELATION)
            _write_str(out, key.pair.first, "<H")
            _write_str(out, key.pair.second, "<H")
        out += struct.pack("<I", len(index))
        for instance_id, row in zip(index.ids, index.matrix):
            _write_str(out, instance_id, "<H")
            out += row.astype("<f4").tobytes()
    out += json.dumps(store.manifest.to_dict(), sort_keys=True).encode("utf-8")
    path.write_bytes(bytes(out))


def load_store(path: str | Path) -> IndexStore:
    path = Path(path)
    reader = _Reader(path.read_bytes())
    magic, version, dimension = reader.unpack("<4sII")
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"{path}: unsupported format version {version}")
    (variant_count,) = reader.unpack("<B")
    for _ in range(variant_count):
        reader.read_str("<B")
    store = IndexStore(dimension)
    (bucket_count,) = reader.unpack("<I")
    for _ in range(bucket_count):
        variant = PatternVariant.from_name(reader.read_str("<B"))
        (kind,) = reader.unpack("<B")
        if kind == _KIND_RELATION:
            key = ClassIndexKey.for_relation(variant, reader.read_str("<H"))
        elif kind == _KIND_NO_RELATION:
            first = reader.read_str("<H")
            second = reader.read_str("<H")
            key = ClassIndexKey.for_no_relation(variant, EntityPairType(first, second))
        else:
            raise IndexFormatError(f"{path}: unknown bucket kind {kind}")
        (entry_count,) = reader.unpack("<I")
        index = ClassIndex(key, dimension)
        for _ in range(entry_count):
            instance_id = reader.read_str("<H")
            row = np.frombuffer(reader.take(4 * dimension), dtype="<f4").copy()
            index.ids.append(instance_id)
            index._id_set.add(instance_id)
            index._rows.append(row)
        store.indices[key] = index
    try:
        manifest = json.loads(reader.data[reader.offset :].decode("utf-8"))
    except ValueError as exc:
        raise IndexFormatError(f"{path}: malformed trailing manifest: {exc}") from exc
    store.manifest = BuildManifest.from_dict(manifest)
    if store.manifest.dimension != dimension:
        raise IndexFormatError(f"{path}: manifest dimension disagrees with header")
    return store
