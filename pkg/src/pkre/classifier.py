"""Nearest-neighbour relation classification over class-partitioned indices.

A query instance is rendered as a pattern, embedded, and scored against each
candidate class index: the score of a class is the arithmetic mean of the top
``k`` cosine similarities inside that class's index.  The class with the
highest mean wins.  Candidate classes are filtered by which relation labels
ever co-occurred with the query's entity-type pair in the training data;
a pair never seen in training falls back to scoring every class.

Instances whose dependency parse is missing or unusable are scored with their
raw sentence vector against the sentence-vector index family instead.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import NO_RELATION, EntityPairType, ParsedInstance, entity_pair_type
from .embeddings import EmbeddingProvider, ProviderConfig
from .index import ClassIndexKey, IndexStore, top_k
from .patterns import PathFailure, PatternVariant, render_pattern

DEFAULT_K = 14


class NotFittedError(RuntimeError):
    """Classification was attempted before any index was attached."""


@dataclass(frozen=True)
class CompatibilityMap:
    """Which relation labels each entity-type pair can take, learned from
    training co-occurrence."""

    labels_by_pair: Mapping[EntityPairType, frozenset[str]]
    norel_pairs: frozenset[EntityPairType]
    relation_labels: frozenset[str]

    @classmethod
    def from_instances(
        cls, instances: Iterable[ParsedInstance], unordered: bool = False
    ) -> "CompatibilityMap":
        by_pair: dict[EntityPairType, set[str]] = {}
        norel: set[EntityPairType] = set()
        for pi in instances:
            pair = entity_pair_type(pi.instance, unordered)
            if pi.instance.gold_label == NO_RELATION:
                norel.add(pair)
            else:
                by_pair.setdefault(pair, set()).add(pi.instance.gold_label)
        return cls(
            labels_by_pair={p: frozenset(v) for p, v in by_pair.items()},
            norel_pairs=frozenset(norel),
            relation_labels=frozenset().union(*by_pair.values()) if by_pair else frozenset(),
        )

    @classmethod
    def from_manifest(cls, rows: Sequence[Mapping]) -> "CompatibilityMap":
        by_pair: dict[EntityPairType, frozenset[str]] = {}
        norel: set[EntityPairType] = set()
        labels: set[str] = set()
        for row in rows:
            pair = EntityPairType(row["first"], row["second"])
            row_labels = frozenset(row.get("labels", ()))
            if row_labels:
                by_pair[pair] = row_labels
                labels |= row_labels
            if row.get("no_relation"):
                norel.add(pair)
        return cls(
            labels_by_pair=by_pair,
            norel_pairs=frozenset(norel),
            relation_labels=frozenset(labels),
        )

    def is_known(self, pair: EntityPairType) -> bool:
        return pair in self.labels_by_pair or pair in self.norel_pairs

    def candidate_keys(
        self, variant: PatternVariant, pair: EntityPairType
    ) -> list[ClassIndexKey]:
        """Admissible buckets for a query, sorted by bucket name.

        Unknown pairs get the full slate: every relation bucket plus every
        no-relation pair bucket.
        """
        keys: list[ClassIndexKey] = []
        if self.is_known(pair):
            for label in self.labels_by_pair.get(pair, frozenset()):
                keys.append(ClassIndexKey.for_relation(variant, label))
            if pair in self.norel_pairs:
                keys.append(ClassIndexKey.for_no_relation(variant, pair))
        else:
            for label in self.relation_labels:
                keys.append(ClassIndexKey.for_relation(variant, label))
            for known_pair in self.norel_pairs:
                keys.append(ClassIndexKey.for_no_relation(variant, known_pair))
        keys.sort(key=lambda k: k.bucket_name)
        return keys

    def to_manifest(self) -> list[dict]:
        pairs = set(self.labels_by_pair) | set(self.norel_pairs)
        return [
            {
                "first": pair.first,
                "second": pair.second,
                "labels": sorted(self.labels_by_pair.get(pair, frozenset())),
                "no_relation": pair in self.norel_pairs,
            }
            for pair in sorted(pairs)
        ]


@dataclass(frozen=True)
class BucketScore:
    """One candidate class's evidence for a query."""

    bucket_name: str
    label: str
    mean_similarity: float
    best_similarity: float
    support: int
    neighbors: tuple[tuple[float, str], ...] = ()

    def to_dict(self) -> dict:
        return {
            "bucket": self.bucket_name,
            "label": self.label,
            "mean_similarity": self.mean_similarity,
            "best_similarity": self.best_similarity,
            "support": self.support,
            "neighbors": [[sim, instance_id] for sim, instance_id in self.neighbors],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BucketScore":
        return cls(
            bucket_name=raw["bucket"],
            label=raw["label"],
            mean_similarity=raw["mean_similarity"],
            best_similarity=raw["best_similarity"],
            support=raw["support"],
            neighbors=tuple((sim, instance_id) for sim, instance_id in raw["neighbors"]),
        )


@dataclass(frozen=True)
class Prediction:
    instance_id: str
    label: str
    variant: str
    used_fallback: bool
    k: int
    scores: tuple[BucketScore, ...] = ()

    @property
    def winning(self) -> BucketScore | None:
        return self.scores[0] if self.scores else None

    def to_dict(self) -> dict:
        return {
            "id": self.instance_id,
            "label": self.label,
            "variant": self.variant,
            "used_fallback": self.used_fallback,
            "k": self.k,
            "scores": [score.to_dict() for score in self.scores],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Prediction":
        return cls(
            instance_id=raw["id"],
            label=raw["label"],
            variant=raw["variant"],
            used_fallback=raw["used_fallback"],
            k=raw["k"],
            scores=tuple(BucketScore.from_dict(s) for s in raw["scores"]),
        )


def mean_of_top(neighbors: Sequence[tuple[float, str]], k: int) -> tuple[float, int]:
    """Mean of the best ``min(k, len)`` similarities, accumulated in float64."""
    if k <= 0:
        raise ValueError("k must be positive")
    take = min(k, len(neighbors))
    if take == 0:
        raise ValueError("cannot average an empty neighbour list")
    total = np.float64(0.0)
    for sim, _ in neighbors[:take]:
        total += np.float64(sim)
    return float(total / take), take


def rank_buckets(
    neighbor_lists: Mapping[ClassIndexKey, Sequence[tuple[float, str]]], k: int
) -> list[BucketScore]:
    """Score every non-empty candidate bucket and order them best-first.

    Ordering: higher mean similarity, then higher best single similarity,
    then lexicographically smaller bucket name.
    """
    scores = []
    for key, neighbors in neighbor_lists.items():
        if not neighbors:
            continue
        mean, support = mean_of_top(neighbors, k)
        scores.append(
            BucketScore(
                bucket_name=key.bucket_name,
                label=key.label,
                mean_similarity=mean,
                best_similarity=float(neighbors[0][0]),
                support=support,
                neighbors=tuple(neighbors[: min(k, len(neighbors))]),
            )
        )
    scores.sort(key=lambda s: (-s.mean_similarity, -s.best_similarity, s.bucket_name))
    return scores


class KnnClassificationEngine:
    """Stateless-per-query classification over a fitted index store."""

    def __init__(
        self,
        store: IndexStore,
        provider: EmbeddingProvider,
        variant: PatternVariant = PatternVariant.SDP_DEP_NER,
        k: int = DEFAULT_K,
        compatibility: CompatibilityMap | None = None,
        unordered_pairs: bool | None = None,
        substitute_targets_in_plain: bool | None = None,
    ) -> None:
        if variant is PatternVariant.SENTENCE_FALLBACK:
            raise ValueError("the sentence family is a fallback, not a primary variant")
        if k <= 0:
            raise ValueError("k must be positive")
        if variant.value not in store.manifest.bucket_counts and store.indices:
            available = sorted(store.manifest.bucket_counts)
            raise ValueError(
                f"store has no {variant.value!r} family (available: {available})"
            )
        self.store = store
        self.provider = provider
        self.variant = variant
        self.k = k
        self.compatibility = compatibility or CompatibilityMap.from_manifest(
            store.manifest.compatibility
        )
        cfg = store.manifest.config
        self.unordered_pairs = (
            bool(cfg.get("unordered_pairs", False)) if unordered_pairs is None else unordered_pairs
        )
        self.substitute_targets_in_plain = (
            bool(cfg.get("substitute_targets_in_plain", True))
            if substitute_targets_in_plain is None
            else substitute_targets_in_plain
        )

    def render_query(self, pi: ParsedInstance) -> tuple[str, PatternVariant, bool]:
        """Pattern text for a query, dropping to the sentence fallback when the
        parse cannot produce a path."""
        try:
            pattern = render_pattern(pi, self.variant, self.substitute_targets_in_plain)
            return pattern.text, self.variant, False
        except PathFailure:
            fallback = render_pattern(pi, PatternVariant.SENTENCE_FALLBACK)
            return fallback.text, PatternVariant.SENTENCE_FALLBACK, True

    def collect_neighbors(
        self, pi: ParsedInstance, cap: int | None = None
    ) -> tuple[PatternVariant, bool, dict[ClassIndexKey, list[tuple[float, str]]]]:
        """Top-``cap`` neighbours per candidate bucket (default cap = k)."""
        text, variant, used_fallback = self.render_query(pi)
        query = self.provider.embed(text)
        return variant, used_fallback, self._neighbors_for_query(pi, variant, query, cap)

    def _neighbors_for_query(
        self,
        pi: ParsedInstance,
        variant: PatternVariant,
        query: np.ndarray,
        cap: int | None,
    ) -> dict[ClassIndexKey, list[tuple[float, str]]]:
        cap = self.k if cap is None else max(cap, self.k)
        pair = entity_pair_type(pi.instance, self.unordered_pairs)
        lists: dict[ClassIndexKey, list[tuple[float, str]]] = {}
        for key in self.compatibility.candidate_keys(variant, pair):
            index = self.store.bucket(key)
            if index is None or len(index) == 0:
                continue
            lists[key] = top_k(index, query, cap)
        return lists

    def classify(self, pi: ParsedInstance, k: int | None = None) -> Prediction:
        k = self.k if k is None else k
        variant, used_fallback, lists = self.collect_neighbors(pi, cap=k)
        return self.decide(pi.id, variant, used_fallback, lists, k)

    @staticmethod
    def decide(
        instance_id: str,
        variant: PatternVariant,
        used_fallback: bool,
        neighbor_lists: Mapping[ClassIndexKey, Sequence[tuple[float, str]]],
        k: int,
    ) -> Prediction:
        scores = rank_buckets(neighbor_lists, k)
        label = scores[0].label if scores else NO_RELATION
        return Prediction(
            instance_id=instance_id,
            label=label,
            variant=variant.value,
            used_fallback=used_fallback,
            k=k,
            scores=tuple(scores),
        )

    def classify_batch(
        self, instances: Sequence[ParsedInstance], threads: int = 1
    ) -> list[Prediction]:
        """Classify many instances; output order and content are independent
        of the thread count."""
        texts = [self.render_query(pi) for pi in instances]
        vectors = self.provider.embed_batch([text for text, _, _ in texts])

        def one(item: tuple[ParsedInstance, tuple[str, PatternVariant, bool], np.ndarray]):
            pi, (_, variant, used_fallback), vector = item
            lists = self._neighbors_for_query(pi, variant, vector, self.k)
            return self.decide(pi.id, variant, used_fallback, lists, self.k)

        work = list(zip(instances, texts, vectors))
        if threads <= 1:
            return [one(item) for item in work]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, work))


class PatternKnnClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn style front door: ``fit`` builds the class indices from
    parsed training instances, ``predict`` labels parsed queries.

    Parameters
    ----------
    k : averaging depth per class index.
    variant : which pattern flavour to index and query ("sdp", "sdp_ner",
        "sdp_dep", "sdp_dep_ner").
    provider : an :class:`EmbeddingProvider`, or None to build one from
        ``provider_config``.
    provider_config : mapping used to construct a provider when none is given
        (defaults to the deterministic hash backend).
    unordered_pairs : treat entity-type pairs as unordered when routing.
    substitute_targets_in_plain : replace the two target entities with their
        types in the plain path variant.
    threads : worker threads for batch prediction.
    """

    def __init__(
        self,
        k: int = DEFAULT_K,
        variant: str = "sdp_dep_ner",
        provider: EmbeddingProvider | None = None,
        provider_config: dict | None = None,
        unordered_pairs: bool = False,
        substitute_targets_in_plain: bool = True,
        threads: int = 1,
    ) -> None:
        self.k = k
        self.variant = variant
        self.provider = provider
        self.provider_config = provider_config
        self.unordered_pairs = unordered_pairs
        self.substitute_targets_in_plain = substitute_targets_in_plain
        self.threads = threads

    def _make_provider(self) -> EmbeddingProvider:
        if self.provider is not None:
            return self.provider
        cfg = ProviderConfig.from_dict(self.provider_config or {"backend": "hash"})
        return EmbeddingProvider(cfg)

    def _validate_params(self) -> None:
        if not isinstance(self.k, (int, np.integer)) or isinstance(self.k, bool) or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        PatternVariant.from_name(self.variant)
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def fit(self, X: Sequence[ParsedInstance], y: Sequence[str] | None = None):
        """Build one index per (variant, class) from labelled instances.

        ``y`` may override the instances' own gold labels.
        """
        from .index import build_store  # local import keeps module load light

        self._validate_params()
        instances = validate_parsed_instances(X)
        if y is not None:
            if len(y) != len(instances):
                raise ValueError(f"len(y)={len(y)} != len(X)={len(instances)}")
            instances = [
                dataclasses.replace(
                    pi, instance=dataclasses.replace(pi.instance, gold_label=label)
                )
                for pi, label in zip(instances, y)
            ]
        if not instances:
            raise ValueError("cannot fit on an empty training set")
        provider = self._make_provider()
        variant = PatternVariant.from_name(self.variant)
        self.store_ = build_store(
            instances,
            [variant],
            provider,
            unordered_pairs=self.unordered_pairs,
            substitute_targets_in_plain=self.substitute_targets_in_plain,
        )
        self.engine_ = KnnClassificationEngine(
            self.store_,
            provider,
            variant=variant,
            k=self.k,
            unordered_pairs=self.unordered_pairs,
            substitute_targets_in_plain=self.substitute_targets_in_plain,
        )
        labels = {pi.instance.gold_label for pi in instances}
        self.classes_ = np.array(sorted(labels), dtype=object)
        self.n_features_in_ = self.store_.dimension
        return self

    def predict(self, X: Sequence[ParsedInstance]) -> np.ndarray:
        check_is_fitted(self, "engine_")
        instances = validate_parsed_instances(X)
        predictions = self.engine_.classify_batch(instances, threads=self.threads)
        return np.array([p.label for p in predictions], dtype=object)

    def predict_detail(self, X: Sequence[ParsedInstance]) -> list[Prediction]:
        """Like :meth:`predict` but with per-class scores and neighbours."""
        check_is_fitted(self, "engine_")
        instances = validate_parsed_instances(X)
        return self.engine_.classify_batch(instances, threads=self.threads)

    def score(self, X: Sequence[ParsedInstance], y: Sequence[str] | None = None) -> float:
        """Accuracy against ``y`` (or the instances' own gold labels)."""
        instances = validate_parsed_instances(X)
        if y is None:
            y = [pi.instance.gold_label for pi in instances]
        predicted = self.predict(instances)
        gold = np.array(list(y), dtype=object)
        if gold.shape != predicted.shape:
            raise ValueError("y length does not match X")
        return float(np.mean(predicted == gold))


def validate_parsed_instances(X: Iterable) -> list[ParsedInstance]:
    """Check that ``X`` is a sequence of parsed instances with unique ids."""
    items = list(X)
    seen: set[str] = set()
    for position, item in enumerate(items):
        if not isinstance(item, ParsedInstance):
            raise TypeError(
                f"X[{position}] is {type(item).__name__}, expected ParsedInstance"
            )
        if item.id in seen:
            raise ValueError(f"duplicate instance id {item.id!r} in input")
        seen.add(item.id)
    return items


def write_predictions(
    predictions: Sequence[Prediction], path: str | Path, config: Mapping | None = None
) -> None:
    """JSONL dump: a header line with the run configuration, then one line
    per prediction."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        header = {"kind": "run", "config": dict(config or {})}
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for prediction in predictions:
            handle.write(json.dumps(prediction.to_dict(), sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> tuple[dict, list[Prediction]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty predictions file")
    header = json.loads(lines[0])
    if header.get("kind") != "run":
        raise ValueError(f"{path}: missing run header line")
    return dict(header.get("config", {})), [
        Prediction.from_dict(json.loads(line)) for line in lines[1:]
    ]
