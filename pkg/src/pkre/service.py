"""Human-in-the-loop annotation service.

Keeps a pool of unlabeled instances next to a live index store.  Two queue
orderings drive annotation: *explore* surfaces the instances least similar to
anything already indexed (novelty first), *exploit* the most similar ones
together with the classifier's suggested label.  Accepted labels are appended
to an audit log and their pattern vectors inserted into the live indices, so
every later queue or neighbour request sees them.

Writes are serialized behind a lock; reads never see a half-applied label.
The JSON API is served next to the static annotation console (mounted at /).
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from fastapi import FastAPI, HTTPException
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .classifier import CompatibilityMap, KnnClassificationEngine, Prediction
from .corpus import NO_RELATION, ParsedInstance, entity_pair_type
from .embeddings import EmbeddingProvider
from .index import IndexStore, bucket_key_for, top_k
from .patterns import PathFailure, PatternVariant, render_pattern

QUEUE_MODES = ("explore", "exploit")


class SnapshotError(Exception):
    """Snapshot file missing fields, malformed, or inconsistent with state."""


class UnknownInstance(KeyError):
    pass


class AlreadyLabeled(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


@dataclass(frozen=True)
class AuditRecord:
    timestamp: float
    instance_id: str
    label: str
    annotator: str

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "id": self.instance_id,
            "label": self.label,
            "annotator": self.annotator,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "AuditRecord":
        return cls(
            timestamp=float(raw["timestamp"]),
            instance_id=str(raw["id"]),
            label=str(raw["label"]),
            annotator=str(raw["annotator"]),
        )


@dataclass(frozen=True)
class QueueItem:
    instance_id: str
    mode: str
    best_similarity: float | None
    suggested_label: str | None
    evidence: tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.instance_id,
            "mode": self.mode,
            "best_similarity": self.best_similarity,
            "suggested_label": self.suggested_label,
            "evidence": list(self.evidence),
        }


class AnnotationState:
    """Unlabeled pool + live store + audit log, mutated only by labels."""

    def __init__(
        self,
        pool: Sequence[ParsedInstance],
        store: IndexStore,
        provider: EmbeddingProvider,
        variant: PatternVariant = PatternVariant.SDP_DEP_NER,
        k: int = 5,
        extra_labels: Sequence[str] = (),
        known_instances: Sequence[ParsedInstance] = (),
    ) -> None:
        self.store = store
        self.provider = provider
        self.variant = variant
        self.k = k
        self.engine = KnnClassificationEngine(store, provider, variant=variant, k=k)
        self.instances: dict[str, ParsedInstance] = {}
        for pi in list(known_instances) + list(pool):
            self.instances[pi.id] = pi
        self.pool: list[str] = [pi.id for pi in pool]
        if len(set(self.pool)) != len(self.pool):
            raise ValueError("duplicate instance ids in the unlabeled pool")
        self.labeled: dict[str, str] = {}
        self.audit: list[AuditRecord] = []
        self.version = 0
        self._lock = threading.Lock()
        self._labels_by_pair = {
            pair: set(labels) for pair, labels in self.engine.compatibility.labels_by_pair.items()
        }
        self._norel_pairs = set(self.engine.compatibility.norel_pairs)
        self._extra_labels = set(extra_labels)

    # -- inventory ---------------------------------------------------------

    def relation_labels(self) -> list[str]:
        """Assignable relation labels (no_relation comes on top of these)."""
        labels = set(self._extra_labels)
        labels |= self.engine.compatibility.relation_labels
        for pi in self.instances.values():
            gold = pi.instance.gold_label
            if gold and gold != NO_RELATION:
                labels.add(gold)
        return sorted(labels)

    def assignable_labels(self) -> list[str]:
        return self.relation_labels() + [NO_RELATION]

    # -- scoring -----------------------------------------------------------

    def _instance(self, instance_id: str) -> ParsedInstance:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise UnknownInstance(instance_id) from None

    def best_similarity(self, pi: ParsedInstance) -> float | None:
        """Highest similarity between the instance's pattern and anything in
        its matching index family; None when that family is empty."""
        text, variant, _ = self.engine.render_query(pi)
        query = self.provider.embed(text)
        best: float | None = None
        for _, index in sorted(
            self.store.family(variant).items(), key=lambda kv: kv[0].bucket_name
        ):
            if len(index) == 0:
                continue
            top = top_k(index, query, 1)
            if top and (best is None or top[0][0] > best):
                best = top[0][0]
        return best

    def _evidence(self, prediction: Prediction, cap: int = 3) -> tuple[dict, ...]:
        rows = []
        for score in prediction.scores:
            for sim, neighbor_id in score.neighbors:
                rows.append(
                    {
                        "bucket": score.bucket_name,
                        "label": score.label,
                        "id": neighbor_id,
                        "similarity": sim,
                    }
                )
        rows.sort(key=lambda r: (-r["similarity"], r["id"]))
        return tuple(rows[:cap])

    def queue(self, mode: str, limit: int = 20) -> list[QueueItem]:
        if mode not in QUEUE_MODES:
            raise ValueError(f"mode must be one of {QUEUE_MODES}, got {mode!r}")
        if limit < 0:
            raise ValueError("limit must be >= 0")
        scored: list[tuple[str, float | None, Prediction | None]] = []
        for instance_id in sorted(self.pool):
            pi = self._instance(instance_id)
            best = self.best_similarity(pi)
            prediction = self.engine.classify(pi) if best is not None else None
            scored.append((instance_id, best, prediction))
        if mode == "explore":
            # undefined similarity = never compared to anything = most novel
            scored.sort(
                key=lambda row: (
                    row[1] if row[1] is not None else float("-inf"),
                    row[0],
                )
            )
        else:
            scored = [row for row in scored if row[1] is not None]
            scored.sort(key=lambda row: (-row[1], row[0]))
        items = []
        for instance_id, best, prediction in scored[:limit]:
            items.append(
                QueueItem(
                    instance_id=instance_id,
                    mode=mode,
                    best_similarity=best,
                    suggested_label=prediction.label if prediction else None,
                    evidence=self._evidence(prediction) if prediction else (),
                )
            )
        return items

    def neighbors(self, instance_id: str, k: int | None = None) -> dict:
        """The per-bucket evidence the classifier would use for this instance."""
        pi = self._instance(instance_id)
        k = self.k if k is None else k
        if k < 0:
            raise ValueError("k must be >= 0")
        text, variant, used_fallback = self.engine.render_query(pi)
        payload = {
            "id": instance_id,
            "pattern": text,
            "variant": variant.value,
            "used_fallback": used_fallback,
            "k": k,
            "buckets": [],
        }
        if k == 0:
            return payload
        prediction = self.engine.classify(pi, k=k)
        for score in prediction.scores:
            payload["buckets"].append(
                {
                    "bucket": score.bucket_name,
                    "label": score.label,
                    "mean_similarity": score.mean_similarity,
                    "best_similarity": score.best_similarity,
                    "neighbors": [
                        {
                            "id": neighbor_id,
                            "similarity": sim,
                            "pattern": self._pattern_text_of(neighbor_id, variant),
                            "label": score.label,
                        }
                        for sim, neighbor_id in score.neighbors
                    ],
                }
            )
        payload["suggested_label"] = prediction.label
        return payload

    def _pattern_text_of(self, instance_id: str, variant: PatternVariant) -> str | None:
        pi = self.instances.get(instance_id)
        if pi is None:
            return None
        try:
            return render_pattern(pi, variant, self.engine.substitute_targets_in_plain).text
        except PathFailure:
            return pi.instance.sentence

    # -- mutation ----------------------------------------------------------

    def submit_label(self, instance_id: str, label: str, annotator: str) -> dict:
        with self._lock:
            if instance_id in self.labeled:
                raise AlreadyLabeled(f"{instance_id} already labeled {self.labeled[instance_id]!r}")
            if instance_id not in self.pool:
                raise UnknownInstance(instance_id)
            allowed = self.assignable_labels()
            if label not in allowed:
                raise UnknownLabel(f"unknown label {label!r}; expected one of {allowed}")
            pi = self._instance(instance_id)
            pair = entity_pair_type(pi.instance, self.engine.unordered_pairs)

            inserted: dict[str, int] = {}
            try:
                pattern = render_pattern(
                    pi, self.variant, self.engine.substitute_targets_in_plain
                )
                texts = [(self.variant, pattern.text)]
            except PathFailure:
                texts = []
            fallback = render_pattern(pi, PatternVariant.SENTENCE_FALLBACK)
            texts.append((PatternVariant.SENTENCE_FALLBACK, fallback.text))
            for variant, text in texts:
                vector = self.provider.embed(text)
                key = bucket_key_for(variant, label, pair)
                index = self.store.insert(key, instance_id, vector)
                inserted[variant.value] = len(index)

            if label == NO_RELATION:
                self._norel_pairs.add(pair)
            else:
                self._labels_by_pair.setdefault(pair, set()).add(label)
            self._refresh_compatibility()

            self.pool.remove(instance_id)
            self.labeled[instance_id] = label
            record = AuditRecord(
                timestamp=time.time(),
                instance_id=instance_id,
                label=label,
                annotator=annotator,
            )
            self.audit.append(record)
            self.version += 1
            return {
                "accepted": True,
                "id": instance_id,
                "label": label,
                "bucket": bucket_key_for(self.variant, label, pair).bucket_name,
                "new_bucket_size": inserted[texts[0][0].value],
                "bucket_sizes": inserted,
                "version": self.version,
            }

    def _refresh_compatibility(self) -> None:
        cmap = CompatibilityMap(
            labels_by_pair={p: frozenset(v) for p, v in self._labels_by_pair.items()},
            norel_pairs=frozenset(self._norel_pairs),
            relation_labels=(
                frozenset().union(*self._labels_by_pair.values())
                if self._labels_by_pair
                else frozenset()
            ),
        )
        self.engine.compatibility = cmap
        self.store.manifest.compatibility = cmap.to_manifest()

    # -- introspection / persistence ---------------------------------------

    def fallback_rate(self) -> float:
        ids = self.pool + list(self.labeled)
        if not ids:
            return 0.0
        fallbacks = 0
        for instance_id in ids:
            _, _, used_fallback = self.engine.render_query(self._instance(instance_id))
            fallbacks += int(used_fallback)
        return fallbacks / len(ids)

    def stats(self) -> dict:
        labels_per_class: dict[str, int] = {}
        for label in self.labeled.values():
            labels_per_class[label] = labels_per_class.get(label, 0) + 1
        return {
            "version": self.version,
            "pool_size": len(self.pool),
            "labeled_count": len(self.labeled),
            "audit_entries": len(self.audit),
            "labels_per_class": dict(sorted(labels_per_class.items())),
            "fallback_rate": self.fallback_rate(),
            "index": {
                "dimension": self.store.dimension,
                "total_entries": self.store.total_entries(),
                "bucket_counts": self.store.manifest.bucket_counts,
            },
            "manifest": self.store.manifest.to_dict(),
            "variant": self.variant.value,
            "k": self.k,
        }

    def export_state(self, path: str | Path) -> dict:
        with self._lock:
            snapshot = {
                "kind": "annotation-state",
                "version": self.version,
                "variant": self.variant.value,
                "k": self.k,
                "labeled": dict(sorted(self.labeled.items())),
                "pool": sorted(self.pool),
                "audit": [record.to_dict() for record in self.audit],
                "manifest": self.store.manifest.to_dict(),
            }
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
            return {"path": str(path), "labels": len(self.labeled), "audit_entries": len(self.audit)}


def restore_state(
    path: str | Path,
    pool: Sequence[ParsedInstance],
    store: IndexStore,
    provider: EmbeddingProvider,
    variant: PatternVariant = PatternVariant.SDP_DEP_NER,
    k: int = 5,
    extra_labels: Sequence[str] = (),
    known_instances: Sequence[ParsedInstance] = (),
) -> AnnotationState:
    """Rebuild an AnnotationState by replaying a snapshot's audit log against
    the original pool and base store.

    The snapshot is validated in full before anything is replayed, so a
    truncated or malformed file leaves no partial state behind.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise SnapshotError(f"{path}: unreadable snapshot: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("kind") != "annotation-state":
        raise SnapshotError(f"{path}: not an annotation-state snapshot")
    for field_name in ("labeled", "pool", "audit", "version"):
        if field_name not in raw:
            raise SnapshotError(f"{path}: snapshot missing {field_name!r}")
    try:
        records = [AuditRecord.from_dict(entry) for entry in raw["audit"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotError(f"{path}: malformed audit entry: {exc}") from exc
    labeled = raw["labeled"]
    if set(labeled) != {record.instance_id for record in records}:
        raise SnapshotError(f"{path}: audit log and label map disagree")

    state = AnnotationState(
        pool,
        store,
        provider,
        variant=variant,
        k=k,
        extra_labels=tuple(extra_labels) + tuple(sorted(set(labeled.values()) - {NO_RELATION})),
        known_instances=known_instances,
    )
    for record in records:
        state.submit_label(record.instance_id, record.label, record.annotator)
    # replaying assigns fresh timestamps; restore the recorded history
    state.audit = records
    state.version = int(raw["version"])
    return state


class LabelRequest(BaseModel):
    id: str
    label: str
    annotator: str = "anonymous"


class ExportRequest(BaseModel):
    path: str


_PLACEHOLDER = """<!doctype html>
<html><head><title>annotation service</title></head>
<body><h1>Annotation service is running</h1>
<p>No UI bundle found. API lives under <code>/api/*</code>:
queue, instance/{id}, neighbors/{id}, labels, stats, label, export.</p>
</body></html>"""


def create_app(state: AnnotationState, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="pattern-knn annotation service")
    app.state.annotation = state

    @app.get("/api/queue")
    def api_queue(mode: str = "explore", limit: int = 20):
        try:
            items = state.queue(mode, limit)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"mode": mode, "items": [item.to_dict() for item in items]}

    @app.get("/api/instance/{instance_id}")
    def api_instance(instance_id: str):
        try:
            pi = state._instance(instance_id)
        except UnknownInstance:
            raise HTTPException(status_code=404, detail=f"unknown instance {instance_id!r}")
        text, variant, used_fallback = state.engine.render_query(pi)
        return {
            "id": pi.id,
            "tokens": list(pi.instance.tokens),
            "e1_span": list(pi.instance.e1_span),
            "e2_span": list(pi.instance.e2_span),
            "e1_type": pi.instance.e1_type,
            "e2_type": pi.instance.e2_type,
            "pattern": text,
            "variant": variant.value,
            "used_fallback": used_fallback,
            "labeled": instance_id in state.labeled,
            "label": state.labeled.get(instance_id),
            "in_pool": instance_id in state.pool,
        }

    @app.get("/api/neighbors/{instance_id}")
    def api_neighbors(instance_id: str, k: int | None = None):
        try:
            return state.neighbors(instance_id, k)
        except UnknownInstance:
            raise HTTPException(status_code=404, detail=f"unknown instance {instance_id!r}")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/api/labels")
    def api_labels():
        return {
            "relations": state.relation_labels(),
            "no_relation": NO_RELATION,
            "all": state.assignable_labels(),
        }

    @app.get("/api/stats")
    def api_stats():
        return state.stats()

    @app.post("/api/label")
    def api_label(request: LabelRequest):
        try:
            return state.submit_label(request.id, request.label, request.annotator)
        except AlreadyLabeled as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except UnknownInstance as exc:
            raise HTTPException(status_code=404, detail=f"unknown instance {exc}")
        except UnknownLabel as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/api/export")
    def api_export(request: ExportRequest):
        try:
            return state.export_state(request.path)
        except OSError as exc:
            raise HTTPException(status_code=500, detail=f"export failed: {exc}")

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index() -> str:
            return _PLACEHOLDER

    return app
