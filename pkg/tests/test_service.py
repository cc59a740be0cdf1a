"""Annotation loop: queues, label submission, snapshots, and the HTTP layer."""

from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from pkre.corpus import NO_RELATION
from pkre.index import build_store
from pkre.patterns import PatternVariant
from pkre.service import (
    AlreadyLabeled,
    AnnotationState,
    SnapshotError,
    UnknownInstance,
    UnknownLabel,
    create_app,
    restore_state,
)

from conftest import labeled_instance, small_corpus

SDP = PatternVariant.SDP


def make_state(provider, dev_per_class=1, extra_pool=(), k=2) -> AnnotationState:
    train, dev = small_corpus(per_class=3, dev_per_class=dev_per_class)
    store = build_store(train, [SDP], provider, source_splits=("train",))
    return AnnotationState(
        pool=list(dev) + list(extra_pool),
        store=store,
        provider=provider,
        variant=SDP,
        k=k,
        known_instances=train,
    )


def twins():
    """Two unlabeled instances with identical patterns under an unseen label."""
    return [
        labeled_instance("dv_tw_0", "founder_of", ("GPE", "GPE"), split="dev"),
        labeled_instance("dv_tw_1", "founder_of", ("GPE", "GPE"), split="dev"),
    ]


# -- queues ---------------------------------------------------------------------


def test_cold_start_explore_lists_everything_exploit_nothing(provider):
    _, dev = small_corpus(per_class=0, dev_per_class=2)
    empty_store = build_store([], [SDP], provider)
    state = AnnotationState(dev, empty_store, provider, variant=SDP, k=2)
    explore = state.queue("explore", limit=10)
    assert [item.instance_id for item in explore] == sorted(pi.id for pi in dev)
    assert all(item.best_similarity is None for item in explore)
    assert all(item.suggested_label is None for item in explore)
    assert state.queue("exploit", limit=10) == []


def test_explore_ranks_most_novel_first(provider):
    state = make_state(provider, extra_pool=twins())
    items = state.queue("explore", limit=50)
    assert len(items) == len(state.pool)
    sims = [item.best_similarity for item in items]
    assert sims == sorted(sims)  # least similar (most novel) first
    # the dev instances that replicate training patterns sit at the back
    assert items[-1].best_similarity == pytest.approx(1.0, abs=1e-5)
    assert items[0].instance_id in {"dv_tw_0", "dv_tw_1"}


def test_exploit_ranks_most_confident_first_with_suggestions(provider):
    state = make_state(provider, dev_per_class=2)
    items = state.queue("exploit", limit=3)
    assert [item.best_similarity for item in items] == pytest.approx([1.0] * 3, abs=1e-5)
    for item in items:
        gold = state.instances[item.instance_id].instance.gold_label
        assert item.suggested_label == gold
        assert item.evidence and item.evidence[0]["similarity"] == pytest.approx(1.0, abs=1e-5)


def test_queue_respects_limit_and_rejects_junk(provider):
    state = make_state(provider, dev_per_class=2)
    assert len(state.queue("explore", limit=2)) == 2
    with pytest.raises(ValueError, match="mode"):
        state.queue("review")
    with pytest.raises(ValueError, match="limit"):
        state.queue("explore", limit=-1)


# -- labeling ---------------------------------------------------------------------


def test_submit_label_grows_the_target_bucket(provider):
    state = make_state(provider, extra_pool=twins())
    receipt = state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    assert receipt["accepted"] is True
    assert receipt["bucket"] == "founder_of"
    assert receipt["new_bucket_size"] == 1
    assert receipt["bucket_sizes"] == {"sdp": 1, "sentence": 1}
    assert receipt["version"] == 1
    assert "dv_tw_0" not in state.pool
    assert state.labeled["dv_tw_0"] == "founder_of"
    assert len(state.audit) == 1 and state.audit[0].annotator == "ann"


def test_read_your_writes_changes_the_twin_queue(provider):
    state = make_state(provider, extra_pool=twins())
    before = {item.instance_id: item for item in state.queue("exploit", limit=50)}
    assert before["dv_tw_1"].best_similarity < 0.999  # nothing similar indexed yet

    state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    # the twin's identical pattern now has a perfect match in the live index
    after = {item.instance_id: item for item in state.queue("exploit", limit=50)}
    twin = after["dv_tw_1"]
    assert twin.best_similarity == pytest.approx(1.0, abs=1e-5)
    assert twin.suggested_label == "founder_of"
    payload = state.neighbors("dv_tw_1", k=1)
    assert payload["suggested_label"] == "founder_of"
    winning = payload["buckets"][0]
    assert winning["bucket"] == "founder_of"
    assert winning["neighbors"][0]["id"] == "dv_tw_0"


def test_no_relation_labels_route_to_pair_buckets(provider):
    state = make_state(provider, extra_pool=twins())
    receipt = state.submit_label("dv_tw_1", NO_RELATION, annotator="ann")
    assert receipt["bucket"] == "no_relation(GPE,GPE)"
    assert state.store.manifest.bucket_counts["sdp"]["no_relation(GPE,GPE)"] == 1


def test_submit_label_error_cases(provider):
    state = make_state(provider, extra_pool=twins())
    state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    with pytest.raises(AlreadyLabeled):
        state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    with pytest.raises(UnknownInstance):
        state.submit_label("ghost", "founder_of", annotator="ann")
    with pytest.raises(UnknownLabel, match="expected one of"):
        state.submit_label("dv_tw_1", "not_a_label", annotator="ann")
    assert state.version == 1  # failed submissions change nothing


def test_version_counts_only_mutations(provider):
    state = make_state(provider, extra_pool=twins())
    state.queue("explore")
    state.queue("exploit")
    state.neighbors("dv_tw_0")
    assert state.version == 0
    state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    state.submit_label("dv_tw_1", "founder_of", annotator="ann")
    assert state.version == 2


def test_label_inventory(provider):
    train, dev = small_corpus(per_class=1)
    store = build_store(train, [SDP], provider)
    state = AnnotationState(
        dev, store, provider, variant=SDP, k=2, extra_labels=("special_rel",)
    )
    labels = state.relation_labels()
    assert "special_rel" in labels
    assert "acquired_by" in labels and "employee_of" in labels
    assert NO_RELATION not in labels
    assert state.assignable_labels()[-1] == NO_RELATION


def test_fallback_rate_counts_unparseable_pool(provider):
    broken = labeled_instance("dv_broken", "acquired_by", ("ORG", "ORG"), split="dev", parse_failed=True)
    state = make_state(provider, extra_pool=[broken])
    assert state.fallback_rate() == pytest.approx(1 / len(state.pool))
    assert state.stats()["fallback_rate"] == state.fallback_rate()


def test_neighbors_k_zero_returns_shell(provider):
    state = make_state(provider)
    some_id = state.pool[0]
    payload = state.neighbors(some_id, k=0)
    assert payload["buckets"] == []
    assert "suggested_label" not in payload
    assert payload["pattern"]
    with pytest.raises(ValueError):
        state.neighbors(some_id, k=-1)
    with pytest.raises(UnknownInstance):
        state.neighbors("ghost")


def test_stats_shape(provider):
    state = make_state(provider, extra_pool=twins())
    state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    stats = state.stats()
    assert stats["pool_size"] == len(state.pool)
    assert stats["labeled_count"] == 1
    assert stats["labels_per_class"] == {"founder_of": 1}
    assert stats["version"] == 1
    assert stats["index"]["dimension"] == 32
    assert stats["variant"] == "sdp"
    assert stats["manifest"]["bucket_counts"] == state.store.manifest.bucket_counts


# -- snapshots ----------------------------------------------------------------------


def rebuild_state(provider, extra_pool):
    """A fresh state over the same deterministic corpus and store."""
    return make_state(provider, extra_pool=extra_pool)


def test_export_then_restore_reproduces_state(provider, tmp_path):
    state = make_state(provider, extra_pool=twins())
    state.submit_label("dv_tw_0", "founder_of", annotator="ann")
    state.submit_label("dv_tw_1", NO_RELATION, annotator="bee")
    snapshot = tmp_path / "state.json"
    receipt = state.export_state(snapshot)
    assert receipt["labels"] == 2

    train, dev = small_corpus(per_class=3, dev_per_class=1)
    fresh_store = build_store(train, [SDP], provider, source_splits=("train",))
    restored = restore_state(
        snapshot,
        pool=list(dev) + twins(),
        store=fresh_store,
        provider=provider,
        variant=SDP,
        k=2,
        known_instances=train,
    )
    assert restored.labeled == state.labeled
    assert sorted(restored.pool) == sorted(state.pool)
    assert restored.version == state.version
    assert [r.to_dict() for r in restored.audit] == [r.to_dict() for r in state.audit]
    assert restored.store.manifest.bucket_counts == state.store.manifest.bucket_counts

    again = tmp_path / "again.json"
    restored.export_state(again)
    assert json.loads(again.read_text()) == json.loads(snapshot.read_text())


def test_restore_rejects_malformed_snapshots(provider, tmp_path):
    train, dev = small_corpus(per_class=1)
    store = build_store(train, [SDP], provider)

    truncated = tmp_path / "cut.json"
    truncated.write_text('{"kind": "annotation-')
    with pytest.raises(SnapshotError, match="unreadable"):
        restore_state(truncated, dev, store, provider, variant=SDP)

    wrong_kind = tmp_path / "kind.json"
    wrong_kind.write_text(json.dumps({"kind": "something-else"}))
    with pytest.raises(SnapshotError, match="not an annotation-state"):
        restore_state(wrong_kind, dev, store, provider, variant=SDP)

    disagreeing = tmp_path / "mismatch.json"
    disagreeing.write_text(
        json.dumps(
            {
                "kind": "annotation-state",
                "version": 1,
                "labeled": {"x": "a"},
                "pool": [],
                "audit": [],
            }
        )
    )
    with pytest.raises(SnapshotError, match="disagree"):
        restore_state(disagreeing, dev, store, provider, variant=SDP)


# -- HTTP layer -----------------------------------------------------------------------


@pytest.fixture
def client(provider):
    state = make_state(provider, extra_pool=twins())
    return TestClient(create_app(state)), state


def test_api_queue_modes(client):
    http, state = client
    reply = http.get("/api/queue", params={"mode": "exploit", "limit": 2})
    assert reply.status_code == 200
    body = reply.json()
    assert body["mode"] == "exploit"
    assert len(body["items"]) == 2
    assert http.get("/api/queue", params={"mode": "bogus"}).status_code == 422


def test_api_instance_never_reveals_gold_labels(client):
    http, state = client
    some_id = state.pool[0]
    reply = http.get(f"/api/instance/{some_id}")
    assert reply.status_code == 200
    body = reply.json()
    assert body["id"] == some_id
    assert body["in_pool"] is True
    assert body["labeled"] is False and body["label"] is None
    assert "gold" not in json.dumps(body)  # annotators must not see answers
    assert http.get("/api/instance/ghost").status_code == 404


def test_api_neighbors_and_labels(client):
    http, state = client
    some_id = state.pool[0]
    body = http.get(f"/api/neighbors/{some_id}", params={"k": 2}).json()
    assert body["k"] == 2
    assert body["buckets"]
    for bucket in body["buckets"]:
        assert len(bucket["neighbors"]) <= 2
    labels = http.get("/api/labels").json()
    assert labels["no_relation"] == NO_RELATION
    assert labels["all"] == labels["relations"] + [NO_RELATION]
    assert http.get("/api/neighbors/ghost").status_code == 404


def test_api_label_lifecycle(client):
    http, state = client
    queue_before = http.get("/api/queue", params={"mode": "explore", "limit": 100}).json()
    reply = http.post(
        "/api/label", json={"id": "dv_tw_0", "label": "founder_of", "annotator": "ui"}
    )
    assert reply.status_code == 200
    body = reply.json()
    assert body["accepted"] is True and body["new_bucket_size"] == 1
    queue_after = http.get("/api/queue", params={"mode": "explore", "limit": 100}).json()
    assert len(queue_after["items"]) == len(queue_before["items"]) - 1
    assert http.post("/api/label", json={"id": "dv_tw_0", "label": "founder_of"}).status_code == 409
    assert http.post("/api/label", json={"id": "ghost", "label": "founder_of"}).status_code == 404
    assert http.post("/api/label", json={"id": "dv_tw_1", "label": "zzz"}).status_code == 422
    assert http.get("/api/stats").json()["labeled_count"] == 1


def test_api_export_writes_snapshot(client, tmp_path):
    http, state = client
    target = tmp_path / "snap.json"
    reply = http.post("/api/export", json={"path": str(target)})
    assert reply.status_code == 200
    assert json.loads(target.read_text())["kind"] == "annotation-state"


def test_placeholder_page_without_ui_bundle(client):
    http, _ = client
    reply = http.get("/")
    assert reply.status_code == 200
    assert "Annotation service is running" in reply.text


def test_static_ui_mount(provider, tmp_path):
    state = make_state(provider)
    ui = tmp_path / "ui"
    ui.mkdir()
    (ui / "index.html").write_text("<html><body>bundled ui</body></html>")
    http = TestClient(create_app(state, static_dir=ui))
    assert "bundled ui" in http.get("/").text
    assert http.get("/api/stats").status_code == 200  # API still reachable
