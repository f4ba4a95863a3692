"""Service checks: queue generation satisfies the high-confidence goal, lease
semantics, the three-decision log with replay, progress/agreement accounting,
and all HTTP status codes."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from robustkit import attack as atk
from robustkit import data, nn, service as svc, train


@pytest.fixture(scope="module")
def trained():
    ds = data.gen_blobs(3, 60, 0.14, seed=21)
    cfg = train.TrainConfig(epochs=10, batch_size=32, seed=3,
                            schedule=nn.ScheduleConfig(base_lr=0.2,
                                                       warmup_epochs=2,
                                                       step_epochs=(8,)))
    net, _ = train.train(cfg, ds)
    return net, ds


@pytest.fixture(scope="module")
def queue_items(trained):
    net, ds = trained
    items = svc.generate_queue(net, ds, size=6, margin=0.5, steps=200, seed=0)
    assert len(items) == 6
    return items


def _queue(tmp_path, items, **kwargs):
    import copy
    fresh = copy.deepcopy(items)
    return svc.AnnotationQueue(fresh, tmp_path / "log.jsonl", **kwargs)


class TestQueueGeneration:
    def test_items_satisfy_high_confidence_goal(self, trained, queue_items):
        net, _ = trained
        for item in queue_items:
            s = net.predict_proba(item.adversarial)
            assert atk.goal_high_confidence(s, item.original_label, 0.5)
            assert item.adversarial.min() >= 0 and item.adversarial.max() <= 1

    def test_save_load_round_trip(self, tmp_path, queue_items):
        svc.save_queue(queue_items, tmp_path / "q")
        back = svc.load_queue(tmp_path / "q")
        assert [i.id for i in back] == [i.id for i in queue_items]
        np.testing.assert_array_equal(back[0].adversarial,
                                      queue_items[0].adversarial)

    def test_verify_rejects_wrong_checkpoint(self, tmp_path, queue_items, trained):
        _, ds = trained
        other = nn.build_preset("mlp-2d", (2,), 3, rng=np.random.default_rng(99))
        with pytest.raises(svc.ServiceError):
            svc.verify_queue(other, queue_items, margin=0.5)


class TestLeasing:
    def test_item_not_offered_twice_concurrently(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items, lease_seconds=600)
        a = q.next_item("alice")
        b = q.next_item("bob")
        assert a.id != b.id

    def test_lease_expiry_returns_item(self, tmp_path, queue_items):
        now = [1000.0]
        q = _queue(tmp_path, queue_items, lease_seconds=10,
                   clock=lambda: now[0])
        first = q.next_item("alice")
        now[0] += 11
        again = q.next_item("bob")
        assert again.id == first.id

    def test_decided_items_leave_the_pool(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items)
        seen = set()
        while (item := q.next_item("alice")) is not None:
            q.submit(item.id, "unchanged", "alice")
            assert item.id not in seen
            seen.add(item.id)
        assert len(seen) == len(queue_items)


class TestLogAndProgress:
    def test_progress_counts_conserve(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items)
        decisions = ["unchanged", "unsure", "changed"] * 2
        for d in decisions:
            item = q.next_item("alice")
            q.submit(item.id, d, "alice")
        p = q.progress()
        assert p["decided"] == 6 and p["remaining"] == 0
        assert p["counts"] == {"unchanged": 2, "unsure": 2, "changed": 2}
        assert sum(p["counts"].values()) == p["total"]

    def test_replay_reconstructs_progress(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items)
        for d in ("unchanged", "changed"):
            item = q.next_item("a")
            q.submit(item.id, d, "a")
        before = q.progress()
        replayed = _queue(tmp_path, queue_items)  # same log path
        assert replayed.progress() == before

    def test_double_submit_rejected(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items)
        item = q.next_item("a")
        q.submit(item.id, "unsure", "a")
        with pytest.raises(FileExistsError):
            q.submit(item.id, "unchanged", "b")

    def test_overlap_mode_agreement(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items, allow_overlap=True, lease_seconds=0)
        ids = [i.id for i in queue_items]
        # alice decides all six, bob re-decides four (two agreeing)
        for iid in ids:
            q.submit(iid, "unchanged", "alice")
        for iid, d in zip(ids[:4], ["unchanged", "unchanged", "changed", "unsure"]):
            q.submit(iid, d, "bob")
        p = q.progress()
        assert p["shared"] == 4
        assert p["agreement"] == pytest.approx(2 / 4)
        with pytest.raises(FileExistsError):
            q.submit(ids[0], "changed", "alice")  # same annotator, same item


class TestHttpApi:
    @pytest.fixture()
    def client(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items)
        return TestClient(svc.build_app(q))

    def test_full_annotation_round(self, client, queue_items):
        served = 0
        while True:
            r = client.get("/api/queue/next", params={"annotator": "t"})
            if r.status_code == 204:
                break
            assert r.status_code == 200
            item = r.json()
            served += 1
            post = client.post("/api/annotations",
                               json={"id": item["id"], "decision": "unchanged",
                                     "annotator": "t"})
            assert post.status_code == 200
        assert served == len(queue_items)
        p = client.get("/api/progress").json()
        assert p["counts"]["unchanged"] == len(queue_items)
        assert p["remaining"] == 0

    def test_error_codes(self, client, queue_items):
        item = client.get("/api/queue/next").json()
        ok = client.post("/api/annotations",
                         json={"id": item["id"], "decision": "changed"})
        assert ok.status_code == 200
        dup = client.post("/api/annotations",
                          json={"id": item["id"], "decision": "changed"})
        assert dup.status_code == 409
        missing = client.post("/api/annotations",
                              json={"id": "nope", "decision": "changed"})
        assert missing.status_code == 404
        bad = client.post("/api/annotations", json={"id": item["id"]})
        assert bad.status_code == 400
        bad2 = client.post("/api/annotations",
                           json={"id": item["id"], "decision": "perhaps"})
        assert bad2.status_code == 400

    def test_image_endpoint_rgba_and_aetn(self, client, queue_items):
        item_id = queue_items[0].id
        r = client.get(f"/api/image/{item_id}", params={"kind": "original"})
        assert r.status_code == 200
        w = int(r.headers["X-Image-Width"])
        h = int(r.headers["X-Image-Height"])
        assert len(r.content) == w * h * 4
        r2 = client.get(f"/api/image/{item_id}",
                        headers={"Accept": "application/x-aetn"})
        assert r2.content[:4] == b"AETN"
        assert client.get("/api/image/ghost").status_code == 404
        assert client.get(f"/api/image/{item_id}",
                          params={"kind": "negative"}).status_code == 400

    def test_diff_view(self, client, queue_items):
        item_id = queue_items[0].id
        r = client.get(f"/api/image/{item_id}", params={"kind": "diff"})
        assert r.status_code == 200


class TestRecordSchema:
    def test_log_lines_carry_version_and_fields(self, tmp_path, queue_items):
        q = _queue(tmp_path, queue_items)
        item = q.next_item("a")
        q.submit(item.id, "unchanged", "a")
        line = (tmp_path / "log.jsonl").read_text().strip()
        rec = json.loads(line)
        assert rec["v"] == 1
        assert set(rec) == {"id", "source_example_id", "adversarial_image",
                            "original_label", "predicted_adversarial_class",
                            "decision", "annotator", "timestamp", "v"}
