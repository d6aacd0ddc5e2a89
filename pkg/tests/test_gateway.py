import json
import threading
import time
import urllib.request

import httpx
import numpy as np
import pytest

from oversub.config import ExperimentConfig
from oversub.gateway import Gateway, GatewayServer
from oversub.oracle_client import queryset_from_wire, run_oracle
from oversub.train import Trainer, generate_dataset


def snapshot_with(iteration=0, protos=((0, 5), (1, 3))):
    return {
        "iteration": iteration,
        "losses": {"rep": 0.1, "div": -0.2, "int": 0.05, "im": 0.6, "total": 0.55},
        "prototypes": [{"id": pid, "mu": 0.4, "members": members, "mean_dist": 1.0,
                        "votes": 0, "explanation_id": "svc-00", "series": [0.5, 0.6]}
                       for pid, members in protos],
        "queries": {"prototypes": [], "actions": [], "merge_suggestions": []},
    }


@pytest.fixture()
def server():
    gateway = Gateway()
    gateway.publish_snapshot(snapshot_with())
    srv = GatewayServer(gateway, port=0).start()
    yield gateway, srv
    srv.stop()


def test_state_before_training_is_iteration_zero():
    gateway = Gateway()
    snap = gateway.snapshot()
    assert snap["iteration"] == 0
    assert snap["queries"] == {"prototypes": [], "actions": [], "merge_suggestions": []}


def test_state_and_queries_endpoints(server):
    gateway, srv = server
    with httpx.Client(base_url=srv.address) as client:
        snap = client.get("/state").json()
        assert snap["iteration"] == 0
        assert {p["id"] for p in snap["prototypes"]} == {0, 1}
        q = client.get("/queries").json()
        assert set(q) == {"prototypes", "actions", "merge_suggestions"}
        assert client.get("/nowhere").status_code == 404


def test_feedback_validation_paths(server):
    gateway, srv = server
    with httpx.Client(base_url=srv.address) as client:
        ok = client.post("/feedback", json={"seq": 1, "kind": "up", "target": [0]})
        assert ok.status_code == 200
        assert ok.json()["status"] == "ack"
        assert ok.json()["applies_at_iteration"] == 1

        dup = client.post("/feedback", json={"seq": 1, "kind": "down", "target": [0]})
        assert dup.status_code == 409
        assert dup.json()["code"] == "replay"

        self_merge = client.post("/feedback", json={"seq": 2, "kind": "merge", "target": [1, 1]})
        assert self_merge.status_code == 400
        assert self_merge.json()["code"] == "bad-merge"

        unknown = client.post("/feedback", json={"seq": 2, "kind": "up", "target": [99]})
        assert unknown.status_code == 404
        assert unknown.json()["code"] == "unknown-target"

        # prototype 1 has 3 members; a fresh snapshot with a singleton rejects splits
        gateway.publish_snapshot(snapshot_with(iteration=1, protos=((0, 5), (1, 1))))
        singleton = client.post("/feedback", json={"seq": 2, "kind": "split", "target": [1]})
        assert singleton.status_code == 400
        assert singleton.json()["code"] == "split-singleton"

        bad_kind = client.post("/feedback", json={"seq": 3, "kind": "hug", "target": [0]})
        assert bad_kind.status_code == 400

        action_vote = client.post("/feedback", json={"seq": 3, "kind": "down",
                                                     "target": {"traj": "svc-00", "step": 4}})
        assert action_vote.status_code == 200


def test_events_drain_in_sequence_order(server):
    gateway, srv = server
    with httpx.Client(base_url=srv.address) as client:
        # submit out of order: 2 then 3; a later 1 must be rejected as replayed
        client.post("/feedback", json={"seq": 2, "kind": "up", "target": [0]})
        client.post("/feedback", json={"seq": 3, "kind": "down", "target": [1]})
        late = client.post("/feedback", json={"seq": 1, "kind": "up", "target": [0]})
        assert late.status_code == 409
    events = gateway.drain_events()
    assert [e["seq"] for e in events] == [2, 3]
    assert gateway.drain_events() == []


def test_stream_emits_snapshots(server):
    gateway, srv = server
    got: list[dict] = []

    def reader():
        req = urllib.request.Request(srv.address + "/stream")
        with urllib.request.urlopen(req, timeout=5) as resp:
            for raw in resp:
                line = raw.decode().strip()
                if line.startswith("data: "):
                    got.append(json.loads(line[6:]))
                    if len(got) >= 3:
                        break

    t = threading.Thread(target=reader, daemon=True)
    t.start()
    time.sleep(0.2)
    gateway.publish_snapshot(snapshot_with(iteration=1))
    gateway.publish_snapshot(snapshot_with(iteration=2))
    t.join(timeout=5)
    assert [s["iteration"] for s in got] == [0, 1, 2]


def small_config(**over):
    hitl = {"warmup": 4, "frequency": 2, "u_p": 0.0, "u_a": 0.0, "n_top": 6}
    hitl.update(over.pop("hitl", {}))
    return ExperimentConfig(domain="cloud", epochs=over.pop("epochs", 10),
                            sim={"services": 8, "nodes": 4, "hours": 48},
                            hitl=hitl, **over)


def test_trainer_with_silent_gateway_matches_disabled_hitl():
    cfg = small_config(hitl={"feedback_source": "interactive"})
    trajs = generate_dataset(cfg)
    gateway = Gateway()
    with_gateway = Trainer(cfg, trajs, gateway=gateway).run()
    cfg_off = small_config(hitl={"enabled": False})
    without = Trainer(cfg_off, trajs).run()
    assert [r.total for r in with_gateway.log] == [r.total for r in without.log]


def test_feedback_applies_at_next_boundary():
    cfg = small_config(hitl={"feedback_source": "interactive"}, epochs=30)
    trajs = generate_dataset(cfg)
    gateway = Gateway()
    trainer = Trainer(cfg, trajs, gateway=gateway)
    pid = trainer.model.protos.ids[0]
    submitted = {}

    def client():
        # wait until training has published at least one snapshot, then vote
        while gateway.snapshot()["iteration"] < 1:
            time.sleep(0.005)
        submitted.update(dict(zip(("status", "body"),
                                  gateway.submit({"seq": 1, "kind": "up", "target": [pid]}))))

    t = threading.Thread(target=client, daemon=True)
    t.start()
    result = trainer.run()
    t.join(timeout=5)
    assert submitted["status"] == 200
    assert submitted["body"]["applies_at_iteration"] >= 1
    assert result.ledger.proto_votes.get(pid) == 1
    votes = {p["id"]: p["votes"] for p in result.final_snapshot["prototypes"]}
    assert votes[pid] == 1


def test_serve_oracle_end_to_end():
    cfg = small_config(hitl={"feedback_source": "interactive"}, epochs=16)
    trajs = generate_dataset(cfg)
    gateway = Gateway()
    server = GatewayServer(gateway, port=0).start()
    trainer = Trainer(cfg, trajs, gateway=gateway)

    summary = {}

    def oracle():
        summary.update(run_oracle(server.address, poll_seconds=0.05))

    t = threading.Thread(target=oracle, daemon=True)
    t.start()
    result = trainer.run()
    time.sleep(0.3)
    server.stop()
    t.join(timeout=10)
    assert summary["events_rejected"] == 0
    if result.queries_published:
        assert summary["answered_querysets"] >= 1
        assert not result.ledger.is_empty() or result.edits


def test_queryset_from_wire_round_trip():
    snap = snapshot_with()
    snap["queries"] = {"prototypes": [1], "actions": [{"traj": "svc-00", "step": 3,
                                                       "a": 0.4, "a_expert": 0.7,
                                                       "risk": True}],
                       "merge_suggestions": [[0, 1]]}
    qs = queryset_from_wire(snap)
    assert qs.prototype_queries[0].id == 1
    assert qs.prototype_queries[0].members == 3
    assert qs.action_queries[0].risk is True
    assert qs.suggested_merges == [(0, 1)]
