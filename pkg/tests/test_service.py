from __future__ import annotations

import http.client
import json
import logging
import threading
from pathlib import Path

import pytest

from ipbac.client import DecisionClient, ServiceError
from ipbac.engine import EngineConfig
from ipbac.service import DecisionServer, DecisionService, parse_interaction

from helpers import T0, digest

POLICY = {
    "roles": {"viewer": [{"resource": "incident/*", "action": "read"}]},
    "assignments": {"alice": ["viewer"]},
}


def interaction_doc(principal, event_id, at, **extra):
    doc = {
        "principal": principal,
        "event": {"event_id": event_id, "kind": "service_call", "initiator": principal, "occurred_at": at},
        "participants": [principal, "peer"],
        "messages": [{"seq": 0, "sender": principal, "receiver": "peer", "payload_digest": digest(event_id).hex()}],
        "resource": "incident/1",
        "action": "read",
        "outcome": "success",
        "context_tags": ["ward:icu"],
        "recorded_at": at,
    }
    doc.update(extra)
    return doc


class Running:
    def __init__(self, data_dir: Path, config: EngineConfig, fsync: bool = False):
        self.data_dir = data_dir
        self.service = DecisionService(data_dir, config, fsync=fsync)
        self.server = DecisionServer(("127.0.0.1", 0), self.service)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)
        self.thread.start()
        self.url = self.server.url

    def client(self) -> DecisionClient:
        return DecisionClient(self.url)

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def policy_file(tmp_path) -> Path:
    path = tmp_path / "policy.json"
    path.write_text(json.dumps(POLICY))
    return path


@pytest.fixture
def running(tmp_path, policy_file):
    r = Running(tmp_path / "data", EngineConfig(policy_path=str(policy_file)))
    yield r
    r.stop()


@pytest.fixture
def client(running):
    with running.client() as c:
        yield c


def raw(url: str, method: str, path: str, body: bytes | None = None, headers=None):
    host, port = url.removeprefix("http://").split(":")
    conn = http.client.HTTPConnection(host, int(port), timeout=10)
    conn.request(method, path, body=body, headers=headers or {})
    resp = conn.getresponse()
    doc = json.loads(resp.read())
    conn.close()
    return resp.status, doc


class TestDecide:
    def test_rbac_allow(self, client):
        out = client.decide({"principal": "alice", "resource": "incident/42", "action": "read", "requested_at": T0})
        assert out["decision"]["outcome"] == "full"
        assert out["decision"]["path"] == "non_fuzzy"
        assert out["decision"]["ds"] is None
        assert "trace" in out["decision"] and out["decision"]["record_hash"]
        assert isinstance(out["seq"], int) and isinstance(out["server_time_ms"], int)

    def test_fuzzy_response_self_describing(self, client):
        out = client.decide({"principal": "alice", "resource": "billing/1", "action": "write", "requested_at": T0})
        d = out["decision"]
        assert d["path"] == "fuzzy" and d["outcome"] == "deny"
        assert d["ds"] == pytest.approx(1 / 6)
        assert any(step.startswith("decision_score:") for step in d["trace"])

    def test_seq_increases(self, client):
        seqs = [client.get_config()["seq"] for _ in range(5)]
        assert seqs == sorted(seqs) and len(set(seqs)) == 5

    def test_unknown_principal_created(self, client, running):
        client.decide({"principal": "newcomer", "resource": "incident/1", "action": "read"})
        assert client.verify("newcomer")["report"] == {"valid": True, "first_bad_index": None, "length": 1}

    def test_durable_before_response(self, client, running):
        out = client.decide({"principal": "alice", "resource": "incident/1", "action": "read", "requested_at": T0})
        line = running.service.store.path_for("alice").read_text().splitlines()[-1]
        assert line.split("\t")[1] == out["decision"]["record_hash"]

    def test_empty_body(self, running):
        status, doc = raw(running.url, "POST", "/v1/decide", b"")
        assert status == 400 and doc["error"]["code"] == "MALFORMED"

    @pytest.mark.parametrize(
        "body",
        [
            b"{not json",
            b"[]",
            b'{"principal": "alice", "resource": "x"}',
            b'{"principal": "", "resource": "x", "action": "read"}',
            b'{"principal": "alice", "resource": "x", "action": "read", "requested_at": "soon"}',
            b'{"principal": "alice", "resource": "x", "action": "read", "context_tags": "a"}',
        ],
    )
    def test_malformed(self, running, body):
        status, doc = raw(running.url, "POST", "/v1/decide", body, {"Content-Type": "application/json"})
        assert status == 400 and doc["error"]["code"] == "MALFORMED"

    def test_routes(self, running):
        assert raw(running.url, "GET", "/v1/decide")[0] == 405
        assert raw(running.url, "GET", "/v2/nothing")[0] == 404
        assert raw(running.url, "DELETE", "/v1/config")[0] == 405

    def test_oversized_body(self, running):
        status, doc = raw(running.url, "POST", "/v1/decide", b"{}", {"Content-Length": str(1 << 21)})
        assert status == 400

    def test_two_concurrent_requests(self, running):
        barrier = threading.Barrier(2)
        results = []

        def go():
            with running.client() as c:
                barrier.wait()
                results.append(c.decide({"principal": "bob", "resource": "incident/1", "action": "read"}))

        threads = [threading.Thread(target=go) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(results) == 2
        with running.client() as c:
            assert c.verify("bob")["report"] == {"valid": True, "first_bad_index": None, "length": 2}

    def test_many_concurrent_clients(self, running):
        def go(k):
            with running.client() as c:
                for i in range(20):
                    c.decide({"principal": f"u{k % 3}", "resource": f"incident/{i}", "action": "read"})

        threads = [threading.Thread(target=go, args=(k,)) for k in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        with running.client() as c:
            lengths = [c.verify(f"u{k}")["report"]["length"] for k in range(3)]
            assert all(c.verify(f"u{k}")["report"]["valid"] for k in range(3))
        assert sum(lengths) == 120

    def test_request_log(self, client, caplog):
        with caplog.at_level(logging.INFO, logger="ipbac.requests"):
            client.decide({"principal": "alice", "resource": "incident/1", "action": "read"})
        entry = json.loads(caplog.records[-1].getMessage())
        assert set(entry) == {"ts", "principal", "resource", "action", "path", "outcome", "ds", "latency_us"}
        assert entry["latency_us"] > 0


class TestInteractions:
    def test_append(self, client):
        first = client.record_interaction(interaction_doc("carol", "e1", T0))
        second = client.record_interaction(interaction_doc("carol", "e2", T0 + 1000))
        assert len(first["record_hash"]) == 64 and (first["length"], second["length"]) == (1, 2)

    def test_chronology(self, client):
        client.record_interaction(interaction_doc("carol", "e1", T0))
        with pytest.raises(ServiceError) as exc:
            client.record_interaction(interaction_doc("carol", "e2", T0 - 3_600_000))
        assert exc.value.status == 409 and exc.value.code == "CHRONOLOGY"

    def test_duplicate_event(self, client):
        client.record_interaction(interaction_doc("carol", "e1", T0))
        with pytest.raises(ServiceError) as exc:
            client.record_interaction(interaction_doc("carol", "e1", T0 + 1))
        assert exc.value.status == 409 and exc.value.code == "DUPLICATE_EVENT"

    @pytest.mark.parametrize(
        "change",
        [
            {"outcome": "maybe"},
            {"participants": ["carol"]},
            {"messages": [{"seq": 0, "sender": "carol", "receiver": "peer", "payload_digest": "zz"}]},
            {"messages": [{"seq": 3, "sender": "carol", "receiver": "peer", "payload_digest": "00" * 32}]},
            {"event": {"event_id": "e"}},
        ],
    )
    def test_bad_documents(self, client, change):
        with pytest.raises(ServiceError) as exc:
            client.record_interaction(interaction_doc("carol", "e1", T0, **change))
        assert exc.value.status == 400 and exc.value.code == "MALFORMED"

    def test_parse_defaults(self):
        doc = interaction_doc("carol", "e1", T0)
        del doc["recorded_at"], doc["messages"], doc["context_tags"]
        kw = parse_interaction(doc, now_ms=T0 + 5)
        assert kw["recorded_at"] == T0 + 5 and kw["context_tags"] == frozenset()

    def test_fifteen_thousand_then_verify(self, client, running):
        for i in range(15_000):
            client.record_interaction(interaction_doc("bulk", f"e{i}", T0 + i))
        report = client.verify("bulk")["report"]
        assert report == {"valid": True, "first_bad_index": None, "length": 15_000}


class TestVerify:
    def test_unknown_404(self, client):
        with pytest.raises(ServiceError) as exc:
            client.verify("ghost")
        assert exc.value.status == 404

    def test_tampered(self, client, running):
        for i in range(5):
            client.record_interaction(interaction_doc("carol", f"e{i}", T0 + i))
        path = running.service.store.path_for("carol")
        lines = path.read_text().splitlines(keepends=True)
        body, h = lines[2].split("\t")
        flipped = body[:-1] + ("0" if body[-1] != "0" else "1")
        lines[2] = flipped + "\t" + h
        path.write_text("".join(lines))
        assert client.verify("carol")["report"] == {"valid": False, "first_bad_index": 2, "length": 5}

    def test_quarantined_after_restart(self, tmp_path, policy_file):
        cfg = EngineConfig(policy_path=str(policy_file))
        first = Running(tmp_path / "d", cfg)
        with first.client() as c:
            for i in range(3):
                c.record_interaction(interaction_doc("carol", f"e{i}", T0 + i))
        path = first.service.store.path_for("carol")
        first.stop()
        path.write_bytes(path.read_bytes().replace(b"\t", b"\tff", 1)[:-1])
        second = Running(tmp_path / "d", cfg)
        try:
            with second.client() as c:
                assert c.verify("carol")["report"]["valid"] is False
                with pytest.raises(ServiceError) as exc:
                    c.decide({"principal": "carol", "resource": "incident/1", "action": "read"})
                assert exc.value.status == 409 and exc.value.code == "QUARANTINED"
        finally:
            second.stop()


class TestConfig:
    def test_put_invalid_alpha(self, client):
        with pytest.raises(ServiceError) as exc:
            client.put_config({"alpha": 1.5})
        assert exc.value.status == 422
        assert "alpha" in exc.value.document["error"]["fields"]
        assert client.get_config()["config"]["alpha"] == 0.2645

    def test_put_then_get(self, client):
        client.put_config({"alpha": 0.5})
        client.put_config({"alpha": 0.2645})
        assert client.get_config()["config"]["alpha"] == 0.2645

    @pytest.mark.parametrize(
        "change, status",
        [({"theta": 0}, 422), ({"nope": 1}, 422), ({"rule_base_path": "/does/not/exist.fis"}, 422), ([1], 400)],
    )
    def test_put_rejections(self, running, change, status):
        code, _ = raw(running.url, "PUT", "/v1/config", json.dumps(change).encode())
        assert code == status

    def test_config_survives_restart(self, tmp_path, policy_file):
        cfg = EngineConfig(policy_path=str(policy_file))
        first = Running(tmp_path / "d", cfg)
        with first.client() as c:
            c.put_config({"alpha": 0.4, "theta": 0.5})
        first.stop()
        second = Running(tmp_path / "d", cfg)
        try:
            with second.client() as c:
                got = c.get_config()["config"]
                assert (got["alpha"], got["theta"]) == (0.4, 0.5)
        finally:
            second.stop()

    def test_half_life_change_applies(self, client, running):
        client.record_interaction(interaction_doc("carol", "e1", T0))
        client.put_config({"half_life_ms": 1000.0})
        assert running.service.store.get("carol").aggregates.half_life_ms == 1000.0
        out = client.decide({"principal": "carol", "resource": "billing/1", "action": "read", "requested_at": T0 + 10})
        assert out["decision"]["ds"] is not None

    def test_alpha_swap_changes_decisions(self, client):
        doc = {"principal": "dave", "resource": "billing/1", "action": "write"}
        assert client.decide(doc)["decision"]["outcome"] == "deny"
        client.put_config({"alpha": 0.0})
        assert client.decide(doc)["decision"]["outcome"] == "full"


class TestPolicyReload:
    def test_reload(self, client, policy_file):
        doc = {"principal": "alice", "resource": "billing/1", "action": "read"}
        assert client.decide(doc)["decision"]["path"] == "fuzzy"
        policy_file.write_text(json.dumps({
            "roles": {"viewer": [{"resource": "incident/*", "action": "read"},
                                 {"resource": "billing/*", "action": "read"}]},
            "assignments": {"alice": ["viewer"]},
        }))
        out = client.reload_policy()
        assert out["roles"] == 1 and out["assignments"] == 1
        assert client.decide(doc)["decision"]["path"] == "non_fuzzy"

    def test_invalid_policy_keeps_old(self, client, policy_file):
        policy_file.write_text("{broken")
        with pytest.raises(ServiceError) as exc:
            client.reload_policy()
        assert exc.value.status == 422
        out = client.decide({"principal": "alice", "resource": "incident/1", "action": "read"})
        assert out["decision"]["path"] == "non_fuzzy"

    def test_no_policy_path(self, tmp_path):
        r = Running(tmp_path / "d", EngineConfig())
        try:
            with r.client() as c:
                with pytest.raises(ServiceError) as exc:
                    c.reload_policy()
                assert exc.value.status == 409
        finally:
            r.stop()
