from __future__ import annotations

import json
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ipbac.engine as engine
from ipbac.engine import (
    DEFAULT_ALPHA,
    AccessLevel,
    AccessRequest,
    Decision,
    DecisionPath,
    EngineConfig,
    decide,
    load_config,
    mask_permissions,
    review_threshold,
)
from ipbac.errors import ChainMismatch, ConfigError, InsufficientData, InvalidLevel, OutOfDomain
from ipbac.policy import MinSuccessfulInteractions, Permission, PolicySet, Role, evaluate_rbac
from ipbac.provenance import Outcome, ProvenanceChain, verify_chain

from helpers import DAY, T0, add, random_chain

VIEWER = PolicySet({"viewer": Role("viewer", frozenset({Permission("incident/*", "read")}))}, {"alice": {"viewer"}})


def req(resource="incident/42", action="read", at=T0 + DAY, principal="alice"):
    return AccessRequest(principal, resource, action, at)


def fixed_ds(monkeypatch, value):
    monkeypatch.setattr(engine, "compute_ds", lambda *a, **k: value)


class TestDecide:
    def test_rbac_allows(self, chain):
        d = decide(req(), VIEWER, chain, EngineConfig())
        assert (d.outcome, d.path, d.ds) == (AccessLevel.FULL, DecisionPath.NON_FUZZY, None)
        assert d.trace[-1] == "allow_access"
        assert len(chain) == 1 and chain.head.outcome is Outcome.SUCCESS
        assert d.record_hash == chain.head.record_hash

    def test_fuzzy_full_when_theta_one(self, chain, monkeypatch):
        fixed_ds(monkeypatch, 0.30)
        d = decide(req(action="delete"), VIEWER, chain, EngineConfig(alpha=0.2645, theta=1.0))
        assert (d.outcome, d.path, d.ds) == (AccessLevel.FULL, DecisionPath.FUZZY, 0.30)
        assert d.granted == {Permission("incident/42", a) for a in ("read", "write", "execute", "delete")}
        assert "fuzzy_model" in d.trace and d.trace[-1] == "allow_access"
        assert chain.head.outcome is Outcome.SUCCESS

    def test_ds_equal_to_alpha_denies(self, chain, monkeypatch):
        fixed_ds(monkeypatch, 0.2645)
        d = decide(req(action="write"), VIEWER, chain, EngineConfig(alpha=0.2645))
        assert d.outcome is AccessLevel.DENY and d.ds == 0.2645 and d.path is DecisionPath.FUZZY
        assert chain.head.outcome is Outcome.DENIED

    def test_partial(self, chain, monkeypatch):
        fixed_ds(monkeypatch, 0.9)
        d = decide(req(resource="billing/1", action="write"), VIEWER, chain, EngineConfig(theta=0.3))
        assert d.outcome is AccessLevel.PARTIAL and d.level == 0.3
        assert d.granted == {Permission("billing/1", "read")}
        assert d.granted_access

    def test_empty_history_score(self, chain):
        # a first-contact principal scores 1/6, below the default alpha
        d = decide(req(principal="alice", action="write"), VIEWER, chain, EngineConfig())
        assert d.ds == pytest.approx(1 / 6) and d.outcome is AccessLevel.DENY

    def test_fail_closed_on_scoring_error(self, chain, monkeypatch):
        def boom(*a, **k):
            raise OutOfDomain("bad factor")

        monkeypatch.setattr(engine, "compute_ds", boom)
        d = decide(req(action="write"), VIEWER, chain, EngineConfig(alpha=0.0))
        assert d.outcome is AccessLevel.DENY and d.ds is None
        assert "fuzzy_error:OutOfDomain" in d.trace
        assert chain.head.outcome is Outcome.DENIED

    def test_fail_closed_on_unexpected_error(self, chain, monkeypatch):
        monkeypatch.setattr(engine, "compute_ds", lambda *a, **k: 1 / 0)
        assert decide(req(action="write"), VIEWER, chain, EngineConfig(alpha=0.0)).outcome is AccessLevel.DENY

    def test_fail_closed_on_policy_error(self, chain, monkeypatch):
        from ipbac.errors import PolicyError

        def broken(*a, **k):
            raise PolicyError("corrupt")

        monkeypatch.setattr(engine, "evaluate_rbac", broken)
        d = decide(req(), VIEWER, chain, EngineConfig())
        assert d.outcome is AccessLevel.DENY and "error:POLICY" in d.trace
        assert len(chain) == 1

    def test_chain_mismatch(self):
        with pytest.raises(ChainMismatch):
            decide(req(), VIEWER, ProvenanceChain("bob"), EngineConfig())

    def test_rbac_only_mode(self, chain):
        d = decide(req(action="write"), VIEWER, chain, EngineConfig(alpha=0.0), fuzzy_fallback=False)
        assert d.outcome is AccessLevel.DENY and d.path is DecisionPath.NON_FUZZY and d.ds is None
        assert len(chain) == 1

    def test_predicate_denial_goes_fuzzy(self, chain):
        ps = PolicySet(VIEWER.roles, VIEWER.assignments, {"viewer": [MinSuccessfulInteractions(3, DAY)]})
        d = decide(req(), ps, chain, EngineConfig(alpha=0.0))
        assert d.path is DecisionPath.FUZZY and d.outcome is AccessLevel.FULL
        assert any("PredicateFailed" in step for step in d.trace)

    def test_recorded_at_never_regresses(self, chain):
        add(chain, T0 + 2 * DAY)
        decide(req(at=T0 + DAY), VIEWER, chain, EngineConfig())
        assert chain.head.recorded_at == T0 + 2 * DAY
        assert verify_chain(chain).valid

    def test_caller_event_id_collision(self, chain):
        add(chain, T0, event_id="decision:1")
        decide(req(), VIEWER, chain, EngineConfig())
        assert len({r.interaction.event_ref for r in chain.records}) == 2

    def test_one_record_per_call_and_verifiable(self):
        c = random_chain(1, 50, principal="alice")
        rng = random.Random(2)
        for i in range(100):
            decide(req(resource=f"c{rng.randrange(4)}/1", action=rng.choice(["read", "write"]),
                       at=c.head.recorded_at + 1000), VIEWER, c, EngineConfig())
            assert len(c) == 51 + i
        assert verify_chain(c).valid

    def test_concurrent_same_principal(self):
        c = ProvenanceChain("alice")

        def work():
            for _ in range(25):
                decide(req(action="write"), VIEWER, c, EngineConfig())

        threads = [threading.Thread(target=work) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(c) == 100 and verify_chain(c).valid

    def test_decision_document_roundtrip(self, chain):
        d = decide(req(action="write"), VIEWER, chain, EngineConfig(alpha=0.0, theta=0.5))
        doc = json.loads(json.dumps(d.to_dict()))
        assert doc["outcome"] == "partial" and doc["path"] == "fuzzy"
        assert Decision.from_dict(doc) == d


class TestGrantSuperset:
    @given(seed=st.integers(0, 10**6), alpha=st.floats(0, 1), theta=st.floats(0.01, 1))
    @settings(max_examples=150, deadline=None)
    def test_rbac_allow_implies_grant(self, seed, alpha, theta):
        rng = random.Random(seed)
        perms = [Permission(f"c{rng.randrange(3)}/*", rng.choice(["read", "write"])) for _ in range(3)]
        ps = PolicySet({"r": Role("r", frozenset(perms))}, {"p": {"r"}},
                       {"r": [MinSuccessfulInteractions(rng.randrange(4), 30 * DAY)]} if rng.random() < 0.5 else {})
        chain = random_chain(seed, rng.randrange(30))
        r = AccessRequest("p", f"c{rng.randrange(4)}/{rng.randrange(5)}", rng.choice(["read", "write", "delete"]),
                          (chain.head.recorded_at if chain.head else T0) + DAY)
        rbac = evaluate_rbac(ps, r, chain).allowed
        d = decide(r, ps, chain, EngineConfig(alpha=alpha, theta=theta))
        assert not rbac or d.granted_access


class TestMask:
    @pytest.mark.parametrize(
        "theta, actions",
        [
            (0.3, {"read"}),
            (1 / 3, {"read"}),
            (0.5, {"read", "write"}),
            (2 / 3, {"read", "write"}),
            (0.9, {"read", "write", "execute"}),
            (1.0, {"read", "write", "execute", "delete"}),
        ],
    )
    def test_tiers(self, theta, actions):
        got = mask_permissions(req(resource="incident/7"), theta)
        assert got == {Permission("incident/7", a) for a in actions}

    @pytest.mark.parametrize("theta", [0.0, -0.1, 1.01, float("nan")])
    def test_invalid(self, theta):
        with pytest.raises(InvalidLevel):
            mask_permissions(req(), theta)


def fuzzy_decision(ds, granted):
    outcome = AccessLevel.FULL if granted else AccessLevel.DENY
    return Decision(outcome, DecisionPath.FUZZY, ds=ds)


def best_accuracy_brute(log):
    # scores are multiples of 1e-3 (or well separated), so a 5e-4 step
    # visits every interval between consecutive scores
    grid = [i / 2000 for i in range(2001)]

    def acc(a):
        return sum((d.ds > a) == (d.granted_access == ok) for d, ok in log)

    return max(acc(a) for a in grid), acc


class TestReview:
    def test_all_correct_keeps_alpha(self):
        rng = random.Random(0)
        log = []
        for _ in range(150):
            s = rng.random()
            log.append((fuzzy_decision(s, s > DEFAULT_ALPHA), True))
        assert review_threshold(log, DEFAULT_ALPHA) == DEFAULT_ALPHA

    def test_separable(self):
        rng = random.Random(1)
        log = []
        for _ in range(200):
            s = rng.choice([rng.uniform(0.4, 1.0), rng.uniform(0.0, 0.3)])
            # everything was granted at alpha=0.1; grants above .4 were right
            log.append((fuzzy_decision(s, True), s > 0.4))
        alpha = review_threshold(log, 0.1)
        hi = min(d.ds for d, ok in log if ok)
        lo = max(d.ds for d, ok in log if not ok)
        assert lo <= alpha < hi
        best, acc = best_accuracy_brute(log)
        assert acc(alpha) == best == len(log)

    @given(seed=st.integers(0, 10**6), current=st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_optimal_against_sweep(self, seed, current):
        rng = random.Random(seed)
        log = [(fuzzy_decision(round(rng.random(), 3), rng.random() < 0.5), rng.random() < 0.7) for _ in range(120)]
        best, acc = best_accuracy_brute(log)
        alpha = review_threshold(log, current)
        assert acc(alpha) == best
        assert 0.0 <= alpha <= 1.0

    def test_insufficient(self):
        log = [(fuzzy_decision(0.5, True), True)] * 50
        with pytest.raises(InsufficientData):
            review_threshold(log, DEFAULT_ALPHA)

    def test_non_fuzzy_ignored(self):
        log = [(Decision(AccessLevel.FULL, DecisionPath.NON_FUZZY), True)] * 200
        with pytest.raises(InsufficientData):
            review_threshold(log, DEFAULT_ALPHA)


class TestConfig:
    def test_defaults(self):
        cfg = EngineConfig()
        assert cfg.alpha == 0.2645 and cfg.theta == 1.0 and cfg.kappa == 50.0
        assert cfg.clock_skew_ms == 5_000

    @pytest.mark.parametrize(
        "kw, field",
        [
            ({"alpha": 1.5}, "alpha"),
            ({"alpha": -0.1}, "alpha"),
            ({"theta": 0.0}, "theta"),
            ({"theta": 1.2}, "theta"),
            ({"kappa": 0}, "kappa"),
            ({"half_life_ms": -1}, "half_life_ms"),
            ({"clock_skew_ms": -1}, "clock_skew_ms"),
            ({"alpha": True}, "alpha"),
            ({"rule_base_path": 3}, "rule_base_path"),
        ],
    )
    def test_invalid(self, kw, field):
        with pytest.raises(ConfigError) as exc:
            EngineConfig(**kw)
        assert field in exc.value.fields

    def test_from_dict_merges_and_rejects_unknown(self):
        base = EngineConfig(alpha=0.5)
        assert EngineConfig.from_dict({"theta": 0.4}, base=base) == EngineConfig(alpha=0.5, theta=0.4)
        with pytest.raises(ConfigError):
            EngineConfig.from_dict({"alfa": 0.3})

    def test_load(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"alpha": 0.2645, "theta": 1}))
        assert load_config(path) == EngineConfig()
