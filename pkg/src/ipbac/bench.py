"""Synthetic workloads and the RBAC-vs-IPBAC comparison replay.

The workload is our own construction (no published data exists for it):

* resources live in ``num_classes`` classes (``<class>/<n>``);
* one role per (class, action tier) -- viewer/editor/operator/admin;
* every principal holds at least one role, more with ``role_density``;
* pre-seeded history consists of in-role interactions with a per-principal
  success rate drawn from ``history_success``;
* request principals follow a Zipf law (``principal_skew``), so a few busy
  principals accumulate history during the replay while most stay cold;
* ``out_of_role_fraction`` of requests ask for something the principal's
  roles do not cover, which is what exercises the fuzzy stage.
"""

from __future__ import annotations

import csv
import gc
import json
import logging
import random
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from .aggregates import DAY_MS
from .engine import AccessRequest, Decision, EngineConfig, decide
from .policy import Permission, PolicySet, Role, permissions_for
from .provenance import Event, Interaction, Message, Outcome, ProvenanceChain, append_record
from .store import ChainStore

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = (10, 50, 100, 200, 500)
ACTION_TIERS = {
    "viewer": ("read",),
    "editor": ("read", "write"),
    "operator": ("read", "write", "execute"),
    "admin": ("read", "write", "execute", "delete"),
}
ACTIONS = ("read", "write", "execute", "delete")
REPLAY_START_MS = 1_704_067_200_000  # 2024-01-01T00:00:00Z
WARMUP_REQUESTS = 100


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 7
    num_principals: int = 750
    num_resources: int = 200
    num_classes: int = 8
    role_density: float = 0.05
    out_of_role_fraction: float = 0.5
    history_length: int = 20
    history_success: tuple[float, float] = (0.05, 0.35)
    history_days: int = 60
    principal_skew: float = 1.0
    num_requests: int = 500
    checkpoints: tuple[int, ...] = DEFAULT_CHECKPOINTS

    def __post_init__(self) -> None:
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        object.__setattr__(self, "history_success", tuple(self.history_success))
        for name in ("role_density", "out_of_role_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.history_success
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("history_success must be an interval inside [0, 1]")
        if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ValueError("checkpoints must be strictly increasing")
        if self.checkpoints and self.checkpoints[-1] > self.num_requests:
            raise ValueError("last checkpoint exceeds num_requests")
        if self.num_principals < 1 or self.num_resources < 1 or self.num_classes < 1:
            raise ValueError("need at least one principal, resource and class")
        if self.history_length < 0 or self.num_requests < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total_history(self) -> int:
        return self.num_principals * self.history_length

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "WorkloadSpec":
        return cls(**doc)


@dataclass
class Workload:
    spec: WorkloadSpec
    policies: PolicySet
    requests: list[AccessRequest]
    chains: dict[str, ProvenanceChain]

    @property
    def total_records(self) -> int:
        return sum(len(c) for c in self.chains.values())

    def fresh_chains(self, half_life_ms: Optional[float] = None) -> dict[str, ProvenanceChain]:
        out = {p: c.copy() for p, c in self.chains.items()}
        if half_life_ms is not None:
            for c in out.values():
                if c.aggregates.half_life_ms != half_life_ms:
                    c.rebuild_aggregates(half_life_ms)
        return out

    def request_stream_bytes(self) -> bytes:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.requests).encode()


def _digest(rng: random.Random) -> bytes:
    return rng.getrandbits(256).to_bytes(32, "big")


def _build_policy(spec: WorkloadSpec, rng: random.Random) -> PolicySet:
    roles = {}
    for c in range(spec.num_classes):
        for tier, actions in ACTION_TIERS.items():
            name = f"c{c}-{tier}"
            roles[name] = Role(name, frozenset(Permission(f"c{c}/*", a) for a in actions))
    names = sorted(roles)
    assignments = {}
    for i in range(spec.num_principals):
        held = {n for n in names if rng.random() < spec.role_density}
        if not held:
            held = {rng.choice(names)}
        assignments[f"p{i:04d}"] = frozenset(held)
    return PolicySet(roles, assignments)


def _resources_by_class(spec: WorkloadSpec) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {f"c{c}": [] for c in range(spec.num_classes)}
    for r in range(spec.num_resources):
        cls_ = f"c{r % spec.num_classes}"
        out[cls_].append(f"{cls_}/{r}")
    return out


def _in_role_pairs(perms: frozenset[Permission], resources: dict[str, list[str]]) -> list[tuple[str, str]]:
    pairs = []
    for p in sorted(perms):
        cls_ = p.resource.split("/", 1)[0]
        pairs += [(res, p.action) for res in resources.get(cls_, [])]
    return pairs


def _out_of_role_pairs(perms: frozenset[Permission], resources: dict[str, list[str]]) -> list[tuple[str, str]]:
    """Uncovered (resource, action) pairs, preferring classes the principal
    holds no role in at all."""
    uncovered = [
        (res, a)
        for cls_ in sorted(resources)
        for res in resources[cls_]
        for a in ACTIONS
        if not any(p.matches(res, a) for p in perms)
    ]
    held = {p.resource.split("/", 1)[0] for p in perms}
    foreign = [(res, a) for res, a in uncovered if res.split("/", 1)[0] not in held]
    return foreign or uncovered


def generate_workload(spec: WorkloadSpec) -> Workload:
    """Deterministic in ``spec.seed``."""
    rng = random.Random(spec.seed)
    policies = _build_policy(spec, rng)
    resources = _resources_by_class(spec)
    principals = sorted(policies.assignments)
    in_role = {p: _in_role_pairs(permissions_for(policies, p), resources) for p in principals}

    chains: dict[str, ProvenanceChain] = {}
    span = spec.history_days * DAY_MS
    lo, hi = spec.history_success
    for p in principals:
        chain = ProvenanceChain(p)
        success_rate = rng.uniform(lo, hi)
        times = sorted(rng.randrange(REPLAY_START_MS - span, REPLAY_START_MS) for _ in range(spec.history_length))
        peers = [q for q in principals if q != p] or ["ipbac:peer"]
        for k, t in enumerate(times):
            res, action = rng.choice(in_role[p])
            u = rng.random()
            outcome = (
                Outcome.SUCCESS if u < success_rate
                else Outcome.FAILURE if u < success_rate + (1 - success_rate) / 2
                else Outcome.DENIED
            )
            peer = rng.choice(peers)
            interaction = Interaction(
                Event(f"seed:{p}:{k}", "service_call", p, t),
                (p, peer),
                (Message(0, p, peer, _digest(rng)), Message(1, peer, p, _digest(rng))),
            )
            append_record(
                chain, principal=p, interaction=interaction, resource=res, action=action,
                outcome=outcome, context_tags=(), recorded_at=t,
            )
        chains[p] = chain

    order = principals[:]
    rng.shuffle(order)
    weights = [1.0 / (k + 1) ** spec.principal_skew for k in range(len(order))]
    out_cache: dict[str, list[tuple[str, str]]] = {}
    requests = []
    t = REPLAY_START_MS
    for _ in range(spec.num_requests):
        p = rng.choices(order, weights)[0]
        t += rng.randrange(60_000, 600_000)
        if rng.random() < spec.out_of_role_fraction:
            if p not in out_cache:
                out_cache[p] = _out_of_role_pairs(permissions_for(policies, p), resources)
            pool = out_cache[p] or in_role[p]
        else:
            pool = in_role[p]
        res, action = rng.choice(pool)
        requests.append(AccessRequest(p, res, action, t))
    return Workload(spec, policies, requests, chains)


# -- comparison ------------------------------------------------------------


@dataclass
class ComparisonReport:
    checkpoints: list[int]
    rbac_grants: list[int]
    ipbac_grants: list[int]
    ds_values: list[float] = field(default_factory=list)
    latency_us: list[float] = field(default_factory=list)
    alpha: float = 0.0
    theta: float = 1.0

    @property
    def summary(self) -> dict[str, float]:
        return latency_summary(self.latency_us)

    def rows(self) -> list[tuple[int, int, int]]:
        return list(zip(self.checkpoints, self.rbac_grants, self.ipbac_grants))


def _replay(
    workload: Workload,
    config: EngineConfig,
    fuzzy: bool,
    timed: bool = False,
    chains: Optional[dict[str, ProvenanceChain]] = None,
):
    if chains is None:
        chains = workload.fresh_chains(config.half_life_ms)
    granted = []
    ds_values = []
    latency = []
    for req in workload.requests:
        chain = chains[req.principal]
        t0 = time.perf_counter_ns()
        d = decide(req, workload.policies, chain, config, fuzzy_fallback=fuzzy)
        if timed:
            latency.append((time.perf_counter_ns() - t0) / 1000.0)
        granted.append(d.granted_access)
        if d.ds is not None:
            ds_values.append(d.ds)
    return granted, ds_values, latency


def _counts(granted: Sequence[bool], checkpoints: Sequence[int]) -> list[int]:
    return [sum(granted[:c]) for c in checkpoints]


def run_comparison(workload: Workload, config: EngineConfig, *, latency_repeats: int = 5) -> ComparisonReport:
    """Replay the same request stream under RBAC only and under full IPBAC,
    each starting from its own copy of the pre-seeded chains."""
    cps = list(workload.spec.checkpoints)
    rbac, _, _ = _replay(workload, config, fuzzy=False)
    ipbac, ds_values, _ = _replay(workload, config, fuzzy=True)
    latency = measure_latency(workload, config, repeats=latency_repeats) if latency_repeats else []
    return ComparisonReport(cps, _counts(rbac, cps), _counts(ipbac, cps), ds_values, latency, config.alpha, config.theta)


def grants_for_alpha(workload: Workload, config: EngineConfig, alpha: float) -> int:
    granted, _, _ = _replay(workload, replace(config, alpha=alpha), fuzzy=True)
    return sum(granted)


def alpha_sweep(workload: Workload, config: EngineConfig, alphas: Sequence[float]) -> list[tuple[float, int]]:
    return [(a, grants_for_alpha(workload, config, a)) for a in sorted(alphas)]


# -- latency ---------------------------------------------------------------


def latency_summary(series: Sequence[float], warmup: int = WARMUP_REQUESTS) -> dict[str, float]:
    if not series:
        return {"median_us": 0.0, "p99_us": 0.0, "post_warmup_cv": 0.0, "n": 0}
    ordered = sorted(series)
    post = list(series[warmup:]) if len(series) > warmup else list(series)
    mean = statistics.fmean(post)
    cv = statistics.pstdev(post) / mean if mean > 0 else 0.0
    return {
        "median_us": statistics.median(ordered),
        "p99_us": ordered[min(len(ordered) - 1, int(0.99 * len(ordered)))],
        "post_warmup_cv": cv,
        "n": len(series),
    }


def seed_store(workload: Workload, data_dir: Path | str, *, fsync: bool = True, half_life_ms: Optional[float] = None) -> ChainStore:
    """Write the workload's pre-seeded chains into a fresh store at ``data_dir``."""
    kw = {} if half_life_ms is None else {"half_life_ms": half_life_ms}
    store = ChainStore(data_dir, fsync=fsync, **kw)
    for chain in workload.chains.values():
        store.import_chain(chain)
    return store


def _min_of_repeats(run, repeats: int) -> list[float]:
    best: list[float] = []
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for _ in range(max(1, repeats)):
            series = run()
            best = series if not best else [min(a, b) for a, b in zip(best, series)]
    finally:
        if gc_was:
            gc.enable()
    return best


def measure_latency(
    workload: Workload,
    config: EngineConfig,
    mode: str = "in-process",
    *,
    url: Optional[str] = None,
    repeats: int = 5,
    fsync: bool = False,
) -> list[float]:
    """Per-request wall-clock latency in microseconds.

    ``in-process`` replays the stream through ``decide`` against chains
    backed by a scratch ``ChainStore``, so each decision includes appending
    its record to the on-disk log, as in the service (``fsync`` is off by
    default: it measures the disk, not the engine).  ``in-memory`` skips the
    store.  Both run ``repeats`` identical replays with the garbage
    collector paused and keep the per-request minimum, which filters out
    scheduler preemption.  ``over-wire`` posts each request once to a
    running service at ``url`` (e.g. ``http://127.0.0.1:8080``).
    """
    if mode == "in-memory":
        return _min_of_repeats(lambda: _replay(workload, config, fuzzy=True, timed=True)[2], repeats)
    if mode == "in-process":
        def run() -> list[float]:
            with tempfile.TemporaryDirectory(prefix="ipbac-bench-") as tmp:
                store = seed_store(workload, tmp, fsync=fsync, half_life_ms=config.half_life_ms)
                chains = {p: store.get(p) for p in workload.chains}
                return _replay(workload, config, fuzzy=True, timed=True, chains=chains)[2]

        return _min_of_repeats(run, repeats)
    if mode == "over-wire":
        if url is None:
            raise ValueError("over-wire mode needs the service url")
        from .client import DecisionClient

        client = DecisionClient(url)
        out = []
        try:
            for req in workload.requests:
                t0 = time.perf_counter_ns()
                client.decide(req.to_dict())
                out.append((time.perf_counter_ns() - t0) / 1000.0)
        finally:
            client.close()
        return out
    raise ValueError(f"unknown mode {mode!r}")


def synthetic_chain(principal: str, length: int, seed: int = 0, start_ms: int = REPLAY_START_MS) -> ProvenanceChain:
    """A chain of ``length`` mixed-outcome records ending at ``start_ms``."""
    rng = random.Random(seed)
    chain = ProvenanceChain(principal)
    t = start_ms - length * 60_000
    for k in range(length):
        t += 60_000
        interaction = Interaction(
            Event(f"syn:{k}", "service_call", principal, t),
            (principal, "peer"),
            (Message(0, principal, "peer", _digest(rng)),),
        )
        append_record(
            chain, principal=principal, interaction=interaction,
            resource=f"c{rng.randrange(8)}/{rng.randrange(100)}", action=rng.choice(ACTIONS),
            outcome=rng.choice(list(Outcome)), recorded_at=t,
        )
    return chain


def chain_length_scaling(
    config: EngineConfig,
    lengths: Sequence[int] = (100, 15_000),
    requests: int = 300,
    seed: int = 0,
    repeats: int = 3,
) -> dict[int, float]:
    """Median in-process decision latency (us) for a principal whose chain
    already holds each of ``lengths`` records."""
    policies = PolicySet({"viewer": Role("viewer", frozenset({Permission("c0/*", "read")}))}, {"solo": {"viewer"}})
    out = {}
    for n in lengths:
        base = synthetic_chain("solo", n, seed)
        rng = random.Random(seed + 1)
        t = REPLAY_START_MS
        stream = []
        for _ in range(requests):
            t += 60_000
            stream.append(AccessRequest("solo", f"c{rng.randrange(8)}/{rng.randrange(100)}", rng.choice(ACTIONS), t))
        best: list[float] = []
        gc_was = gc.isenabled()
        gc.disable()
        try:
            for _ in range(max(1, repeats)):
                chain = base.copy()
                samples = []
                for req in stream:
                    t0 = time.perf_counter_ns()
                    decide(req, policies, chain, config)
                    samples.append((time.perf_counter_ns() - t0) / 1000.0)
                best = samples if not best else [min(a, b) for a, b in zip(best, samples)]
        finally:
            if gc_was:
                gc.enable()
        out[n] = statistics.median(best)
    return out


# -- output ----------------------------------------------------------------


def write_report(report: ComparisonReport, out_dir: Path | str, extra: Optional[dict[str, Any]] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grants.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "rbac", "ipbac"])
        w.writerows(report.rows())
    with open(out / "latency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "micros"])
        w.writerows((i, f"{v:.3f}") for i, v in enumerate(report.latency_us))
    s = report.summary
    lines = [
        f"alpha={report.alpha} theta={report.theta}",
        "checkpoint  rbac  ipbac",
        *(f"{c:>10}  {r:>4}  {i:>5}" for c, r, i in report.rows()),
        "",
        f"decisions scored by the fuzzy stage: {len(report.ds_values)}",
        f"latency median {s['median_us']:.1f} us, p99 {s['p99_us']:.1f} us, "
        f"post-warmup CV {s['post_warmup_cv']:.3f} (n={s['n']})",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
