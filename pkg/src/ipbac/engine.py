"""Two-stage access decisions.

A request first goes to the non-fuzzy evaluator (roles plus history
predicates).  Only if that denies is the fuzzy decision score computed; a
score strictly above ``alpha`` earns access at level ``theta``.  Every
decision is written back to the requesting principal's chain.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
import logging
import math
from functools import cached_property, lru_cache
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .aggregates import DEFAULT_HALF_LIFE_MS
from .errors import ChainMismatch, ConfigError, IPBACError, InsufficientData, InvalidLevel
from .fuzzy import FactorParams, compute_ds
from .policy import Permission, PolicySet, evaluate_rbac
from .provenance import (
    DEFAULT_CLOCK_SKEW_MS,
    Event,
    Interaction,
    Message,
    Outcome,
    ProvenanceChain,
    ProvenanceRecord,
    append_record,
    validate_principal,
)

logger = logging.getLogger(__name__)

PDP_PRINCIPAL = "ipbac:pdp"
DEFAULT_ALPHA = 0.2645
TIERED_ACTIONS = ("read", "write", "execute", "delete")


@dataclass(frozen=True)
class AccessRequest:
    principal: str
    resource: str
    action: str
    requested_at: int
    context_tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        validate_principal(self.principal)
        if not self.resource or not self.action:
            raise ValueError("resource and action must be non-empty")
        object.__setattr__(self, "context_tags", frozenset(self.context_tags))

    def to_dict(self) -> dict[str, Any]:
        return {
            "principal": self.principal,
            "resource": self.resource,
            "action": self.action,
            "requested_at": self.requested_at,
            "context_tags": sorted(self.context_tags),
        }


class AccessLevel(str, enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    DENY = "deny"


class DecisionPath(str, enum.Enum):
    NON_FUZZY = "non_fuzzy"
    FUZZY = "fuzzy"


@dataclass(frozen=True)
class Decision:
    outcome: AccessLevel
    path: DecisionPath
    ds: Optional[float] = None
    level: Optional[float] = None  # theta, for partial grants
    granted: frozenset[Permission] = frozenset()
    trace: tuple[str, ...] = ()
    record_hash: Optional[bytes] = None

    @property
    def granted_access(self) -> bool:
        return self.outcome is not AccessLevel.DENY

    def to_dict(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome.value,
            "path": self.path.value,
            "ds": self.ds,
            "level": self.level,
            "granted": [{"resource": p.resource, "action": p.action} for p in sorted(self.granted)],
            "trace": list(self.trace),
            "record_hash": self.record_hash.hex() if self.record_hash else None,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Decision":
        rh = doc.get("record_hash")
        return cls(
            AccessLevel(doc["outcome"]),
            DecisionPath(doc["path"]),
            ds=doc.get("ds"),
            level=doc.get("level"),
            granted=frozenset(Permission(g["resource"], g["action"]) for g in doc.get("granted", ())),
            trace=tuple(doc.get("trace", ())),
            record_hash=bytes.fromhex(rh) if rh else None,
        )


@dataclass(frozen=True)
class EngineConfig:
    alpha: float = DEFAULT_ALPHA
    theta: float = 1.0
    kappa: float = 50.0
    half_life_ms: float = DEFAULT_HALF_LIFE_MS
    rule_base_path: Optional[str] = None
    clock_skew_ms: int = DEFAULT_CLOCK_SKEW_MS
    policy_path: Optional[str] = None

    def __post_init__(self) -> None:
        problems = config_problems(self)
        if problems:
            raise ConfigError(problems)

    @cached_property
    def factor_params(self) -> FactorParams:
        return FactorParams(self.kappa, self.half_life_ms)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base: Optional["EngineConfig"] = None) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError({k: "unknown field" for k in sorted(unknown)})
        merged = {**(base.to_dict() if base else {}), **doc}
        return cls(**merged)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def config_problems(cfg: EngineConfig) -> dict[str, str]:
    p: dict[str, str] = {}
    if not _is_number(cfg.alpha) or not 0.0 <= cfg.alpha <= 1.0:
        p["alpha"] = "must be a number in [0, 1]"
    if not _is_number(cfg.theta) or not 0.0 < cfg.theta <= 1.0:
        p["theta"] = "must be a number in (0, 1]"
    if not _is_number(cfg.kappa) or cfg.kappa <= 0:
        p["kappa"] = "must be a positive number"
    if not _is_number(cfg.half_life_ms) or cfg.half_life_ms <= 0:
        p["half_life_ms"] = "must be a positive number"
    if not isinstance(cfg.clock_skew_ms, int) or isinstance(cfg.clock_skew_ms, bool) or cfg.clock_skew_ms < 0:
        p["clock_skew_ms"] = "must be a non-negative integer"
    for key in ("rule_base_path", "policy_path"):
        v = getattr(cfg, key)
        if v is not None and not isinstance(v, str):
            p[key] = "must be a path string or null"
    return p


def load_config(path: Path | str) -> EngineConfig:
    with open(path, encoding="utf-8") as fh:
        return EngineConfig.from_dict(json.load(fh))


def mask_permissions(request: AccessRequest, theta: float) -> frozenset[Permission]:
    """Actions granted on the requested resource at access level ``theta``.

    (0, 1/3] read; (1/3, 2/3] read+write; (2/3, 1) adds execute; 1 adds delete.
    """
    if not _is_number(theta) or not 0.0 < theta <= 1.0:
        raise InvalidLevel(f"access level {theta!r} outside (0, 1]")
    if theta == 1.0:
        n = 4
    elif theta > 2 / 3:
        n = 3
    elif theta > 1 / 3:
        n = 2
    else:
        n = 1
    return _tier(request.resource, n)


@lru_cache(maxsize=4096)
def _tier(resource: str, n: int) -> frozenset[Permission]:
    return frozenset(Permission(resource, a) for a in TIERED_ACTIONS[:n])


def _digest(*parts: Any) -> bytes:
    return hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()


def _record_decision(chain: ProvenanceChain, request: AccessRequest, decision: Decision) -> ProvenanceRecord:
    head = chain.head
    recorded_at = request.requested_at if head is None else max(request.requested_at, head.recorded_at)
    event_id = f"decision:{len(chain)}"
    while event_id in chain._event_ids:  # caller-supplied ids may collide
        event_id += "'"
    event = Event(event_id, "access_request", request.principal, request.requested_at)
    interaction = Interaction(
        event,
        (request.principal, PDP_PRINCIPAL),
        (
            Message(0, request.principal, PDP_PRINCIPAL, _digest(request.resource, request.action, request.requested_at)),
            Message(1, PDP_PRINCIPAL, request.principal, _digest(decision.outcome.value, decision.path.value, decision.ds)),
        ),
    )
    return append_record(
        chain,
        principal=request.principal,
        interaction=interaction,
        resource=request.resource,
        action=request.action,
        outcome=Outcome.SUCCESS if decision.granted_access else Outcome.DENIED,
        context_tags=request.context_tags,
        recorded_at=recorded_at,
    )


def _evaluate(
    request: AccessRequest,
    policies: PolicySet,
    chain: ProvenanceChain,
    config: EngineConfig,
    fuzzy_fallback: bool,
) -> Decision:
    trace = ["user_request", "check_interaction_logs", "check_policies"]
    verdict = evaluate_rbac(policies, request, chain)
    trace.append(f"evaluate_role:{verdict.describe()}")
    if verdict.allowed:
        trace.append("allow_access")
        return Decision(AccessLevel.FULL, DecisionPath.NON_FUZZY, trace=tuple(trace))
    if not fuzzy_fallback:
        trace.append("deny_access")
        return Decision(AccessLevel.DENY, DecisionPath.NON_FUZZY, trace=tuple(trace))

    trace.append("fuzzy_model")
    try:
        ds = compute_ds(chain.aggregates, request, config)
    except Exception as exc:  # fail closed on any scoring error
        logger.warning("fuzzy scoring failed for %s: %s", request.principal, exc)
        trace.append(f"fuzzy_error:{type(exc).__name__}")
        trace.append("deny_access")
        return Decision(AccessLevel.DENY, DecisionPath.FUZZY, trace=tuple(trace))
    shown = f"{ds:.6f}"
    trace.append(f"decision_score:{shown}")
    if ds > config.alpha:
        trace.append(f"threshold:{shown}>{config.alpha}")
        if config.theta == 1.0:
            trace.append("allow_access")
            return Decision(
                AccessLevel.FULL, DecisionPath.FUZZY, ds=ds, level=1.0,
                granted=mask_permissions(request, 1.0), trace=tuple(trace),
            )
        trace.append(f"partial_access:{config.theta}")
        return Decision(
            AccessLevel.PARTIAL, DecisionPath.FUZZY, ds=ds, level=config.theta,
            granted=mask_permissions(request, config.theta), trace=tuple(trace),
        )
    trace.append(f"threshold:{shown}<={config.alpha}")
    trace.append("deny_access")
    return Decision(AccessLevel.DENY, DecisionPath.FUZZY, ds=ds, trace=tuple(trace))


def decide(
    request: AccessRequest,
    policies: PolicySet,
    chain: ProvenanceChain,
    config: EngineConfig,
    *,
    fuzzy_fallback: bool = True,
) -> Decision:
    """Decide ``request`` and append the decision to ``chain``.

    With ``fuzzy_fallback=False`` this is plain RBAC (used as the comparison
    baseline); the decision is still recorded.
    """
    if chain.principal != request.principal:
        raise ChainMismatch(f"chain of {chain.principal!r} used for request by {request.principal!r}")
    with chain.lock:
        try:
            decision = _evaluate(request, policies, chain, config, fuzzy_fallback)
        except IPBACError as exc:
            logger.warning("decision failed for %s: %s", request.principal, exc)
            path = DecisionPath.FUZZY if fuzzy_fallback else DecisionPath.NON_FUZZY
            decision = Decision(AccessLevel.DENY, path, trace=("user_request", f"error:{exc.code}", "deny_access"))
        record = _record_decision(chain, request, decision)
    d = decision
    return Decision(d.outcome, d.path, d.ds, d.level, d.granted, d.trace, record.record_hash)


# -- offline threshold review -----------------------------------------------


def review_threshold(
    decision_log: Iterable[tuple[Decision, bool]],
    current_alpha: float,
    *,
    min_samples: int = 100,
) -> float:
    """Suggest the alpha that maximises agreement with operator labels.

    Each entry pairs a past decision with whether it was judged correct.
    Only fuzzy decisions carrying a score are used.  A correct grant or an
    incorrect denial means the request *should* have been granted.  Since
    the gate is ``ds > alpha``, accuracy is constant between consecutive
    observed scores; the midpoint of the best interval is returned unless
    the current alpha is already optimal.
    """
    samples = []
    for decision, correct in decision_log:
        if decision.ds is None or decision.path is not DecisionPath.FUZZY:
            continue
        samples.append((decision.ds, decision.granted_access == bool(correct)))
    if len(samples) < min_samples:
        raise InsufficientData(f"{len(samples)} labelled fuzzy decisions; need {min_samples}")

    samples.sort()
    scores = [ds for ds, _ in samples]
    # grant_below[i]: how many of the first i samples should have been granted
    grant_below = [0]
    for _, should in samples:
        grant_below.append(grant_below[-1] + should)
    total_grant = grant_below[-1]

    def accuracy(alpha: float) -> int:
        i = bisect.bisect_right(scores, alpha)  # samples with ds <= alpha are denied
        return (i - grant_below[i]) + (total_grant - grant_below[i])

    observed = sorted(set(scores))
    candidates = [0.0] + observed
    best = max(accuracy(c) for c in candidates)
    if accuracy(current_alpha) == best:
        return current_alpha
    c = next(c for c in candidates if accuracy(c) == best)
    upper = next((v for v in observed if v > c), 1.0)
    return (c + upper) / 2.0
