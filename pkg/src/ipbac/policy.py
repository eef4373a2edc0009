"""Role-based permissions with optional history predicates.

Policy documents are JSON::

    {
      "roles": {"viewer": [{"resource": "incident/*", "action": "read"}]},
      "assignments": {"alice": ["viewer"]},
      "predicates": {
        "viewer": [
          {"kind": "min_successful_interactions", "n": 5, "window_s": 2592000},
          {"kind": "no_outcome_in_window", "outcome": "denied", "window_s": 86400}
        ]
      }
    }

``predicates`` may be omitted.  A resource pattern may end in a single
``*`` segment (``incident/*``) matching anything below that prefix; a bare
``*`` matches every resource.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import TYPE_CHECKING, Any, Mapping, Optional, Union

from .errors import PolicyError
from .provenance import Outcome, ProvenanceChain, query_history

if TYPE_CHECKING:
    from .engine import AccessRequest


@dataclass(frozen=True, order=True)
class Permission:
    resource: str
    action: str

    def __post_init__(self) -> None:
        if not self.resource:
            raise PolicyError("permission resource must be non-empty")
        if not self.action:
            raise PolicyError("permission action must be non-empty")
        segments = self.resource.split("/")
        if any("*" in seg for seg in segments[:-1]) or ("*" in segments[-1] and segments[-1] != "*"):
            raise PolicyError(f"wildcard only allowed as the final segment: {self.resource!r}")

    def matches(self, resource: str, action: str) -> bool:
        if action != self.action:
            return False
        if self.resource == "*":
            return True
        if self.resource.endswith("/*"):
            return resource.startswith(self.resource[:-1])
        return resource == self.resource


@dataclass(frozen=True)
class Role:
    name: str
    permissions: frozenset[Permission] = frozenset()


@dataclass(frozen=True)
class MinSuccessfulInteractions:
    n: int
    window_ms: int

    def __post_init__(self) -> None:
        if self.n < 0:
            raise PolicyError("n must be >= 0")
        if self.window_ms <= 0:
            raise PolicyError("window must be positive")

    def holds(self, history: ProvenanceChain, at: int) -> bool:
        hits = query_history(history, since=at - self.window_ms, outcome=Outcome.SUCCESS)
        return sum(1 for r in hits if r.recorded_at <= at) >= self.n


@dataclass(frozen=True)
class NoOutcomeInWindow:
    outcome: Outcome
    window_ms: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if self.window_ms <= 0:
            raise PolicyError("window must be positive")

    def holds(self, history: ProvenanceChain, at: int) -> bool:
        hits = query_history(history, since=at - self.window_ms, outcome=self.outcome)
        return not any(r.recorded_at <= at for r in hits)


HistoryPredicate = Union[MinSuccessfulInteractions, NoOutcomeInWindow]


@dataclass(frozen=True)
class PolicySet:
    roles: Mapping[str, Role] = field(default_factory=dict)
    assignments: Mapping[str, frozenset[str]] = field(default_factory=dict)
    predicates: Mapping[str, tuple[HistoryPredicate, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "roles", MappingProxyType(dict(self.roles)))
        object.__setattr__(
            self, "assignments", MappingProxyType({p: frozenset(r) for p, r in self.assignments.items()})
        )
        object.__setattr__(
            self, "predicates", MappingProxyType({r: tuple(ps) for r, ps in self.predicates.items()})
        )
        for name, role in self.roles.items():
            if role.name != name:
                raise PolicyError(f"role key {name!r} does not match role name {role.name!r}")
        for principal, names in self.assignments.items():
            missing = names - self.roles.keys()
            if missing:
                raise PolicyError(f"{principal!r} assigned unknown roles {sorted(missing)}")
        unknown = self.predicates.keys() - self.roles.keys()
        if unknown:
            raise PolicyError(f"predicates reference unknown roles {sorted(unknown)}")
        # per-principal (role, permissions, predicates), in evaluation order
        object.__setattr__(self, "_plan", {
            principal: tuple(
                (name, tuple(sorted(self.roles[name].permissions)), self.predicates.get(name, ()))
                for name in sorted(names)
            )
            for principal, names in self.assignments.items()
        })


@dataclass(frozen=True)
class RbacVerdict:
    allowed: bool
    reason: Optional[str] = None  # "NoMatchingPermission" | "PredicateFailed"
    failed_predicate: Optional[HistoryPredicate] = None

    def describe(self) -> str:
        if self.allowed:
            return "allow"
        if self.failed_predicate is not None:
            return f"deny:{self.reason}({self.failed_predicate})"
        return f"deny:{self.reason}"


ALLOW = RbacVerdict(True)


def permissions_for(policies: PolicySet, principal: str) -> frozenset[Permission]:
    perms: set[Permission] = set()
    for name in policies.assignments.get(principal, ()):
        perms |= policies.roles[name].permissions
    return frozenset(perms)


def evaluate_rbac(policies: PolicySet, request: "AccessRequest", history: ProvenanceChain) -> RbacVerdict:
    """Non-fuzzy verdict for ``request``.

    Any single assigned role that both grants the permission and passes all
    of its own history predicates is enough to allow.
    """
    failed: Optional[HistoryPredicate] = None
    resource, action = request.resource, request.action
    for _name, perms, preds in policies._plan.get(request.principal, ()):
        for p in perms:
            if p.matches(resource, action):
                break
        else:
            continue
        for pred in preds:
            if not pred.holds(history, request.requested_at):
                failed = failed or pred
                break
        else:
            return ALLOW
    if failed is not None:
        return RbacVerdict(False, "PredicateFailed", failed)
    return RbacVerdict(False, "NoMatchingPermission")


# -- JSON documents --------------------------------------------------------


def _parse_predicate(doc: Mapping[str, Any]) -> HistoryPredicate:
    kind = doc.get("kind")
    try:
        window_ms = int(round(float(doc["window_s"]) * 1000))
        if kind == "min_successful_interactions":
            return MinSuccessfulInteractions(int(doc["n"]), window_ms)
        if kind == "no_outcome_in_window":
            return NoOutcomeInWindow(Outcome(doc["outcome"]), window_ms)
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyError(f"bad predicate {doc!r}: {exc}") from exc
    raise PolicyError(f"unknown predicate kind {kind!r}")


def policy_from_dict(doc: Mapping[str, Any]) -> PolicySet:
    if not isinstance(doc, Mapping) or "roles" not in doc:
        raise PolicyError("policy document needs a 'roles' object")
    try:
        roles = {
            name: Role(name, frozenset(Permission(p["resource"], p["action"]) for p in perms))
            for name, perms in doc["roles"].items()
        }
        assignments = {p: frozenset(names) for p, names in doc.get("assignments", {}).items()}
        predicates = {
            role: tuple(_parse_predicate(p) for p in preds) for role, preds in doc.get("predicates", {}).items()
        }
    except (KeyError, TypeError, AttributeError) as exc:
        raise PolicyError(f"malformed policy document: {exc}") from exc
    return PolicySet(roles, assignments, predicates)


def _predicate_to_dict(pred: HistoryPredicate) -> dict[str, Any]:
    if isinstance(pred, MinSuccessfulInteractions):
        return {"kind": "min_successful_interactions", "n": pred.n, "window_s": pred.window_ms / 1000}
    return {"kind": "no_outcome_in_window", "outcome": pred.outcome.value, "window_s": pred.window_ms / 1000}


def policy_to_dict(policies: PolicySet) -> dict[str, Any]:
    return {
        "roles": {
            name: [{"resource": p.resource, "action": p.action} for p in sorted(role.permissions)]
            for name, role in sorted(policies.roles.items())
        },
        "assignments": {p: sorted(names) for p, names in sorted(policies.assignments.items())},
        "predicates": {
            role: [_predicate_to_dict(p) for p in preds] for role, preds in sorted(policies.predicates.items())
        },
    }


def load_policy(path: Path | str) -> PolicySet:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PolicyError(f"{path}: {exc}") from exc
    return policy_from_dict(doc)
