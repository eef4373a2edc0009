"""Running summaries of a provenance chain.

The fuzzy factors only need counts and an exponentially decayed success
mass per resource class, so they are maintained incrementally on every
append instead of rescanning the chain for each decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Iterable, Mapping, Optional

if TYPE_CHECKING:
    from .provenance import ProvenanceRecord

DAY_MS = 86_400_000
DEFAULT_HALF_LIFE_MS = 30 * DAY_MS


def resource_class(resource: str) -> str:
    """First path segment: ``incident/42`` -> ``incident``."""
    return resource.split("/", 1)[0]


def decay_factor(elapsed_ms: float, half_life_ms: float) -> float:
    if elapsed_ms <= 0:
        return 1.0
    return 2.0 ** (-elapsed_ms / half_life_ms)


@dataclass(frozen=True)
class IncrementalAggregates:
    """Immutable snapshot; ``updated`` returns a new instance.

    ``decayed_mass`` and ``total_decayed_mass`` are expressed at time
    ``last_interaction_at``.  Only ``success`` outcomes add mass; denied
    and failed interactions count toward ``total_interactions`` only.
    """

    half_life_ms: float
    total_interactions: int = 0
    successful_interactions: int = 0
    class_success: Mapping[str, int] = field(default_factory=dict)
    last_interaction_at: Optional[int] = None
    decayed_mass: Mapping[str, float] = field(default_factory=dict)
    total_decayed_mass: float = 0.0

    @classmethod
    def empty(cls, half_life_ms: float = DEFAULT_HALF_LIFE_MS) -> "IncrementalAggregates":
        if half_life_ms <= 0:
            raise ValueError("half_life_ms must be positive")
        return cls(half_life_ms=half_life_ms)

    @classmethod
    def from_records(
        cls, records: Iterable["ProvenanceRecord"], half_life_ms: float = DEFAULT_HALF_LIFE_MS
    ) -> "IncrementalAggregates":
        agg = cls.empty(half_life_ms)
        for rec in records:
            agg = agg.updated(rec)
        return agg

    def updated(self, record: "ProvenanceRecord") -> "IncrementalAggregates":
        t = record.recorded_at
        d = 1.0 if self.last_interaction_at is None else decay_factor(
            t - self.last_interaction_at, self.half_life_ms
        )
        mass = {k: v * d for k, v in self.decayed_mass.items()}
        total_mass = self.total_decayed_mass * d
        class_success = dict(self.class_success)
        successful = self.successful_interactions
        if record.outcome.value == "success":
            cls_ = resource_class(record.resource)
            class_success[cls_] = class_success.get(cls_, 0) + 1
            mass[cls_] = mass.get(cls_, 0.0) + 1.0
            total_mass += 1.0
            successful += 1
        return IncrementalAggregates(
            half_life_ms=self.half_life_ms,
            total_interactions=self.total_interactions + 1,
            successful_interactions=successful,
            class_success=MappingProxyType(class_success),
            last_interaction_at=t if self.last_interaction_at is None else max(t, self.last_interaction_at),
            decayed_mass=MappingProxyType(mass),
            total_decayed_mass=total_mass,
        )

    def mass_at(self, resource_cls: str, at: int) -> tuple[float, float]:
        """(class mass, total mass) decayed forward to time ``at``."""
        if self.last_interaction_at is None:
            return 0.0, 0.0
        d = decay_factor(at - self.last_interaction_at, self.half_life_ms)
        return self.decayed_mass.get(resource_cls, 0.0) * d, self.total_decayed_mass * d
