"""Exception hierarchy shared by every ipbac module."""

from __future__ import annotations


class IPBACError(Exception):
    """Base class for all engine errors."""

    code = "IPBAC_ERROR"


class InvalidRecord(IPBACError):
    code = "INVALID_RECORD"


class PrincipalMismatch(IPBACError):
    """A record was offered to a chain owned by a different principal."""

    code = "PRINCIPAL_MISMATCH"


class ChronologyViolation(IPBACError):
    code = "CHRONOLOGY"


class DuplicateEvent(IPBACError):
    code = "DUPLICATE_EVENT"


class DecodeError(IPBACError):
    code = "DECODE"


class ChainMismatch(IPBACError):
    code = "CHAIN_MISMATCH"


class PolicyError(IPBACError):
    code = "POLICY"


class OutOfDomain(IPBACError):
    code = "OUT_OF_DOMAIN"


class UncoveredInput(IPBACError):
    code = "UNCOVERED_INPUT"


class EmptyAggregate(UncoveredInput):
    code = "EMPTY_AGGREGATE"


class RuleBaseError(IPBACError):
    code = "RULE_BASE"


class InvalidLevel(IPBACError):
    code = "INVALID_LEVEL"


class InsufficientData(IPBACError):
    code = "INSUFFICIENT_DATA"


class ConfigError(IPBACError):
    """Raised when an EngineConfig violates its invariants.

    ``fields`` maps each offending field name to a human-readable message.
    """

    code = "INVALID_CONFIG"

    def __init__(self, fields: dict[str, str]) -> None:
        self.fields = dict(fields)
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.fields.items()))
