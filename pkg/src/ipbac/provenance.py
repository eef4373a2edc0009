"""Per-principal interaction provenance chains.

Every principal owns exactly one append-only chain of ``ProvenanceRecord``
objects.  Each record carries the SHA-256 of the previous record so any
edit to a stored record (or to the order of records) is detectable by
``verify_chain``.

Records are hashed over a canonical binary encoding (``serialize_record``):

    u8   format version (1)
    str  principal
    str  event_id, str kind, str initiator, i64 occurred_at
    u32  participant count, then str per participant
    u32  message count, then per message: u64 seq, str sender, str receiver,
         32-byte payload digest
    str  resource, str action, str outcome
    u32  tag count, then str per tag (sorted)
    i64  recorded_at
    32B  prev_hash

``str`` is a u32 byte length followed by UTF-8 bytes; all integers are
big-endian; timestamps are milliseconds since the Unix epoch.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .aggregates import DEFAULT_HALF_LIFE_MS, IncrementalAggregates
from .errors import (
    ChronologyViolation,
    DecodeError,
    DuplicateEvent,
    InvalidRecord,
    PrincipalMismatch,
)

FORMAT_VERSION = 1
HASH_SIZE = 32
GENESIS_HASH = bytes(HASH_SIZE)
MAX_PRINCIPAL_BYTES = 256
DEFAULT_CLOCK_SKEW_MS = 5_000

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    DENIED = "denied"


def validate_principal(principal: str) -> str:
    if not isinstance(principal, str) or not principal:
        raise InvalidRecord("principal id must be a non-empty string")
    if len(principal.encode("utf-8")) > MAX_PRINCIPAL_BYTES:
        raise InvalidRecord(f"principal id exceeds {MAX_PRINCIPAL_BYTES} bytes")
    return principal


@dataclass(frozen=True)
class Event:
    event_id: str
    kind: str
    initiator: str
    occurred_at: int

    def __post_init__(self) -> None:
        if not self.event_id:
            raise InvalidRecord("event_id must be non-empty")
        validate_principal(self.initiator)


@dataclass(frozen=True)
class Message:
    seq: int
    sender: str
    receiver: str
    payload_digest: bytes

    def __post_init__(self) -> None:
        if len(self.payload_digest) != HASH_SIZE:
            raise InvalidRecord("payload_digest must be 32 bytes")


@dataclass(frozen=True)
class Interaction:
    """An ordered exchange between two or more principals for one event.

    The full ``Event`` is embedded (rather than a bare id) so that the
    event's kind, initiator and time are covered by the record hash.
    """

    event: Event
    participants: tuple[str, ...]
    messages: tuple[Message, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "messages", tuple(self.messages))
        if len(self.participants) < 2:
            raise InvalidRecord("an interaction needs at least two participants")
        for p in self.participants:
            validate_principal(p)
        members = set(self.participants)
        for i, msg in enumerate(self.messages):
            if msg.seq != i:
                raise InvalidRecord(f"message seq {msg.seq} at position {i}; expected {i}")
            if msg.sender not in members or msg.receiver not in members:
                raise InvalidRecord(f"message {i} references a non-participant")

    @property
    def event_ref(self) -> str:
        return self.event.event_id


@dataclass(frozen=True)
class ProvenanceRecord:
    principal: str
    interaction: Interaction
    resource: str
    action: str
    outcome: Outcome
    context_tags: frozenset[str]
    recorded_at: int
    prev_hash: bytes = GENESIS_HASH
    record_hash: Optional[bytes] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        object.__setattr__(self, "context_tags", frozenset(self.context_tags))
        validate_principal(self.principal)
        if not self.resource or not self.action:
            raise InvalidRecord("resource and action must be non-empty")
        if len(self.prev_hash) != HASH_SIZE:
            raise InvalidRecord("prev_hash must be 32 bytes")

    def compute_hash(self) -> bytes:
        return hashlib.sha256(serialize_record(self)).digest()


# -- canonical encoding ----------------------------------------------------


def _put_str(out: list[bytes], s: str) -> None:
    b = s.encode("utf-8")
    out.append(_U32.pack(len(b)))
    out.append(b)


def serialize_record(record: ProvenanceRecord) -> bytes:
    """Canonical bytes of ``record`` (``record_hash`` is never included)."""
    out: list[bytes] = [_U8.pack(FORMAT_VERSION)]
    _put_str(out, record.principal)
    ev = record.interaction.event
    _put_str(out, ev.event_id)
    _put_str(out, ev.kind)
    _put_str(out, ev.initiator)
    out.append(_I64.pack(ev.occurred_at))
    out.append(_U32.pack(len(record.interaction.participants)))
    for p in record.interaction.participants:
        _put_str(out, p)
    out.append(_U32.pack(len(record.interaction.messages)))
    for m in record.interaction.messages:
        out.append(_U64.pack(m.seq))
        _put_str(out, m.sender)
        _put_str(out, m.receiver)
        out.append(m.payload_digest)
    _put_str(out, record.resource)
    _put_str(out, record.action)
    _put_str(out, record.outcome.value)
    tags = sorted(record.context_tags)
    out.append(_U32.pack(len(tags)))
    for t in tags:
        _put_str(out, t)
    out.append(_I64.pack(record.recorded_at))
    out.append(record.prev_hash)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError("truncated record")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct) -> int:
        return st.unpack(self.take(st.size))[0]

    def string(self) -> str:
        n = self.unpack(_U32)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc


def deserialize_record(data: bytes, record_hash: Optional[bytes] = None) -> ProvenanceRecord:
    """Inverse of ``serialize_record``; raises ``DecodeError`` on malformed input."""
    r = _Reader(data)
    if r.unpack(_U8) != FORMAT_VERSION:
        raise DecodeError("unsupported format version")
    try:
        principal = r.string()
        event = Event(r.string(), r.string(), r.string(), r.unpack(_I64))
        participants = tuple(r.string() for _ in range(r.unpack(_U32)))
        messages = []
        for _ in range(r.unpack(_U32)):
            seq = r.unpack(_U64)
            sender, receiver = r.string(), r.string()
            messages.append(Message(seq, sender, receiver, r.take(HASH_SIZE)))
        resource, action, outcome = r.string(), r.string(), r.string()
        tags = [r.string() for _ in range(r.unpack(_U32))]
        recorded_at = r.unpack(_I64)
        prev_hash = r.take(HASH_SIZE)
        if r.pos != len(data):
            raise DecodeError("trailing bytes after record")
        return ProvenanceRecord(
            principal=principal,
            interaction=Interaction(event, participants, tuple(messages)),
            resource=resource,
            action=action,
            outcome=Outcome(outcome),
            context_tags=frozenset(tags),
            recorded_at=recorded_at,
            prev_hash=prev_hash,
            record_hash=record_hash,
        )
    except (InvalidRecord, ValueError) as exc:
        raise DecodeError(str(exc)) from exc


# -- chains ----------------------------------------------------------------


@dataclass(frozen=True)
class VerificationReport:
    valid: bool
    first_bad_index: Optional[int] = None
    length: int = 0

    def to_dict(self) -> dict:
        return {"valid": self.valid, "first_bad_index": self.first_bad_index, "length": self.length}


class ProvenanceChain:
    """Append-only, hash-linked history of a single principal.

    Appends are serialized by ``lock``; readers get immutable snapshots and
    never observe a half-applied append.  ``sink`` (if given) receives each
    completed record before it becomes visible in memory, which is how
    ``ChainStore`` makes appends durable.
    """

    def __init__(
        self,
        principal: str,
        *,
        clock_skew_ms: int = DEFAULT_CLOCK_SKEW_MS,
        half_life_ms: float = DEFAULT_HALF_LIFE_MS,
        sink: Optional[Callable[[ProvenanceRecord], None]] = None,
    ) -> None:
        self.principal = validate_principal(principal)
        self.clock_skew_ms = clock_skew_ms
        self.sink = sink
        self.lock = threading.RLock()
        self._records: list[ProvenanceRecord] = []
        self._times: list[int] = []
        self._event_ids: set[str] = set()
        self._aggregates = IncrementalAggregates.empty(half_life_ms)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[ProvenanceRecord, ...]:
        return tuple(self._records)

    @property
    def aggregates(self) -> IncrementalAggregates:
        return self._aggregates

    @property
    def head(self) -> Optional[ProvenanceRecord]:
        return self._records[-1] if self._records else None

    def rebuild_aggregates(self, half_life_ms: float) -> None:
        with self.lock:
            self._aggregates = IncrementalAggregates.from_records(self._records, half_life_ms)

    def copy(self, *, sink: Optional[Callable[[ProvenanceRecord], None]] = None) -> "ProvenanceChain":
        """Independent chain sharing the (immutable) records of this one."""
        with self.lock:
            other = ProvenanceChain(
                self.principal,
                clock_skew_ms=self.clock_skew_ms,
                half_life_ms=self._aggregates.half_life_ms,
                sink=sink,
            )
            other._records = list(self._records)
            other._times = list(self._times)
            other._event_ids = set(self._event_ids)
            other._aggregates = self._aggregates
            return other

    def _adopt(self, record: ProvenanceRecord) -> None:
        """Attach an already-hashed record (used when loading from disk)."""
        self._records.append(record)
        self._times.append(record.recorded_at)
        self._event_ids.add(record.interaction.event.event_id)
        self._aggregates = self._aggregates.updated(record)


def append_record(
    chain: ProvenanceChain,
    *,
    principal: str,
    interaction: Interaction,
    resource: str,
    action: str,
    outcome: Outcome | str,
    context_tags: Iterable[str] = (),
    recorded_at: int,
) -> ProvenanceRecord:
    """Hash-link a new record onto ``chain`` and return it.

    A ``recorded_at`` that regresses behind the chain head by no more than
    the chain's clock-skew tolerance is clamped to the head's timestamp so
    the chain stays non-decreasing; larger regressions are rejected.
    """
    if principal != chain.principal:
        raise PrincipalMismatch(
            f"record for {principal!r} cannot be appended to the chain of {chain.principal!r}"
        )
    with chain.lock:
        head = chain.head
        if head is not None and recorded_at < head.recorded_at:
            if head.recorded_at - recorded_at > chain.clock_skew_ms:
                raise ChronologyViolation(
                    f"recorded_at {recorded_at} precedes chain head {head.recorded_at}"
                )
            recorded_at = head.recorded_at
        if interaction.event.occurred_at > recorded_at + chain.clock_skew_ms:
            raise ChronologyViolation("event occurred after it was recorded")
        if interaction.event.event_id in chain._event_ids:
            raise DuplicateEvent(f"event {interaction.event.event_id!r} already recorded")
        draft = ProvenanceRecord(
            principal=principal,
            interaction=interaction,
            resource=resource,
            action=action,
            outcome=Outcome(outcome),
            context_tags=frozenset(context_tags),
            recorded_at=recorded_at,
            prev_hash=head.record_hash if head is not None else GENESIS_HASH,
        )
        record = _with_hash(draft)
        if chain.sink is not None:
            chain.sink(record)
        chain._adopt(record)
        return record


def _with_hash(record: ProvenanceRecord) -> ProvenanceRecord:
    # frozen dataclass: rebuild with the hash filled in
    return ProvenanceRecord(
        principal=record.principal,
        interaction=record.interaction,
        resource=record.resource,
        action=record.action,
        outcome=record.outcome,
        context_tags=record.context_tags,
        recorded_at=record.recorded_at,
        prev_hash=record.prev_hash,
        record_hash=record.compute_hash(),
    )


def verify_records(principal: str, records: Sequence[ProvenanceRecord]) -> VerificationReport:
    prev = GENESIS_HASH
    last_time: Optional[int] = None
    for i, rec in enumerate(records):
        if (
            rec.principal != principal
            or rec.prev_hash != prev
            or rec.record_hash is None
            or rec.compute_hash() != rec.record_hash
            or (last_time is not None and rec.recorded_at < last_time)
        ):
            return VerificationReport(False, i, len(records))
        prev = rec.record_hash
        last_time = rec.recorded_at
    return VerificationReport(True, None, len(records))


def verify_chain(chain: ProvenanceChain) -> VerificationReport:
    return verify_records(chain.principal, chain.records)


def query_history(
    chain: ProvenanceChain,
    *,
    since: Optional[int] = None,
    resource: Optional[str] = None,
    outcome: Optional[Outcome | str] = None,
) -> list[ProvenanceRecord]:
    """Records matching every given filter, in chain order.  ``since`` is inclusive."""
    with chain.lock:
        records = chain._records
        start = 0 if since is None else bisect.bisect_left(chain._times, since)
        selected = records[start:]
    if resource is not None:
        selected = [r for r in selected if r.resource == resource]
    if outcome is not None:
        want = Outcome(outcome)
        selected = [r for r in selected if r.outcome is want]
    return list(selected)
