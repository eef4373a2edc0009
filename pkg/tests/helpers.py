"""Builders shared by the test modules."""

from __future__ import annotations

import hashlib
import random
from typing import Iterable, Optional

from ipbac.provenance import (
    Event,
    Interaction,
    Message,
    Outcome,
    ProvenanceChain,
    ProvenanceRecord,
    append_record,
)

T0 = 1_700_000_000_000
ACCEPTANCE: list[str] = []  # verdict lines, echoed in the terminal summary
MINUTE = 60_000
DAY = 86_400_000


def digest(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


def interaction(principal: str, event_id: str, at: int, peer: str = "peer", kind: str = "service_call") -> Interaction:
    return Interaction(
        Event(event_id, kind, principal, at),
        (principal, peer),
        (Message(0, principal, peer, digest(event_id + "/0")), Message(1, peer, principal, digest(event_id + "/1"))),
    )


def add(
    chain: ProvenanceChain,
    at: int,
    *,
    resource: str = "incident/1",
    action: str = "read",
    outcome: Outcome | str = Outcome.SUCCESS,
    tags: Iterable[str] = (),
    event_id: Optional[str] = None,
) -> ProvenanceRecord:
    eid = event_id or f"ev-{len(chain)}"
    return append_record(
        chain,
        principal=chain.principal,
        interaction=interaction(chain.principal, eid, at),
        resource=resource,
        action=action,
        outcome=outcome,
        context_tags=tags,
        recorded_at=at,
    )


def random_chain(
    seed: int,
    length: int,
    principal: str = "p",
    *,
    classes: int = 4,
    half_life_ms: Optional[float] = None,
    max_gap_ms: int = 3 * DAY,
) -> ProvenanceChain:
    """Mixed-outcome chain with random gaps (including zero gaps)."""
    rng = random.Random(seed)
    kw = {} if half_life_ms is None else {"half_life_ms": half_life_ms}
    chain = ProvenanceChain(principal, **kw)
    t = T0
    for k in range(length):
        t += rng.choice((0, rng.randrange(1, max_gap_ms)))
        add(
            chain,
            t,
            resource=f"c{rng.randrange(classes)}/{rng.randrange(50)}",
            action=rng.choice(("read", "write", "execute", "delete")),
            outcome=rng.choice(list(Outcome)),
            tags=rng.sample(["a", "b", "c", "d"], rng.randrange(3)),
            event_id=f"e{k}",
        )
    return chain


def as_plain(record: ProvenanceRecord) -> dict:
    """Record fields in the shape the oracles take."""
    return {
        "resource": record.resource,
        "outcome": record.outcome.value,
        "recorded_at": record.recorded_at,
    }


def oracle_fields(record: ProvenanceRecord) -> dict:
    ev = record.interaction.event
    return dict(
        principal=record.principal,
        event_id=ev.event_id,
        kind=ev.kind,
        initiator=ev.initiator,
        occurred_at=ev.occurred_at,
        participants=list(record.interaction.participants),
        messages=[(m.seq, m.sender, m.receiver, m.payload_digest) for m in record.interaction.messages],
        resource=record.resource,
        action=record.action,
        outcome=record.outcome.value,
        tags=list(record.context_tags),
        recorded_at=record.recorded_at,
        prev_hash=record.prev_hash,
    )


class Daemon:
    """An ``ipbacd`` child process listening on an ephemeral port."""

    def __init__(self, data_dir, *extra: str, config=None, fsync: bool = False):
        import subprocess
        import sys

        cmd = [sys.executable, "-c", "import sys; from ipbac.cli import daemon_main; sys.exit(daemon_main())",
               "--data-dir", str(data_dir), "--listen", "127.0.0.1:0", "--log-level", "WARNING", *extra]
        if not fsync:
            cmd.append("--no-fsync")
        if config:
            cmd += ["--config", str(config)]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        line = self.proc.stdout.readline()
        if not line.startswith("ipbacd listening on "):
            self.proc.kill()
            raise RuntimeError(f"daemon did not start: {line!r}")
        self.url = line.split()[-1]

    def kill(self) -> int:
        self.proc.kill()
        return self.proc.wait(10)

    def terminate(self) -> int:
        self.proc.terminate()
        return self.proc.wait(10)
