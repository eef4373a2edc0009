"""Durable chain storage: one append-only log file per principal.

Layout::

    <data-dir>/index.tsv                       principal -> file name
    <data-dir>/chains/<urlencoded-principal>.log

Each log line is ``hex(serialize_record(r)) TAB hex(record_hash) LF`` in
lowercase hex.  Verification always re-reads the file cold.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
from pathlib import Path
from typing import Iterator, Optional
from urllib.parse import quote, unquote

from .aggregates import DEFAULT_HALF_LIFE_MS
from .errors import DecodeError, IPBACError
from .provenance import (
    DEFAULT_CLOCK_SKEW_MS,
    ProvenanceChain,
    ProvenanceRecord,
    VerificationReport,
    deserialize_record,
    serialize_record,
    validate_principal,
    verify_records,
)

logger = logging.getLogger(__name__)

_LINE = re.compile(rb"((?:[0-9a-f]{2})+)\t([0-9a-f]{64})\n")
# leave headroom under the usual 255-byte filename limit
_MAX_NAME = 200


def encode_line(record: ProvenanceRecord) -> bytes:
    if record.record_hash is None:
        raise ValueError("record has not been hashed")
    return serialize_record(record).hex().encode("ascii") + b"\t" + record.record_hash.hex().encode("ascii") + b"\n"


def parse_line(line: bytes) -> ProvenanceRecord:
    m = _LINE.fullmatch(line)
    if m is None:
        raise DecodeError("malformed log line")
    body = bytes.fromhex(m.group(1).decode("ascii"))
    record = deserialize_record(body, bytes.fromhex(m.group(2).decode("ascii")))
    if serialize_record(record) != body:
        raise DecodeError("non-canonical record encoding")
    return record


def _split_lines(data: bytes) -> list[bytes]:
    lines = data.split(b"\n")
    tail = lines.pop()  # b"" when the file ends with a newline
    out = [ln + b"\n" for ln in lines]
    if tail:
        out.append(tail)  # unterminated; parse_line will reject it
    return out


def read_chain_file(path: Path | str, principal: str) -> tuple[list[ProvenanceRecord], VerificationReport]:
    """Parse and verify a chain file.

    Returns the longest valid prefix together with the verification report
    for the whole file.
    """
    data = Path(path).read_bytes() if Path(path).exists() else b""
    lines = _split_lines(data)
    records: list[ProvenanceRecord] = []
    for i, line in enumerate(lines):
        try:
            records.append(parse_line(line))
        except DecodeError:
            prefix = verify_records(principal, records)
            if not prefix.valid:
                return records[: prefix.first_bad_index], VerificationReport(False, prefix.first_bad_index, len(lines))
            return records, VerificationReport(False, i, len(lines))
    report = verify_records(principal, records)
    if not report.valid:
        return records[: report.first_bad_index], report
    return records, report


def chain_filename(principal: str) -> str:
    name = quote(principal, safe="")
    if len(name) > _MAX_NAME:
        name = "sha256-" + hashlib.sha256(principal.encode("utf-8")).hexdigest()
    return name + ".log"


class ChainStore:
    """Registry of chains backed by a data directory.

    Chains whose files fail verification at load time are *quarantined*:
    they are kept out of the registry and ``get`` raises for them.
    """

    def __init__(
        self,
        data_dir: Path | str,
        *,
        clock_skew_ms: int = DEFAULT_CLOCK_SKEW_MS,
        half_life_ms: float = DEFAULT_HALF_LIFE_MS,
        fsync: bool = True,
    ) -> None:
        self.data_dir = Path(data_dir)
        self.chain_dir = self.data_dir / "chains"
        self.index_path = self.data_dir / "index.tsv"
        self.clock_skew_ms = clock_skew_ms
        self.half_life_ms = half_life_ms
        self.fsync = fsync
        self._lock = threading.Lock()
        self._chains: dict[str, ProvenanceChain] = {}
        self._files: dict[str, Path] = {}
        self.quarantined: dict[str, VerificationReport] = {}
        self.chain_dir.mkdir(parents=True, exist_ok=True)
        self._load()

    def _index_entries(self) -> Iterator[tuple[str, str]]:
        if not self.index_path.exists():
            return
        for raw in self.index_path.read_text("utf-8").splitlines():
            if not raw.strip():
                continue
            enc, _, fname = raw.partition("\t")
            yield unquote(enc), fname

    def _load(self) -> None:
        for principal, fname in self._index_entries():
            path = self.chain_dir / fname
            records, report = read_chain_file(path, principal)
            self._files[principal] = path
            if not report.valid:
                logger.error("chain for %r failed verification at index %s", principal, report.first_bad_index)
                self.quarantined[principal] = report
                continue
            chain = self._new_chain(principal, path)
            for rec in records:
                chain._adopt(rec)
            self._chains[principal] = chain

    def _append_index(self, principal: str, fname: str) -> None:
        with open(self.index_path, "a", encoding="utf-8") as fh:
            fh.write(f"{quote(principal, safe='')}\t{fname}\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def _sink_for(self, path: Path):
        def sink(record: ProvenanceRecord) -> None:
            line = encode_line(record)
            with open(path, "ab") as fh:
                fh.write(line)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())

        return sink

    def _new_chain(self, principal: str, path: Path) -> ProvenanceChain:
        return ProvenanceChain(
            principal, clock_skew_ms=self.clock_skew_ms, half_life_ms=self.half_life_ms, sink=self._sink_for(path)
        )

    def get(self, principal: str, *, create: bool = True) -> Optional[ProvenanceChain]:
        validate_principal(principal)
        with self._lock:
            chain = self._chains.get(principal)
            if chain is not None:
                return chain
            if principal in self.quarantined:
                raise IPBACError(f"chain for {principal!r} is quarantined (failed verification)")
            if not create:
                return None
            fname = chain_filename(principal)
            path = self.chain_dir / fname
            path.touch()
            self._append_index(principal, fname)
            chain = self._new_chain(principal, path)
            self._chains[principal] = chain
            self._files[principal] = path
            return chain

    def import_chain(self, chain: ProvenanceChain) -> ProvenanceChain:
        """Persist an in-memory chain for a principal this store has not seen
        and return the store-backed chain that replaces it."""
        report = verify_records(chain.principal, chain.records)
        if not report.valid:
            raise IPBACError(f"refusing to import a chain that fails verification at {report.first_bad_index}")
        with self._lock:
            if chain.principal in self._chains or chain.principal in self.quarantined:
                raise IPBACError(f"chain for {chain.principal!r} already exists")
            fname = chain_filename(chain.principal)
            path = self.chain_dir / fname
            with open(path, "wb") as fh:
                fh.write(b"".join(encode_line(r) for r in chain.records))
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            self._append_index(chain.principal, fname)
            backed = chain.copy(sink=self._sink_for(path))
            if backed.aggregates.half_life_ms != self.half_life_ms:
                backed.rebuild_aggregates(self.half_life_ms)
            self._chains[chain.principal] = backed
            self._files[chain.principal] = path
            return backed

    def principals(self) -> list[str]:
        with self._lock:
            return sorted(set(self._chains) | set(self.quarantined))

    def path_for(self, principal: str) -> Optional[Path]:
        return self._files.get(principal)

    def verify(self, principal: str) -> VerificationReport:
        """Cold verification of the on-disk file for ``principal``."""
        path = self._files.get(principal)
        if path is None:
            return VerificationReport(True, None, 0)
        chain = self._chains.get(principal)
        if chain is not None:
            # hold the writer lock so we never read a half-written line
            with chain.lock:
                return read_chain_file(path, principal)[1]
        return read_chain_file(path, principal)[1]

    def set_half_life(self, half_life_ms: float) -> None:
        if half_life_ms == self.half_life_ms:
            return
        self.half_life_ms = half_life_ms
        with self._lock:
            chains = list(self._chains.values())
        for chain in chains:
            chain.rebuild_aggregates(half_life_ms)

    def total_records(self) -> int:
        with self._lock:
            return sum(len(c) for c in self._chains.values())
