"""HTTP/1.1 + JSON decision service.

Endpoints::

    POST /v1/decide                      AccessRequest  -> Decision
    POST /v1/interactions                record input   -> record hash
    GET  /v1/chains/{principal}/verify                  -> VerificationReport
    GET  /v1/config                                     -> EngineConfig
    PUT  /v1/config                      partial config -> EngineConfig
    POST /v1/policy/reload                              -> policy summary

Every response body is a JSON object carrying ``seq`` (increasing within a
server process) and ``server_time_ms``.  Errors look like
``{"error": {"code": ..., "message": ..., "fields": {...}}}``.

Chain appends are durable (written and fsynced by the store) before the
response is sent.  A principal seen for the first time gets an empty chain.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping, Optional
from urllib.parse import unquote

from .engine import AccessRequest, EngineConfig, decide
from .errors import ConfigError, IPBACError, PolicyError, RuleBaseError
from .fuzzy import rulebase_for
from .policy import PolicySet, load_policy
from .provenance import Event, Interaction, Message, Outcome, append_record
from .store import ChainStore

logger = logging.getLogger(__name__)
request_log = logging.getLogger("ipbac.requests")

CONFIG_FILE = "config.json"
MAX_BODY = 1 << 20

_CONFLICT_CODES = {"CHRONOLOGY", "PRINCIPAL_MISMATCH", "DUPLICATE_EVENT", "CHAIN_MISMATCH"}


class WireError(Exception):
    def __init__(self, status: int, code: str, message: str, fields: Optional[dict[str, str]] = None) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.fields = fields

    def document(self) -> dict[str, Any]:
        err: dict[str, Any] = {"code": self.code, "message": str(self)}
        if self.fields:
            err["fields"] = self.fields
        return {"error": err}


def _malformed(message: str) -> WireError:
    return WireError(400, "MALFORMED", message)


# -- wire parsing ------------------------------------------------------------


def _field(doc: Mapping[str, Any], key: str, kind: type, *, default: Any = ..., name: str = "") -> Any:
    where = f"{name}.{key}" if name else key
    if key not in doc:
        if default is ...:
            raise _malformed(f"missing field {where!r}")
        return default
    v = doc[key]
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise _malformed(f"field {where!r} must be an integer")
    elif not isinstance(v, kind):
        raise _malformed(f"field {where!r} must be {kind.__name__}")
    if kind is str and not v:
        raise _malformed(f"field {where!r} must be non-empty")
    return v


def _tags(doc: Mapping[str, Any]) -> frozenset[str]:
    tags = doc.get("context_tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise _malformed("context_tags must be a list of strings")
    return frozenset(tags)


def parse_access_request(doc: Any, now_ms: int) -> AccessRequest:
    """``requested_at`` (ms since the epoch) defaults to the server clock."""
    if not isinstance(doc, dict):
        raise _malformed("body must be a JSON object")
    try:
        return AccessRequest(
            _field(doc, "principal", str),
            _field(doc, "resource", str),
            _field(doc, "action", str),
            _field(doc, "requested_at", int, default=now_ms),
            _tags(doc),
        )
    except (IPBACError, ValueError) as exc:
        raise _malformed(str(exc)) from None


def parse_interaction(doc: Any, now_ms: int) -> dict[str, Any]:
    """Keyword arguments for ``append_record`` from an interaction document.

    ``{"principal", "event": {"event_id", "kind", "initiator", "occurred_at"},
    "participants": [...], "messages": [{"seq", "sender", "receiver",
    "payload_digest": hex}], "resource", "action", "outcome",
    "context_tags": [...], "recorded_at"}``; ``messages``, ``context_tags``
    and ``recorded_at`` are optional.
    """
    if not isinstance(doc, dict):
        raise _malformed("body must be a JSON object")
    ev = _field(doc, "event", dict)
    participants = _field(doc, "participants", list)
    messages = _field(doc, "messages", list, default=[])
    try:
        event = Event(
            _field(ev, "event_id", str, name="event"),
            _field(ev, "kind", str, name="event"),
            _field(ev, "initiator", str, name="event"),
            _field(ev, "occurred_at", int, name="event"),
        )
        msgs = []
        for m in messages:
            if not isinstance(m, dict):
                raise _malformed("messages must be objects")
            try:
                digest = bytes.fromhex(_field(m, "payload_digest", str, name="message"))
            except ValueError:
                raise _malformed("payload_digest must be hex") from None
            msgs.append(
                Message(
                    _field(m, "seq", int, name="message"),
                    _field(m, "sender", str, name="message"),
                    _field(m, "receiver", str, name="message"),
                    digest,
                )
            )
        if not all(isinstance(p, str) for p in participants):
            raise _malformed("participants must be strings")
        interaction = Interaction(event, tuple(participants), tuple(msgs))
        outcome = Outcome(_field(doc, "outcome", str))
    except (IPBACError, ValueError) as exc:
        if isinstance(exc, WireError):
            raise
        raise _malformed(str(exc)) from None
    return {
        "principal": _field(doc, "principal", str),
        "interaction": interaction,
        "resource": _field(doc, "resource", str),
        "action": _field(doc, "action", str),
        "outcome": outcome,
        "context_tags": _tags(doc),
        "recorded_at": _field(doc, "recorded_at", int, default=now_ms),
    }


# -- service state -------------------------------------------------------------


@dataclass(frozen=True)
class _State:
    """Config and policy swapped together; each request reads it once."""

    config: EngineConfig
    policies: PolicySet


def _load_policies(config: EngineConfig) -> PolicySet:
    if not config.policy_path:
        return PolicySet()
    try:
        return load_policy(config.policy_path)
    except OSError as exc:
        raise PolicyError(f"cannot read policy file: {exc}") from exc


def _check_rulebase(config: EngineConfig) -> None:
    try:
        rulebase_for(config.rule_base_path)
    except OSError as exc:
        raise RuleBaseError(f"cannot read rule base: {exc}") from exc


class DecisionService:
    """Transport-independent request handling; ``handle`` maps
    (method, path, body) to (status, document)."""

    def __init__(
        self,
        data_dir: Path | str,
        config: Optional[EngineConfig] = None,
        *,
        fsync: bool = True,
        clock=None,
    ) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        config = config or EngineConfig()
        persisted = self.data_dir / CONFIG_FILE
        if persisted.exists():
            # settings changed through PUT /v1/config outlive restarts
            with open(persisted, encoding="utf-8") as fh:
                config = EngineConfig.from_dict(json.load(fh), base=config)
        _check_rulebase(config)
        self._state = _State(config, _load_policies(config))
        self.store = ChainStore(
            self.data_dir, clock_skew_ms=config.clock_skew_ms, half_life_ms=config.half_life_ms, fsync=fsync
        )
        self._seq = itertools.count(1)
        self._seq_lock = threading.Lock()
        self._config_lock = threading.Lock()
        self._clock = clock or (lambda: time.time_ns() // 1_000_000)
        if self.store.quarantined:
            logger.error("quarantined chains: %s", sorted(self.store.quarantined))

    @property
    def config(self) -> EngineConfig:
        return self._state.config

    @property
    def policies(self) -> PolicySet:
        return self._state.policies

    def _next_seq(self) -> int:
        with self._seq_lock:
            return next(self._seq)

    # routing

    def handle(self, method: str, path: str, body: bytes) -> tuple[int, dict[str, Any]]:
        try:
            status, doc = self._route(method, path.split("?", 1)[0], body)
        except WireError as exc:
            status, doc = exc.status, exc.document()
        except Exception:  # never let a handler bug take the server down
            logger.exception("unhandled error for %s %s", method, path)
            status, doc = 500, {"error": {"code": "INTERNAL", "message": "internal error"}}
        doc["seq"] = self._next_seq()
        doc["server_time_ms"] = self._clock()
        return status, doc

    def _route(self, method: str, path: str, body: bytes) -> tuple[int, dict[str, Any]]:
        if path == "/v1/decide":
            self._allow(method, "POST")
            return self.handle_decide(_json(body))
        if path == "/v1/interactions":
            self._allow(method, "POST")
            return self.handle_record_outcome(_json(body))
        if path == "/v1/config":
            self._allow(method, "GET", "PUT")
            if method == "GET":
                return 200, {"config": self.config.to_dict()}
            return self.handle_put_config(_json(body))
        if path == "/v1/policy/reload":
            self._allow(method, "POST")
            return self.handle_reload_policy()
        parts = path.split("/")
        if len(parts) == 5 and parts[:3] == ["", "v1", "chains"] and parts[4] == "verify":
            self._allow(method, "GET")
            return self.handle_verify(unquote(parts[3]))
        raise WireError(404, "NOT_FOUND", f"no route for {path}")

    @staticmethod
    def _allow(method: str, *allowed: str) -> None:
        if method not in allowed:
            raise WireError(405, "METHOD_NOT_ALLOWED", f"use {' or '.join(allowed)}")

    def _chain(self, principal: str):
        try:
            return self.store.get(principal)
        except IPBACError as exc:
            # quarantined: refuse rather than decide on unverifiable history
            raise WireError(409, "QUARANTINED", str(exc)) from None

    # handlers

    def handle_decide(self, doc: Any) -> tuple[int, dict[str, Any]]:
        t0 = time.perf_counter_ns()
        state = self._state
        request = parse_access_request(doc, self._clock())
        chain = self._chain(request.principal)
        decision = decide(request, state.policies, chain, state.config)
        latency_us = (time.perf_counter_ns() - t0) / 1000.0
        request_log.info(
            json.dumps(
                {
                    "ts": self._clock(),
                    "principal": request.principal,
                    "resource": request.resource,
                    "action": request.action,
                    "path": decision.path.value,
                    "outcome": decision.outcome.value,
                    "ds": decision.ds,
                    "latency_us": round(latency_us, 1),
                },
                sort_keys=True,
            )
        )
        return 200, {"principal": request.principal, "decision": decision.to_dict()}

    def handle_record_outcome(self, doc: Any) -> tuple[int, dict[str, Any]]:
        kwargs = parse_interaction(doc, self._clock())
        chain = self._chain(kwargs["principal"])
        try:
            record = append_record(chain, **kwargs)
        except IPBACError as exc:
            if exc.code in _CONFLICT_CODES:
                raise WireError(409, exc.code, str(exc)) from None
            raise _malformed(str(exc)) from None
        return 200, {"principal": chain.principal, "record_hash": record.record_hash.hex(), "length": len(chain)}

    def handle_verify(self, principal: str) -> tuple[int, dict[str, Any]]:
        if principal in self.store.quarantined:
            report = self.store.verify(principal)
        elif self.store.path_for(principal) is None:
            raise WireError(404, "NOT_FOUND", f"no chain for {principal!r}")
        else:
            report = self.store.verify(principal)
        return 200, {"principal": principal, "report": report.to_dict()}

    def handle_put_config(self, doc: Any) -> tuple[int, dict[str, Any]]:
        if not isinstance(doc, dict):
            raise _malformed("body must be a JSON object")
        with self._config_lock:
            current = self._state
            try:
                config = EngineConfig.from_dict(doc, base=current.config)
            except ConfigError as exc:
                raise WireError(422, exc.code, str(exc), exc.fields) from None
            except TypeError as exc:
                raise _malformed(str(exc)) from None
            try:
                _check_rulebase(config)
            except IPBACError as exc:
                raise WireError(422, "INVALID_CONFIG", str(exc), {"rule_base_path": str(exc)}) from None
            policies = current.policies
            if config.policy_path != current.config.policy_path:
                try:
                    policies = _load_policies(config)
                except IPBACError as exc:
                    raise WireError(422, "INVALID_CONFIG", str(exc), {"policy_path": str(exc)}) from None
            self._persist_config(config)
            if config.half_life_ms != current.config.half_life_ms:
                self.store.set_half_life(config.half_life_ms)
            self.store.clock_skew_ms = config.clock_skew_ms
            self._state = _State(config, policies)
        return 200, {"config": config.to_dict()}

    def handle_reload_policy(self) -> tuple[int, dict[str, Any]]:
        with self._config_lock:
            current = self._state
            if not current.config.policy_path:
                raise WireError(409, "NO_POLICY_PATH", "config has no policy_path")
            try:
                policies = _load_policies(current.config)
            except IPBACError as exc:
                raise WireError(422, "INVALID_POLICY", str(exc)) from None
            self._state = _State(current.config, policies)
        return 200, {
            "policy_path": current.config.policy_path,
            "roles": len(policies.roles),
            "assignments": len(policies.assignments),
        }

    def _persist_config(self, config: EngineConfig) -> None:
        path = self.data_dir / CONFIG_FILE
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)


def _json(body: bytes) -> Any:
    if not body:
        raise _malformed("empty body")
    try:
        return json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _malformed(f"invalid JSON: {exc}") from None


# -- HTTP transport ------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; without TCP_NODELAY the
    # second write waits on the client's delayed ACK (~40 ms per request)
    disable_nagle_algorithm = True
    server: "DecisionServer"

    def _dispatch(self) -> None:
        length = self.headers.get("Content-Length")
        try:
            n = int(length) if length else 0
        except ValueError:
            n = -1
        if n < 0 or n > MAX_BODY:
            status, doc = 400, WireError(400, "MALFORMED", "bad Content-Length").document()
            doc["seq"] = self.server.service._next_seq()
            doc["server_time_ms"] = self.server.service._clock()
            self.close_connection = True
        else:
            body = self.rfile.read(n) if n else b""
            status, doc = self.server.service.handle(self.command, self.path, body)
        payload = json.dumps(doc).encode("utf-8")
        self.send_response(status, HTTPStatus(status).phrase)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    do_GET = do_POST = do_PUT = do_DELETE = _dispatch

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002 - stdlib signature
        logger.debug("%s %s", self.address_string(), format % args)


class DecisionServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: DecisionService) -> None:
        self.service = service
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def serve(service: DecisionService, host: str = "127.0.0.1", port: int = 8080) -> DecisionServer:
    """Bind and return the server (call ``serve_forever`` to run it)."""
    return DecisionServer((host, port), service)
