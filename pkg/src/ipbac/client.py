"""Minimal client for the decision service (one persistent connection)."""

from __future__ import annotations

import http.client
import json
from typing import Any, Optional
from urllib.parse import quote, urlsplit


class ServiceError(Exception):
    def __init__(self, status: int, document: dict[str, Any]) -> None:
        err = document.get("error", {})
        super().__init__(f"{status} {err.get('code')}: {err.get('message')}")
        self.status = status
        self.code = err.get("code")
        self.document = document


class DecisionClient:
    def __init__(self, url: str, timeout: float = 30.0) -> None:
        parts = urlsplit(url)
        if parts.scheme != "http" or not parts.hostname:
            raise ValueError(f"expected http://host:port, got {url!r}")
        self._host = parts.hostname
        self._port = parts.port or 80
        self._timeout = timeout
        self._conn: Optional[http.client.HTTPConnection] = None

    def _connection(self) -> http.client.HTTPConnection:
        if self._conn is None:
            self._conn = http.client.HTTPConnection(self._host, self._port, timeout=self._timeout)
        return self._conn

    def request(self, method: str, path: str, doc: Any = None) -> dict[str, Any]:
        body = None if doc is None else json.dumps(doc).encode("utf-8")
        headers = {"Content-Type": "application/json"} if body is not None else {}
        for attempt in (0, 1):
            conn = self._connection()
            try:
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                data = resp.read()
                break
            except (ConnectionError, http.client.RemoteDisconnected, http.client.CannotSendRequest):
                # stale keep-alive connection: retry once, but never a POST,
                # which may already have been applied
                self.close()
                if attempt or method == "POST":
                    raise
        out = json.loads(data) if data else {}
        if resp.status >= 400:
            raise ServiceError(resp.status, out)
        return out

    def decide(self, request: dict[str, Any]) -> dict[str, Any]:
        return self.request("POST", "/v1/decide", request)

    def record_interaction(self, doc: dict[str, Any]) -> dict[str, Any]:
        return self.request("POST", "/v1/interactions", doc)

    def verify(self, principal: str) -> dict[str, Any]:
        return self.request("GET", f"/v1/chains/{quote(principal, safe='')}/verify")

    def get_config(self) -> dict[str, Any]:
        return self.request("GET", "/v1/config")

    def put_config(self, changes: dict[str, Any]) -> dict[str, Any]:
        return self.request("PUT", "/v1/config", changes)

    def reload_policy(self) -> dict[str, Any]:
        return self.request("POST", "/v1/policy/reload", {})

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def __enter__(self) -> "DecisionClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
