"""HTTP client for the key delivery service.

A ClientSession binds one application identity against one peer and maps
straight onto the wire surface documented in docs/api.md: the key
delivery endpoints (status / enc_keys / dec_keys) and the stream
endpoints. Request bodies are canonical JSON so recorded transcripts are
reproducible byte for byte.

Retry policy: transport-level failures (connection refused, resets,
timeouts before a response) are retried with a short backoff. Requests
that reached the server and came back as errors are never retried. The
session tracks every key_ID whose bytes it has handed out and refuses to
return the same key twice, so retries can never double-spend.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import requests


class TransportError(Exception):
    """The service could not be reached; no response was received."""


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(f"{status}: {message}")
        self.status = status
        self.message = message


class TranscriptRecorder:
    """Records requests and responses in the format docs/api.md freezes."""

    def __init__(self):
        self.lines: list[str] = []

    def request(self, method: str, path: str, body: Optional[bytes]) -> None:
        self.lines.append(f"> {method} {path}")
        if body is not None:
            self.lines.append("> " + body.decode("utf-8"))

    def response(self, status: int, body: bytes) -> None:
        self.lines.append(f"< {status}")
        self.lines.append("< " + body.decode("utf-8"))

    @property
    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text)


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class ClientSession:
    base_url: str
    sae_id: str
    peer_id: str
    recorder: Optional[TranscriptRecorder] = None
    max_retries: int = 2
    backoff_s: float = 0.2
    timeout_s: float = 30.0
    _http: requests.Session = field(default_factory=requests.Session)
    _delivered: dict[str, bytes] = field(default_factory=dict)

    # -- transport

    def _request(self, method: str, path: str,
                 body: Optional[dict] = None) -> dict:
        payload = _canonical(body) if body is not None else None
        if self.recorder is not None:
            self.recorder.request(method, path, payload)
        url = self.base_url.rstrip("/") + path
        headers = {"Content-Type": "application/json"} if payload else {}
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._http.request(
                    method, url, data=payload, headers=headers,
                    timeout=self.timeout_s,
                )
                break
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff_s * (2 ** attempt))
        else:
            raise TransportError(f"{method} {path}: {last_exc}")
        if self.recorder is not None:
            self.recorder.response(resp.status_code, resp.content)
        try:
            data = resp.json()
        except ValueError:
            raise ServiceError(resp.status_code, "non-JSON response") from None
        if resp.status_code >= 400:
            raise ServiceError(
                resp.status_code, data.get("message", "unknown error")
            )
        return data

    # -- key delivery

    def get_status(self) -> dict:
        return self._request(
            "GET", f"/api/v1/keys/{self.peer_id}/status?sae={self.sae_id}"
        )

    def _guard_and_cache(self, entries: list[dict]) -> list[tuple[str, bytes]]:
        out = []
        for entry in entries:
            key_id = entry["key_ID"]
            if key_id in self._delivered:
                raise ServiceError(
                    409, f"key_ID '{key_id}' was already delivered to this session"
                )
            data = base64.b64decode(entry["key"])
            self._delivered[key_id] = data
            out.append((key_id, data))
        return out

    def fetch_keys(self, number: int = 1,
                   size: Optional[int] = None) -> list[tuple[str, bytes]]:
        """Request fresh keys as the master side of the pair."""
        body: dict = {"number": number}
        if size is not None:
            body["size"] = size
        data = self._request(
            "POST", f"/api/v1/keys/{self.peer_id}/enc_keys?sae={self.sae_id}",
            body,
        )
        return self._guard_and_cache(data["keys"])

    def fetch_by_ids(self, key_ids: list[str]) -> list[tuple[str, bytes]]:
        """Fetch the peer-issued keys named by key_ids (slave side)."""
        fresh = [k for k in key_ids if k not in self._delivered]
        if len(fresh) != len(key_ids):
            seen = [k for k in key_ids if k in self._delivered]
            raise ServiceError(
                409, f"key_IDs already delivered to this session: {seen}"
            )
        data = self._request(
            "POST", f"/api/v1/keys/{self.peer_id}/dec_keys?sae={self.sae_id}",
            {"key_IDs": key_ids},
        )
        return self._guard_and_cache(data["keys"])

    # -- streams

    def open_stream(self, qos: Optional[dict] = None) -> str:
        data = self._request("POST", "/qkd004/open", {
            "source": self.sae_id,
            "destination": self.peer_id,
            "qos": qos or {},
        })
        return data["key_stream_id"]

    def stream_get(self, stream_id: str, index: int) -> bytes:
        data = self._request(
            "GET",
            f"/qkd004/get?stream={stream_id}&index={index}&sae={self.sae_id}",
        )
        return base64.b64decode(data["key"])

    def close_stream(self, stream_id: str) -> dict:
        return self._request("POST", "/qkd004/close",
                             {"key_stream_id": stream_id})

    # -- operations helpers (manual-clock servers)

    def advance(self, ticks: int) -> dict:
        return self._request("POST", "/ops/advance", {"ticks": ticks})
