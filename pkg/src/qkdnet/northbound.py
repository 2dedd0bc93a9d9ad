"""Application-facing key delivery service.

Two surfaces are exposed over plain HTTP with JSON bodies:

* key delivery — ``GET /api/v1/keys/{slave}/status``,
  ``POST /api/v1/keys/{slave}/enc_keys``, ``POST /api/v1/keys/{master}/dec_keys``.
  The calling application identifies itself with the ``sae`` query
  parameter; a session between a pair is opened implicitly with default
  QoS on first touch. Each key is retrievable exactly once per side and
  master/slave copies are bitwise equal.

* key streams — ``POST /qkd004/open``, ``GET /qkd004/get``,
  ``POST /qkd004/close``. A stream maps one-to-one onto a controller
  session; reads are indexed with a bounded replay window.

Shortage blocks the request up to the session timeout instead of failing
immediately, which suits stream-shaped consumers; waiting never stalls
other pairs because the engine lock is released while parked. The full
request/response wire format is frozen in docs/api.md.
"""

from __future__ import annotations

import base64
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from . import kernels
from .controller import (
    AdmissionRejectedError,
    ControllerError,
    NoFeasiblePathError,
    QoS,
    UnknownAppError,
)
from .engine import SimulationEngine
from .qkdsim import derive_seed

REPLAY_WINDOW = 16


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class _PairState:
    session_id: str
    master: str
    slave: str
    keyid_seed: int
    keyid_counter: int = 0
    enc_cursor: int = 0  # next chunk index not yet issued
    issued: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    picked: set[str] = field(default_factory=set)

    def next_key_id(self) -> str:
        raw = kernels.fill_keystream(self.keyid_seed, self.keyid_counter * 2, 16)
        self.keyid_counter += 1
        return str(uuid.UUID(bytes=raw))


@dataclass
class _StreamState:
    session_id: str
    src_app: str
    dst_app: str
    next_index: dict[str, int] = field(default_factory=dict)
    closed: bool = False


class NorthboundService:
    """In-process service object; the HTTP layer is a thin shim over it."""

    def __init__(self, engine: SimulationEngine):
        self.engine = engine
        self.model = engine.model
        self.defaults = engine.model.defaults
        self._pairs: dict[tuple[str, str], _PairState] = {}
        self._streams: dict[str, _StreamState] = {}

    # -- helpers

    def _check_app(self, app_id: str) -> None:
        if not self.model.has_app(app_id):
            raise ServiceError(404, f"unknown application '{app_id}'")

    def _default_qos(self) -> QoS:
        d = self.defaults
        return QoS(
            key_chunk_size=d.key_chunk_size,
            min_bps=d.min_bps,
            max_bps=d.max_bps,
            timeout_ms=d.timeout_ms,
            ttl_s=d.ttl_s,
        )

    def _pair(self, master: str, slave: str) -> _PairState:
        self._check_app(master)
        self._check_app(slave)
        if master == slave:
            raise ServiceError(400, "master and slave must differ")
        key = (master, slave)
        state = self._pairs.get(key)
        if state is None:
            try:
                session_id = self.engine.controller.open_connect(
                    master, slave, self._default_qos(),
                    link_loss=self.engine.link_loss,
                )
            except ControllerError as exc:
                raise ServiceError(503, str(exc)) from None
            state = _PairState(
                session_id=session_id,
                master=master,
                slave=slave,
                keyid_seed=derive_seed(self.engine.seed, "keyid", session_id),
            )
            self._pairs[key] = state
        return state

    def _session(self, session_id: str):
        return self.engine.controller.sessions[session_id]

    def _wait_until(self, predicate, timeout_ms: int) -> bool:
        """Block on the engine clock until predicate() holds or timeout.

        The engine lock is released while parked, so ticks and requests for
        other pairs keep flowing.
        """
        deadline = time.monotonic() + timeout_ms / 1000.0
        with self.engine.ticked:
            while not predicate():
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return predicate()
                self.engine.ticked.wait(timeout=remaining)
            return True

    # -- key delivery (title surface: status / enc_keys / dec_keys)

    def get_status(self, master: str, slave: str) -> dict:
        with self.engine.lock:
            pair = self._pair(master, slave)
            session = self._session(pair.session_id)
            stored = len(session.src_buffer) - pair.enc_cursor
            return {
                "source_KME_ID": session.src_node,
                "target_KME_ID": session.dst_node,
                "master_SAE_ID": master,
                "slave_SAE_ID": slave,
                "key_size": session.qos.key_chunk_size,
                "stored_key_count": stored,
                "max_key_count": self.defaults.max_key_count,
                "max_key_per_request": 128,
                "max_key_size": self.defaults.max_key_size,
                "min_key_size": 1,
            }

    def get_enc_keys(self, master: str, slave: str, number: int = 1,
                     size: Optional[int] = None) -> list[dict]:
        with self.engine.lock:
            pair = self._pair(master, slave)
            session = self._session(pair.session_id)
            chunk = session.qos.key_chunk_size
            size = chunk if size is None else size
            if number <= 0:
                raise ServiceError(400, "number must be >= 1")
            if size <= 0:
                raise ServiceError(400, "size must be >= 1")
            if size > self.defaults.max_key_size:
                raise ServiceError(
                    400, f"size exceeds max_key_size {self.defaults.max_key_size}"
                )
            per_key = -(-size // chunk)  # chunks per delivered key
            need = pair.enc_cursor + number * per_key

            ready = self._wait_until(
                lambda: len(session.src_buffer) >= need
                or session.state not in ("active", "configured"),
                session.qos.timeout_ms,
            )
            if session.state not in ("active",):
                raise ServiceError(
                    503, f"session state '{session.state}' cannot deliver keys"
                )
            if not ready or len(session.src_buffer) < need:
                raise ServiceError(
                    503,
                    f"insufficient key after timeout: have "
                    f"{len(session.src_buffer) - pair.enc_cursor} chunks, "
                    f"need {number * per_key}",
                )
            out = []
            for _ in range(number):
                start = pair.enc_cursor
                data = b"".join(
                    session.src_buffer[start : start + per_key]
                )[:size]
                pair.enc_cursor = start + per_key
                key_id = pair.next_key_id()
                pair.issued[key_id] = (start, per_key, size)
                out.append({
                    "key_ID": key_id,
                    "key": base64.b64encode(data).decode("ascii"),
                })
            return out

    def get_dec_keys(self, slave: str, master: str,
                     key_ids: list[str]) -> list[dict]:
        with self.engine.lock:
            self._check_app(slave)
            self._check_app(master)
            pair = self._pairs.get((master, slave))
            if pair is None:
                raise ServiceError(404, "unknown key_ID for this pair")
            if not key_ids:
                raise ServiceError(400, "key_IDs must be non-empty")
            session = self._session(pair.session_id)
            out = []
            for key_id in key_ids:
                issued = pair.issued.get(key_id)
                if issued is None:
                    raise ServiceError(404, f"unknown key_ID '{key_id}'")
                if key_id in pair.picked:
                    raise ServiceError(
                        409, f"key_ID '{key_id}' already retrieved"
                    )
                start, per_key, size = issued
                data = b"".join(
                    session.dst_buffer[start : start + per_key]
                )[:size]
                pair.picked.add(key_id)
                out.append({
                    "key_ID": key_id,
                    "key": base64.b64encode(data).decode("ascii"),
                })
            return out

    # -- QoS streams

    def stream_open(self, src: str, dst: str, qos_args: dict) -> str:
        with self.engine.lock:
            self._check_app(src)
            self._check_app(dst)
            d = self.defaults
            try:
                qos = QoS(
                    key_chunk_size=int(qos_args.get("key_chunk_size", d.key_chunk_size)),
                    min_bps=float(qos_args.get("min_bps", d.min_bps)),
                    max_bps=float(qos_args.get("max_bps", max(
                        d.max_bps, float(qos_args.get("min_bps", d.min_bps))
                    ))),
                    priority=int(qos_args.get("priority", 0)),
                    timeout_ms=int(qos_args.get("timeout_ms", d.timeout_ms)),
                    ttl_s=int(qos_args.get("ttl_s", d.ttl_s)),
                    diversity=int(qos_args.get("diversity", 1)),
                    mode=str(qos_args.get("mode", "distilled")),
                )
            except ValueError as exc:
                raise ServiceError(400, f"invalid QoS: {exc}") from None
            try:
                session_id = self.engine.controller.open_connect(
                    src, dst, qos, link_loss=self.engine.link_loss
                )
            except (AdmissionRejectedError, NoFeasiblePathError) as exc:
                raise ServiceError(503, str(exc)) from None
            except UnknownAppError as exc:
                raise ServiceError(404, str(exc)) from None
            except ControllerError as exc:
                raise ServiceError(400, str(exc)) from None
            self._streams[session_id] = _StreamState(
                session_id=session_id, src_app=src, dst_app=dst,
                next_index={src: 0, dst: 0},
            )
            return session_id

    def stream_get(self, stream_id: str, index: int, sae: str) -> dict:
        with self.engine.lock:
            stream = self._streams.get(stream_id)
            if stream is None:
                raise ServiceError(404, f"unknown key_stream_id '{stream_id}'")
            if stream.closed:
                raise ServiceError(410, "stream is closed")
            if sae not in (stream.src_app, stream.dst_app):
                raise ServiceError(403, f"app '{sae}' is not an endpoint")
            session = self._session(stream.session_id)
            side = (
                session.src_buffer if sae == stream.src_app else session.dst_buffer
            )
            nxt = stream.next_index[sae]
            if index > nxt:
                raise ServiceError(
                    416, f"index {index} ahead of next unread {nxt}"
                )
            if index < max(0, nxt - REPLAY_WINDOW):
                raise ServiceError(
                    416,
                    f"index {index} outside replay window "
                    f"[{max(0, nxt - REPLAY_WINDOW)}, {nxt}]",
                )
            self._wait_until(
                lambda: len(side) > index
                or session.state not in ("active", "configured"),
                session.qos.timeout_ms,
            )
            if len(side) <= index:
                if session.state != "active":
                    raise ServiceError(
                        503, f"session state '{session.state}' cannot deliver keys"
                    )
                raise ServiceError(503, "insufficient key after timeout")
            if index == nxt:
                stream.next_index[sae] = nxt + 1
            return {
                "key_stream_id": stream_id,
                "index": index,
                "key": base64.b64encode(side[index]).decode("ascii"),
            }

    def stream_close(self, stream_id: str) -> dict:
        with self.engine.lock:
            stream = self._streams.get(stream_id)
            if stream is None:
                raise ServiceError(404, f"unknown key_stream_id '{stream_id}'")
            if stream.closed:
                raise ServiceError(410, "stream already closed")
            stream.closed = True
            record = self.engine.controller.close(stream.session_id)
            return {
                "key_stream_id": stream_id,
                "delivered_chunks": record.delivered_chunks,
                "delivered_bytes": record.delivered_bytes,
            }

    # -- operations surface

    def ops_status(self) -> dict:
        with self.engine.lock:
            return self.engine.controller.network_status()

    def ops_advance(self, ticks: int) -> dict:
        if ticks <= 0 or ticks > 100_000:
            raise ServiceError(400, "ticks must be in [1, 100000]")
        for _ in range(ticks):
            self.engine.tick()
        with self.engine.lock:
            return {"tick": self.engine.tick_index}


# ---------------------------------------------------------------------------
# HTTP layer


def _json_bytes(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


class _Handler(BaseHTTPRequestHandler):
    service: NorthboundService  # set on the server class
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _reply(self, status: int, payload) -> None:
        body = _json_bytes(payload)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            raise ServiceError(400, "request body is not valid JSON") from None

    def _route(self, method: str) -> None:
        url = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        parts = [p for p in url.path.split("/") if p]
        service = self.server.service  # type: ignore[attr-defined]
        try:
            payload = self._dispatch(method, parts, query, service)
        except ServiceError as exc:
            self._reply(exc.status, {"message": exc.message})
            return
        except Exception as exc:  # noqa: BLE001 - surface as 500, keep serving
            self._reply(500, {"message": f"internal error: {exc}"})
            return
        self._reply(200, payload)

    def _dispatch(self, method: str, parts: list[str], query: dict,
                  service: NorthboundService):
        if method == "GET" and parts == ["healthz"]:
            return {"status": "ok"}
        if parts[:3] == ["api", "v1", "keys"] and len(parts) == 5:
            peer = parts[3]
            caller = query.get("sae", "")
            if method == "GET" and parts[4] == "status":
                return service.get_status(master=caller, slave=peer)
            if method == "POST" and parts[4] == "enc_keys":
                body = self._read_json()
                keys = service.get_enc_keys(
                    master=caller, slave=peer,
                    number=int(body.get("number", 1)),
                    size=int(body["size"]) if "size" in body else None,
                )
                return {"keys": keys}
            if method == "POST" and parts[4] == "dec_keys":
                body = self._read_json()
                ids = body.get("key_IDs", [])
                if ids and isinstance(ids[0], dict):
                    ids = [e.get("key_ID", "") for e in ids]
                keys = service.get_dec_keys(
                    slave=caller, master=peer, key_ids=list(ids),
                )
                return {"keys": keys}
        if parts[:1] == ["qkd004"]:
            if method == "POST" and parts[1:] == ["open"]:
                body = self._read_json()
                stream_id = service.stream_open(
                    src=body.get("source", ""),
                    dst=body.get("destination", ""),
                    qos_args=body.get("qos", {}),
                )
                return {"key_stream_id": stream_id}
            if method == "GET" and parts[1:] == ["get"]:
                return service.stream_get(
                    stream_id=query.get("stream", ""),
                    index=int(query.get("index", "0")),
                    sae=query.get("sae", ""),
                )
            if method == "POST" and parts[1:] == ["close"]:
                body = self._read_json()
                return service.stream_close(body.get("key_stream_id", ""))
        if parts[:1] == ["ops"]:
            if method == "GET" and parts[1:] == ["status"]:
                return service.ops_status()
            if method == "POST" and parts[1:] == ["advance"]:
                body = self._read_json()
                return service.ops_advance(int(body.get("ticks", 1)))
        raise ServiceError(404, f"no route for {method} {self.path}")

    def do_GET(self):  # noqa: N802
        self._route("GET")

    def do_POST(self):  # noqa: N802
        self._route("POST")


class NorthboundServer:
    """Threaded HTTP server wrapper around a NorthboundService."""

    def __init__(self, service: NorthboundService, host: str = "127.0.0.1",
                 port: int = 0):
        self.service = service
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.service = service  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05},
            daemon=True,
        )
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
