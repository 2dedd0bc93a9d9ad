"""Controller-agent message records and the replayable run trace.

Records are length-prefixed: a u32 little-endian body length, one kind
byte, then the body as canonical key=value text (UTF-8, keys sorted, one
pair per line). Every message exchanged during a run is appended to the
trace, so a run can be replayed or audited offline byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional

KIND_REGISTER = "REGISTER"
KIND_CONFIG_HOP = "CONFIG_HOP"
KIND_POOL_REPORT = "POOL_REPORT"
KIND_SESSION_CMD = "SESSION_CMD"
KIND_ALARM = "ALARM"

_KIND_TO_TAG = {
    KIND_REGISTER: 1,
    KIND_CONFIG_HOP: 2,
    KIND_POOL_REPORT: 3,
    KIND_SESSION_CMD: 4,
    KIND_ALARM: 5,
}
_TAG_TO_KIND = {v: k for k, v in _KIND_TO_TAG.items()}


class MessageError(Exception):
    pass


@dataclass(frozen=True)
class Message:
    kind: str
    body: tuple[tuple[str, str], ...]

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.body:
            if k == key:
                return v
        return default


def _canonical_body(body: Mapping[str, object]) -> tuple[tuple[str, str], ...]:
    return tuple(sorted((str(k), str(v)) for k, v in body.items()))


def encode_message(kind: str, body: Mapping[str, object]) -> bytes:
    if kind not in _KIND_TO_TAG:
        raise MessageError(f"unknown message kind '{kind}'")
    pairs = _canonical_body(body)
    text = "".join(f"{k}={v}\n" for k, v in pairs).encode("utf-8")
    return struct.pack("<IB", len(text) + 1, _KIND_TO_TAG[kind]) + text


def decode_messages(data: bytes) -> Iterator[Message]:
    offset = 0
    while offset < len(data):
        if offset + 5 > len(data):
            raise MessageError("truncated message header")
        length, tag = struct.unpack_from("<IB", data, offset)
        body_start = offset + 5
        body_end = offset + 4 + length
        if body_end > len(data):
            raise MessageError("truncated message body")
        kind = _TAG_TO_KIND.get(tag)
        if kind is None:
            raise MessageError(f"unknown kind tag {tag}")
        pairs = []
        text = data[body_start:body_end].decode("utf-8")
        for line in text.splitlines():
            key, _, value = line.partition("=")
            pairs.append((key, value))
        yield Message(kind=kind, body=tuple(pairs))
        offset = body_end


def read_trace(path) -> list[Message]:
    with open(path, "rb") as fh:
        return list(decode_messages(fh.read()))


class MessageBus:
    """Synchronous in-process bus with a write-through trace.

    Delivery is at-least-once from the handlers' point of view (tests
    re-deliver records), so every handler deduplicates on the msg_id each
    message carries.
    """

    def __init__(self, trace_path=None):
        self._handlers: dict[str, object] = {}
        self._trace = open(trace_path, "wb") if trace_path else None
        self._next_id = 0
        self.log: list[Message] = []

    def subscribe(self, address: str, handler) -> None:
        self._handlers[address] = handler

    def send(self, to: str, kind: str, body: Mapping[str, object]):
        payload = dict(body)
        payload.setdefault("msg_id", self._next_id)
        payload.setdefault("to", to)
        self._next_id += 1
        raw = encode_message(kind, payload)
        if self._trace is not None:
            self._trace.write(raw)
        message = next(decode_messages(raw))
        self.log.append(message)
        handler = self._handlers.get(to)
        return handler(message) if handler is not None else None

    def redeliver(self, message: Message):
        """Deliver an existing record again (duplicate-delivery testing)."""
        to = message.get("to")
        handler = self._handlers.get(to or "")
        return handler(message) if handler is not None else None

    def flush(self) -> None:
        if self._trace is not None:
            self._trace.flush()

    def close(self) -> None:
        if self._trace is not None:
            self._trace.close()
            self._trace = None
