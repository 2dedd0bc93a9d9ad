"""Local key management: pools, one-time-use accounting, and hop relay.

Every node runs a KeyStore that ingests the key blocks its QKD links
produce and dispenses them strictly first-in-first-out per (peer, vendor,
mode) pool. A consumed ledger records every byte range ever handed out;
no byte may appear twice. Because both endpoints of a link hold identical
blocks and both consume in the same global order, hop endpoints stay in
lockstep by construction, and any injected desynchronisation surfaces as
an authentication failure rather than silent corruption.

The forwarding path moves a source-generated end key hop by hop: at each
hop the current chunk is XORed with fresh link key (Vernam), tagged with a
one-time polynomial MAC, decrypted and re-encrypted at the next trusted
node. Each hop burns exactly payload length + 32 bytes of link key at both
of its endpoints; keys touched by a failed transfer are destroyed, never
returned to the pool.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

from . import kernels
from .qkdsim import KeyBlock, derive_seed, fnv1a64

AUTH_KEY_BYTES = 32
AUTH_TAG_BYTES = 16


class LkmsError(Exception):
    pass


class ForeignBlockError(LkmsError):
    pass


class DuplicateBlockError(LkmsError):
    pass


class InsufficientKeyError(LkmsError):
    def __init__(self, available: int, requested: int,
                 hop: Optional[int] = None, pool: str = ""):
        where = f" at hop {hop}" if hop is not None else ""
        detail = f" ({pool})" if pool else ""
        super().__init__(
            f"insufficient_key{where}: available {available} < "
            f"requested {requested}{detail}"
        )
        self.available = available
        self.requested = requested
        self.hop = hop


class LengthMismatchError(LkmsError):
    pass


class ReusedKeyError(LkmsError):
    pass


class AuthFailureError(LkmsError):
    def __init__(self, message: str, hop: Optional[int] = None):
        super().__init__(message)
        self.hop = hop


class StreamTagError(LkmsError):
    pass


class LedgerError(LkmsError):
    """One-time-use audit failure; indicates a bug, never normal operation."""


@dataclass
class KeyChunk:
    chunk_id: str
    data: bytes
    provenance: tuple[tuple[str, int, int], ...]
    stream_tag: str
    spent: bool = False

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class RelayMessage:
    session_id: bytes
    hop_index: int
    ciphertext: bytes
    tag: bytes
    key_ref: str


# Wire format: length-prefixed little-endian records.
#   u32 record_len | session_id 16B | hop_index u16 | payload_len u32 |
#   ciphertext | tag 16B
_WIRE_HEAD = struct.Struct("<16sHI")


def encode_relay_message(msg: RelayMessage) -> bytes:
    body = _WIRE_HEAD.pack(msg.session_id, msg.hop_index, len(msg.ciphertext))
    body += msg.ciphertext + msg.tag
    return struct.pack("<I", len(body)) + body


def decode_relay_message(buf: bytes, offset: int = 0) -> tuple[RelayMessage, int]:
    (rec_len,) = struct.unpack_from("<I", buf, offset)
    start = offset + 4
    session_id, hop_index, payload_len = _WIRE_HEAD.unpack_from(buf, start)
    cstart = start + _WIRE_HEAD.size
    ciphertext = buf[cstart : cstart + payload_len]
    tag = buf[cstart + payload_len : cstart + payload_len + AUTH_TAG_BYTES]
    if len(ciphertext) != payload_len or len(tag) != AUTH_TAG_BYTES:
        raise LkmsError("truncated relay record")
    end = start + rec_len
    return RelayMessage(session_id, hop_index, ciphertext, tag, key_ref=""), end


@dataclass
class _PoolEntry:
    block: KeyBlock
    offset: int = 0

    @property
    def remaining(self) -> int:
        return len(self.block.data) - self.offset


class KeyStore:
    """Per-node key pools with strict one-time-use accounting."""

    def __init__(self, node_id: str, id_seed: Optional[int] = None):
        self.node_id = node_id
        self._id_seed = (
            id_seed if id_seed is not None
            else derive_seed(fnv1a64(node_id.encode()), "chunk-ids")
        )
        self._id_counter = 0
        self._links: dict[str, str] = {}  # link id -> peer node
        self._pools: dict[tuple[str, str, str], list[_PoolEntry]] = {}
        self._ledger: dict[str, list[tuple[int, int]]] = {}
        self._block_len: dict[str, int] = {}
        self._seen_blocks: set[str] = set()
        self._ingested_bytes = 0
        self._consumed_bytes = 0

    # -- wiring

    def register_link(self, link_id: str, peer_node: str) -> None:
        self._links[link_id] = peer_node

    def _next_chunk_id(self) -> str:
        raw = kernels.fill_keystream(self._id_seed, self._id_counter * 2, 16)
        self._id_counter += 1
        return raw.hex()

    # -- ingestion

    def ingest(self, block: KeyBlock) -> None:
        peer = self._links.get(block.link_id)
        if peer is None:
            raise ForeignBlockError(
                f"block '{block.block_id}' arrived over link "
                f"'{block.link_id}' which does not terminate at "
                f"node '{self.node_id}'"
            )
        if not block.data:
            raise LkmsError("key blocks must be non-empty")
        dedup = (block.link_id, block.block_id)
        if dedup in self._seen_blocks:
            raise DuplicateBlockError(
                f"duplicate block id '{block.block_id}' on link '{block.link_id}'"
            )
        self._seen_blocks.add(dedup)
        key = (peer, block.vendor, block.mode)
        self._pools.setdefault(key, []).append(_PoolEntry(block))
        self._block_len[self._ledger_key(block)] = len(block.data)
        self._ingested_bytes += len(block.data)

    @staticmethod
    def _ledger_key(block: KeyBlock) -> str:
        return f"{block.link_id}/{block.block_id}"

    # -- queries

    def _candidate_pools(self, peer: str, vendor: Optional[str],
                         mode: str) -> list[list[_PoolEntry]]:
        out = []
        for (p, v, m), entries in sorted(self._pools.items()):
            if p == peer and m == mode and (vendor is None or v == vendor):
                out.append(entries)
        return out

    def available_bytes(self, peer: str, vendor: Optional[str] = None,
                        mode: str = "distilled") -> int:
        return sum(
            e.remaining
            for entries in self._candidate_pools(peer, vendor, mode)
            for e in entries
        )

    def pool_levels(self) -> dict[tuple[str, str, str], int]:
        return {
            key: sum(e.remaining for e in entries)
            for key, entries in sorted(self._pools.items())
            if any(e.remaining for e in entries)
        }

    # -- consumption

    def reserve(self, peer: str, length: int, vendor: Optional[str] = None,
                mode: str = "distilled") -> KeyChunk:
        """Extract `length` bytes FIFO across matching pools, atomically.

        Blocks are consumed in (created_at, block_id) order so that the two
        ends of a link always walk their mirrored pools identically.
        """
        if length <= 0:
            raise LkmsError("reserve length must be > 0")
        pools = self._candidate_pools(peer, vendor, mode)
        live = [e for entries in pools for e in entries if e.remaining > 0]
        live.sort(key=lambda e: (e.block.created_at, e.block.block_id))
        available = sum(e.remaining for e in live)
        if available < length:
            raise InsufficientKeyError(
                available, length,
                pool=f"peer={peer} vendor={vendor or '*'} mode={mode}",
            )

        parts: list[bytes] = []
        provenance: list[tuple[str, int, int]] = []
        need = length
        for entry in live:
            if need == 0:
                break
            take = min(need, entry.remaining)
            start = entry.offset
            parts.append(entry.block.data[start : start + take])
            lkey = self._ledger_key(entry.block)
            provenance.append((lkey, start, start + take))
            self._ledger.setdefault(lkey, []).append((start, start + take))
            entry.offset += take
            need -= take
        self._consumed_bytes += length
        self._gc_pools()
        return KeyChunk(
            chunk_id=self._next_chunk_id(),
            data=b"".join(parts),
            provenance=tuple(provenance),
            stream_tag=provenance[0][0].split("/", 1)[0],
        )

    def _gc_pools(self) -> None:
        for key in list(self._pools):
            entries = [e for e in self._pools[key] if e.remaining > 0]
            if entries:
                self._pools[key] = entries
            else:
                del self._pools[key]

    # -- audit

    @property
    def ingested_bytes(self) -> int:
        return self._ingested_bytes

    @property
    def consumed_bytes(self) -> int:
        return self._consumed_bytes

    @property
    def available_total(self) -> int:
        return sum(
            e.remaining for entries in self._pools.values() for e in entries
        )

    def audit(self) -> tuple[int, int, int]:
        """Verify one-time-use discipline and byte conservation.

        Returns (ingested, consumed, available). Raises LedgerError if any
        consumed ranges overlap, spill past a block boundary, or the books
        do not balance.
        """
        total_consumed = 0
        for lkey, ranges in self._ledger.items():
            blen = self._block_len.get(lkey)
            if blen is None:
                raise LedgerError(f"ledger entry for unknown block '{lkey}'")
            last_end = 0
            for start, end in sorted(ranges):
                if start < last_end:
                    raise LedgerError(
                        f"overlapping consumed ranges in block '{lkey}'"
                    )
                if end > blen or start < 0 or end <= start:
                    raise LedgerError(f"bad consumed range in block '{lkey}'")
                last_end = end
            total_consumed += sum(end - start for start, end in ranges)
        if total_consumed != self._consumed_bytes:
            raise LedgerError("ledger total does not match consumed counter")
        if self._ingested_bytes != self._consumed_bytes + self.available_total:
            raise LedgerError("byte conservation violated")
        return self._ingested_bytes, self._consumed_bytes, self.available_total


# ---------------------------------------------------------------------------
# Hop relay primitives


def _mac_input(session_id: bytes, hop_index: int, ciphertext: bytes) -> bytes:
    return session_id + struct.pack("<H", hop_index) + ciphertext


def _spend(*chunks: KeyChunk) -> None:
    for chunk in chunks:
        if chunk.spent:
            raise ReusedKeyError(
                f"chunk '{chunk.chunk_id}' has already been used as key material"
            )
    for chunk in chunks:
        chunk.spent = True


def relay_encrypt(session_id: bytes, hop_index: int, chunk: KeyChunk,
                  hop_key: KeyChunk, auth_key: KeyChunk) -> RelayMessage:
    """One-time-pad a chunk for a hop and tag it for authentication."""
    if len(session_id) != 16:
        raise LengthMismatchError("session_id must be 16 bytes")
    if len(hop_key.data) != len(chunk.data):
        raise LengthMismatchError(
            f"hop key length {len(hop_key.data)} != chunk length {len(chunk.data)}"
        )
    if len(auth_key.data) != AUTH_KEY_BYTES:
        raise LengthMismatchError(
            f"auth key must be {AUTH_KEY_BYTES} bytes, got {len(auth_key.data)}"
        )
    _spend(hop_key, auth_key)
    ciphertext = kernels.xor_bytes(chunk.data, hop_key.data)
    tag = kernels.poly_mac(auth_key.data, _mac_input(session_id, hop_index, ciphertext))
    return RelayMessage(
        session_id=session_id,
        hop_index=hop_index,
        ciphertext=ciphertext,
        tag=tag,
        key_ref=f"{hop_key.provenance[0][0]}+{hop_key.provenance[0][1]}",
    )


def relay_decrypt(msg: RelayMessage, hop_key: KeyChunk,
                  auth_key: KeyChunk) -> KeyChunk:
    """Verify a hop message and recover the plaintext chunk.

    The tag is checked before any decryption; a mismatch signals tampering
    or key desynchronisation between the hop endpoints. The keys are burned
    either way.
    """
    if len(hop_key.data) != len(msg.ciphertext):
        raise LengthMismatchError(
            f"hop key length {len(hop_key.data)} != ciphertext "
            f"length {len(msg.ciphertext)}"
        )
    if len(auth_key.data) != AUTH_KEY_BYTES:
        raise LengthMismatchError(
            f"auth key must be {AUTH_KEY_BYTES} bytes, got {len(auth_key.data)}"
        )
    _spend(hop_key, auth_key)
    expect = kernels.poly_mac(
        auth_key.data, _mac_input(msg.session_id, msg.hop_index, msg.ciphertext)
    )
    if not hmac.compare_digest(expect, msg.tag):
        raise AuthFailureError(
            f"auth_failure at hop {msg.hop_index}: tag mismatch "
            f"(tamper or key desynchronisation)",
            hop=msg.hop_index,
        )
    plain = kernels.xor_bytes(msg.ciphertext, hop_key.data)
    digest = hashlib.blake2b(
        msg.session_id + msg.tag + plain, digest_size=16
    ).hexdigest()
    return KeyChunk(
        chunk_id=digest,
        data=plain,
        provenance=((f"relay:{msg.session_id.hex()}:{msg.hop_index}", 0, len(plain)),),
        stream_tag=f"relay:{msg.hop_index}",
    )


@dataclass(frozen=True)
class HopContext:
    """Everything forwarding needs to cross one trusted-node hop."""
    sender: KeyStore
    receiver: KeyStore
    vendor: Optional[str]
    link_id: str


@dataclass(frozen=True)
class HopAccounting:
    hop_index: int
    link_id: str
    consumed_bytes_each_end: int


@dataclass(frozen=True)
class DeliveryOutcome:
    session_id: bytes
    chunk: KeyChunk
    hops: tuple[HopAccounting, ...]
    wire_records: tuple[bytes, ...]


def forward_key(session_id: bytes, hops: Sequence[HopContext],
                payload: KeyChunk) -> DeliveryOutcome:
    """Relay a payload chunk across the given hops.

    Each hop consumes len(payload) bytes of pad plus 32 bytes of MAC key at
    both of its endpoints, drawn FIFO from the shared link pools so the two
    sides stay aligned. Failure at hop i raises with that hop named; key
    already reserved is gone.
    """
    if not hops:
        raise LkmsError("forward_key requires at least one hop")
    current = payload
    accounting: list[HopAccounting] = []
    records: list[bytes] = []
    length = len(payload.data)
    for index, hop in enumerate(hops):
        try:
            hop_key_s = hop.sender.reserve(
                hop.receiver.node_id, length, hop.vendor)
            auth_key_s = hop.sender.reserve(
                hop.receiver.node_id, AUTH_KEY_BYTES, hop.vendor)
            msg = relay_encrypt(session_id, index, current, hop_key_s, auth_key_s)
            records.append(encode_relay_message(msg))
            hop_key_r = hop.receiver.reserve(
                hop.sender.node_id, length, hop.vendor)
            auth_key_r = hop.receiver.reserve(
                hop.sender.node_id, AUTH_KEY_BYTES, hop.vendor)
            current = relay_decrypt(msg, hop_key_r, auth_key_r)
        except InsufficientKeyError as exc:
            raise InsufficientKeyError(
                exc.available, exc.requested, hop=index, pool=hop.link_id
            ) from None
        except AuthFailureError as exc:
            raise AuthFailureError(str(exc), hop=index) from None
        accounting.append(HopAccounting(
            hop_index=index,
            link_id=hop.link_id,
            consumed_bytes_each_end=length + AUTH_KEY_BYTES,
        ))
    return DeliveryOutcome(
        session_id=session_id,
        chunk=current,
        hops=tuple(accounting),
        wire_records=tuple(records),
    )


def combine_streams(chunks: Sequence[KeyChunk]) -> KeyChunk:
    """XOR two or more equal-length chunks from distinct streams.

    Commutative and associative up to provenance ordering; combining a
    stream with itself is rejected because it would cancel the secret.
    """
    if len(chunks) < 2:
        raise LkmsError("combine_streams needs at least two chunks")
    length = len(chunks[0].data)
    tags = [c.stream_tag for c in chunks]
    if len(set(tags)) != len(tags):
        raise StreamTagError(f"duplicate stream tags: {sorted(tags)}")
    mixed = chunks[0].data
    for chunk in chunks[1:]:
        if len(chunk.data) != length:
            raise LengthMismatchError(
                f"combine length mismatch: {len(chunk.data)} != {length}"
            )
        mixed = kernels.xor_bytes(mixed, chunk.data)
    provenance = tuple(sorted(
        entry for chunk in chunks for entry in chunk.provenance
    ))
    ident = hashlib.blake2b(
        b"|".join(sorted(c.chunk_id.encode() for c in chunks)), digest_size=16
    ).hexdigest()
    return KeyChunk(
        chunk_id=ident,
        data=mixed,
        provenance=provenance,
        stream_tag="combined(" + ",".join(sorted(tags)) + ")",
    )
