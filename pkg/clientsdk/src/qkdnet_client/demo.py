"""Demo key consumers.

``encrypt``    moves a file between two applications: the master fetches
               service keys, encrypts the payload chunk-wise with AES-GCM
               (one fetched 32-byte key per chunk), and the slave fetches
               the same keys by ID, decrypts, and verifies the digest.
               This mirrors how hardware encryptors consume delivered
               keys; the cipher is deliberately off the shelf.

``rawfetch``   pulls index-aligned chunks of a raw-mode key stream from
               both endpoints and reports the empirical disagreement
               rate, the quantity an oblivious-key consumer cares about.

``transcript`` replays the scripted key-delivery round trip whose bytes
               are frozen in docs/api.md and records the exchange.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import sys
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .client import ClientSession, ServiceError, TranscriptRecorder

DEMO_CHUNK_BYTES = 65536
KEY_BYTES = 32


class DemoError(Exception):
    pass


def _nonce(index: int) -> bytes:
    return index.to_bytes(12, "little")


def encrypt_payload(master: ClientSession, payload: bytes,
                    chunk_bytes: int = DEMO_CHUNK_BYTES) -> dict:
    """Master side: fetch one key per chunk and build the transfer bundle."""
    nchunks = max(1, -(-len(payload) // chunk_bytes))
    keys = master.fetch_keys(number=nchunks, size=KEY_BYTES)
    chunks = []
    for index, (key_id, key) in enumerate(keys):
        plain = payload[index * chunk_bytes : (index + 1) * chunk_bytes]
        sealed = AESGCM(key).encrypt(_nonce(index), plain, key_id.encode())
        chunks.append({
            "key_ID": key_id,
            "ciphertext": base64.b64encode(sealed).decode("ascii"),
        })
    return {
        "chunk_bytes": chunk_bytes,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "chunks": chunks,
    }


def decrypt_bundle(slave: ClientSession, bundle: dict) -> bytes:
    """Slave side: fetch the named keys, decrypt, and verify the digest."""
    ids = [c["key_ID"] for c in bundle["chunks"]]
    keys = dict(slave.fetch_by_ids(ids))
    out = bytearray()
    for index, chunk in enumerate(bundle["chunks"]):
        key = keys[chunk["key_ID"]]
        sealed = base64.b64decode(chunk["ciphertext"])
        try:
            out += AESGCM(key).decrypt(
                _nonce(index), sealed, chunk["key_ID"].encode()
            )
        except InvalidTag:
            raise DemoError(
                f"authenticated decryption failed at chunk {index} "
                f"(wrong key material for key_ID {chunk['key_ID']})"
            ) from None
    digest = hashlib.sha256(bytes(out)).hexdigest()
    if digest != bundle["sha256"]:
        raise DemoError(
            f"digest mismatch: sent {bundle['sha256']}, received {digest}"
        )
    return bytes(out)


def demo_encrypt_channel(master: ClientSession, slave: ClientSession,
                         payload_path, chunk_bytes: int = DEMO_CHUNK_BYTES,
                         bundle_path=None) -> dict:
    """End-to-end verified transfer of a file between the two sessions."""
    payload = Path(payload_path).read_bytes()
    bundle = encrypt_payload(master, payload, chunk_bytes)
    if bundle_path is not None:
        Path(bundle_path).write_text(json.dumps(bundle, sort_keys=True))
        bundle = json.loads(Path(bundle_path).read_text())
    received = decrypt_bundle(slave, bundle)
    assert received == payload  # digest equality already proved this
    return {
        "payload_bytes": len(payload),
        "chunks": len(bundle["chunks"]),
        "sha256": bundle["sha256"],
        "verified": True,
    }


def demo_raw_fetch(service_url: str, app_a: str, app_b: str,
                   chunks: int = 64, min_bps: float = 4096.0,
                   advance: int = 0) -> dict:
    """Fetch a raw key stream at both ends and measure the disagreement."""
    side_a = ClientSession(service_url, app_a, app_b)
    side_b = ClientSession(service_url, app_b, app_a)
    stream = side_a.open_stream({"min_bps": min_bps, "mode": "raw"})
    if advance:
        side_a.advance(advance)
    bits = 0
    differing = 0
    for index in range(chunks):
        a = side_a.stream_get(stream, index)
        b = side_b.stream_get(stream, index)
        bits += 8 * len(a)
        differing += sum(bin(x ^ y).count("1") for x, y in zip(a, b))
    side_a.close_stream(stream)
    return {
        "chunks": chunks,
        "bits": bits,
        "disagreement": differing / bits if bits else 0.0,
    }


def conformance_transcript(service_url: str, master_id: str, slave_id: str,
                           record_path=None) -> TranscriptRecorder:
    """The scripted round trip whose bytes docs/api.md freezes."""
    recorder = TranscriptRecorder()
    master = ClientSession(service_url, master_id, slave_id, recorder=recorder)
    slave = ClientSession(service_url, slave_id, master_id, recorder=recorder)
    master.get_status()
    master.advance(10)
    keys = master.fetch_keys(number=2, size=32)
    fetched = slave.fetch_by_ids([key_id for key_id, _ in keys])
    if [k for _, k in fetched] != [k for _, k in keys]:
        raise DemoError("master and slave key bytes differ")
    master.get_status()
    if record_path is not None:
        recorder.save(record_path)
    return recorder


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qkdnet-demo")
    sub = parser.add_subparsers(dest="command", required=True)

    p_enc = sub.add_parser("encrypt", help="verified encrypted file transfer")
    p_enc.add_argument("--service", required=True, help="service base URL")
    p_enc.add_argument("--master", required=True)
    p_enc.add_argument("--slave", required=True)
    p_enc.add_argument("--file", required=True)
    p_enc.add_argument("--chunk-bytes", type=int, default=DEMO_CHUNK_BYTES)
    p_enc.add_argument("--bundle", default=None,
                       help="write the transfer bundle to this path")
    p_enc.add_argument("--record", default=None,
                       help="record the wire transcript to this path")
    p_enc.add_argument("--advance", type=int, default=0,
                       help="advance a manual-clock server before fetching")

    p_raw = sub.add_parser("rawfetch", help="raw-key disagreement probe")
    p_raw.add_argument("--service", required=True)
    p_raw.add_argument("--app-a", required=True)
    p_raw.add_argument("--app-b", required=True)
    p_raw.add_argument("--chunks", type=int, default=64)
    p_raw.add_argument("--min-bps", type=float, default=4096.0)
    p_raw.add_argument("--advance", type=int, default=0)

    p_tr = sub.add_parser("transcript", help="record the conformance round trip")
    p_tr.add_argument("--service", required=True)
    p_tr.add_argument("--master", required=True)
    p_tr.add_argument("--slave", required=True)
    p_tr.add_argument("--record", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "encrypt":
            recorder = TranscriptRecorder() if args.record else None
            master = ClientSession(args.service, args.master, args.slave,
                                   recorder=recorder)
            slave = ClientSession(args.service, args.slave, args.master,
                                  recorder=recorder)
            if args.advance:
                # touching status opens the pair session before time moves
                master.get_status()
                master.advance(args.advance)
            result = demo_encrypt_channel(
                master, slave, args.file, args.chunk_bytes, args.bundle
            )
            if recorder is not None:
                recorder.save(args.record)
            print(json.dumps(result, sort_keys=True))
        elif args.command == "rawfetch":
            result = demo_raw_fetch(
                args.service, args.app_a, args.app_b, args.chunks,
                args.min_bps, args.advance,
            )
            print(json.dumps(result, sort_keys=True))
        elif args.command == "transcript":
            conformance_transcript(
                args.service, args.master, args.slave, args.record
            )
            print(f"transcript written to {args.record}")
    except (DemoError, ServiceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
