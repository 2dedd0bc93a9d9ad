"""Key store accounting, hop relay, and stream combination."""

from __future__ import annotations

import random

import pytest

from qkdnet import lkms
from qkdnet.lkms import (
    AUTH_KEY_BYTES,
    AuthFailureError,
    DuplicateBlockError,
    ForeignBlockError,
    HopContext,
    InsufficientKeyError,
    KeyChunk,
    KeyStore,
    LengthMismatchError,
    ReusedKeyError,
    StreamTagError,
    combine_streams,
    decode_relay_message,
    encode_relay_message,
    forward_key,
    relay_decrypt,
    relay_encrypt,
)
from qkdnet.qkdsim import KeyBlock

SESSION = bytes(range(16))


def block(block_id="b1", link="l-ab", data=b"\xaa" * 100, created=0,
          vendor="v1", mode="distilled"):
    return KeyBlock(
        block_id=block_id, link_id=link, vendor=vendor,
        stream_tag=link, data=data, created_at=created, mode=mode,
    )


def paired_stores(link="l-ab", a="A", b="B"):
    store_a = KeyStore(a)
    store_b = KeyStore(b)
    store_a.register_link(link, b)
    store_b.register_link(link, a)
    return store_a, store_b


def fill_link(store_a, store_b, link="l-ab", nbytes=4096, vendor="v1",
              created=0, seed=1):
    rng = random.Random(seed)
    data = rng.randbytes(nbytes)
    store_a.ingest(block(f"blk-{link}-{created}", link, data, created, vendor))
    store_b.ingest(block(f"blk-{link}-{created}", link, data, created, vendor))


def chunk(data, tag="t0", cid="c0"):
    return KeyChunk(chunk_id=cid, data=data,
                    provenance=(("blk", 0, len(data)),), stream_tag=tag)


# ---------------------------------------------------------------------------
# store basics


def test_ingest_lands_in_peer_vendor_mode_pool():
    store_a, store_b = paired_stores()
    store_a.ingest(block())
    assert store_a.available_bytes("B", "v1") == 100
    assert store_a.available_bytes("B", "v2") == 0
    assert store_a.available_bytes("C") == 0


def test_ingest_foreign_block_rejected():
    store_a, _ = paired_stores()
    with pytest.raises(ForeignBlockError):
        store_a.ingest(block(link="l-xy"))


def test_ingest_duplicate_id_rejected():
    store_a, _ = paired_stores()
    store_a.ingest(block())
    with pytest.raises(DuplicateBlockError):
        store_a.ingest(block())


def test_raw_blocks_pool_separately():
    store_a, _ = paired_stores()
    store_a.ingest(block(block_id="d1", mode="distilled"))
    store_a.ingest(block(block_id="r1", mode="raw"))
    assert store_a.available_bytes("B", mode="distilled") == 100
    assert store_a.available_bytes("B", mode="raw") == 100


def test_reserve_partial_block():
    store_a, _ = paired_stores()
    store_a.ingest(block())
    piece = store_a.reserve("B", 40)
    assert len(piece.data) == 40
    assert store_a.available_bytes("B") == 60
    assert piece.provenance == (("l-ab/b1", 0, 40),)
    again = store_a.reserve("B", 60)
    assert again.provenance == (("l-ab/b1", 40, 100),)
    store_a.audit()


def test_reserve_zero_rejected():
    store_a, _ = paired_stores()
    store_a.ingest(block())
    with pytest.raises(lkms.LkmsError, match="length"):
        store_a.reserve("B", 0)


def test_reserve_insufficient_names_amounts():
    store_a, _ = paired_stores()
    store_a.ingest(block())
    with pytest.raises(InsufficientKeyError, match="100 < requested 150"):
        store_a.reserve("B", 150)
    # failed reservation must not consume anything
    assert store_a.available_bytes("B") == 100
    store_a.audit()


def test_fifo_order_across_blocks_and_vendor_pools():
    store_a, store_b = paired_stores()
    store_a.register_link("l-ab2", "B")
    store_a.ingest(block("b-late", "l-ab", b"\x22" * 4, created=5, vendor="v1"))
    store_a.ingest(block("b-early", "l-ab2", b"\x11" * 4, created=1, vendor="v2"))
    piece = store_a.reserve("B", 6)
    assert piece.data == b"\x11" * 4 + b"\x22" * 2


def test_vendor_filter():
    store_a, _ = paired_stores()
    store_a.register_link("l-ab2", "B")
    store_a.ingest(block("b1", "l-ab", b"\x11" * 8, vendor="v1"))
    store_a.ingest(block("b2", "l-ab2", b"\x22" * 8, vendor="v2"))
    piece = store_a.reserve("B", 8, vendor="v2")
    assert piece.data == b"\x22" * 8


def test_conservation_counters():
    store_a, _ = paired_stores()
    store_a.ingest(block("b1", data=b"\x01" * 64))
    store_a.ingest(block("b2", data=b"\x02" * 64))
    store_a.reserve("B", 100)
    ingested, consumed, available = store_a.audit()
    assert (ingested, consumed, available) == (128, 100, 28)


# ---------------------------------------------------------------------------
# relay primitives


def test_vernam_self_inverse():
    payload = chunk(b"\xff" * 32)
    key = chunk(b"\xff" * 32, tag="k", cid="k0")
    auth = chunk(bytes(32), tag="a", cid="a0")
    msg = relay_encrypt(SESSION, 0, payload, key, auth)
    assert msg.ciphertext == bytes(32)


def test_zero_key_is_identity():
    payload = chunk(bytes(range(48)))
    key = chunk(bytes(48), tag="k")
    auth = chunk(bytes(32), tag="a")
    msg = relay_encrypt(SESSION, 3, payload, key, auth)
    assert msg.ciphertext == payload.data


def test_encrypt_decrypt_roundtrip_random():
    rng = random.Random(3)
    data = rng.randbytes(64)
    key_bytes = rng.randbytes(64)
    auth_bytes = rng.randbytes(32)
    msg = relay_encrypt(SESSION, 1, chunk(data),
                        chunk(key_bytes, "k1"), chunk(auth_bytes, "a1"))
    out = relay_decrypt(msg, chunk(key_bytes, "k2"), chunk(auth_bytes, "a2"))
    assert out.data == data


def test_length_mismatches_rejected():
    with pytest.raises(LengthMismatchError):
        relay_encrypt(SESSION, 0, chunk(bytes(32)), chunk(bytes(31), "k"),
                      chunk(bytes(32), "a"))
    with pytest.raises(LengthMismatchError):
        relay_encrypt(SESSION, 0, chunk(bytes(32)), chunk(bytes(32), "k"),
                      chunk(bytes(16), "a"))


def test_key_reuse_rejected():
    key = chunk(bytes(32), "k")
    auth = chunk(bytes(32), "a")
    relay_encrypt(SESSION, 0, chunk(bytes(32)), key, auth)
    with pytest.raises(ReusedKeyError):
        relay_encrypt(SESSION, 0, chunk(bytes(32)), key, chunk(bytes(32), "a2"))


def test_flipped_ciphertext_bit_fails_auth():
    rng = random.Random(4)
    key_bytes = rng.randbytes(40)
    auth_bytes = rng.randbytes(32)
    msg = relay_encrypt(SESSION, 2, chunk(rng.randbytes(40)),
                        chunk(key_bytes, "k"), chunk(auth_bytes, "a"))
    hacked = lkms.RelayMessage(
        session_id=msg.session_id,
        hop_index=msg.hop_index,
        ciphertext=bytes([msg.ciphertext[0] ^ 0x80]) + msg.ciphertext[1:],
        tag=msg.tag,
        key_ref=msg.key_ref,
    )
    with pytest.raises(AuthFailureError, match="auth_failure"):
        relay_decrypt(hacked, chunk(key_bytes, "k2"), chunk(auth_bytes, "a2"))


def test_desynchronised_fifo_offset_fails_auth():
    store_a, store_b = paired_stores()
    fill_link(store_a, store_b, nbytes=256)
    # receiver burns one byte out of turn; its FIFO cursor now lags
    store_b.reserve("A", 1)
    payload = chunk(b"\x5a" * 32, tag="payload")
    key_s = store_a.reserve("B", 32)
    auth_s = store_a.reserve("B", AUTH_KEY_BYTES)
    msg = relay_encrypt(SESSION, 0, payload, key_s, auth_s)
    key_r = store_b.reserve("A", 32)
    auth_r = store_b.reserve("A", AUTH_KEY_BYTES)
    with pytest.raises(AuthFailureError):
        relay_decrypt(msg, key_r, auth_r)


def test_wire_format_roundtrip_and_layout():
    msg = lkms.RelayMessage(
        session_id=SESSION, hop_index=513,
        ciphertext=b"\x01\x02\x03", tag=bytes(range(16)), key_ref="",
    )
    raw = encode_relay_message(msg)
    # u32 length prefix covers 16 + 2 + 4 + 3 + 16 bytes
    assert raw[:4] == (41).to_bytes(4, "little")
    assert raw[4:20] == SESSION
    assert raw[20:22] == (513).to_bytes(2, "little")
    assert raw[22:26] == (3).to_bytes(4, "little")
    decoded, end = decode_relay_message(raw)
    assert end == len(raw)
    assert decoded.ciphertext == msg.ciphertext
    assert decoded.tag == msg.tag
    assert decoded.hop_index == 513


# ---------------------------------------------------------------------------
# forwarding


def chain_stores(n_nodes, nbytes=8192):
    names = [chr(ord("A") + i) for i in range(n_nodes)]
    stores = {name: KeyStore(name) for name in names}
    hops = []
    for a, b in zip(names, names[1:]):
        link = f"l-{a}{b}"
        stores[a].register_link(link, b)
        stores[b].register_link(link, a)
        fill_link(stores[a], stores[b], link, nbytes=nbytes,
                  seed=hash((a, b)) & 0xFFFF)
        hops.append(HopContext(
            sender=stores[a], receiver=stores[b], vendor=None, link_id=link,
        ))
    return stores, hops


def test_forward_single_hop_delivers_payload():
    stores, hops = chain_stores(2)
    payload = chunk(b"\x42" * 64, tag="end-key")
    outcome = forward_key(SESSION, hops, payload)
    assert outcome.chunk.data == payload.data
    assert len(outcome.wire_records) == 1


def test_forward_four_hops_consumption_audit():
    stores, hops = chain_stores(5)
    payload = chunk(random.Random(9).randbytes(128), tag="end-key")
    before = {n: s.consumed_bytes for n, s in stores.items()}
    outcome = forward_key(SESSION, hops, payload)
    assert outcome.chunk.data == payload.data
    per_hop = 128 + AUTH_KEY_BYTES
    assert all(h.consumed_bytes_each_end == per_hop for h in outcome.hops)
    # interior nodes touch two hops, end nodes one
    deltas = {
        n: stores[n].consumed_bytes - before[n] for n in stores
    }
    assert deltas == {"A": per_hop, "B": 2 * per_hop, "C": 2 * per_hop,
                      "D": 2 * per_hop, "E": per_hop}
    for store in stores.values():
        store.audit()


def test_forward_midpath_shortage_names_hop():
    stores, hops = chain_stores(4, nbytes=512)
    # drain the C-D link pool below what hop 2 needs
    stores["C"].reserve("D", 500)
    stores["D"].reserve("C", 500)
    payload = chunk(bytes(64), tag="end-key")
    with pytest.raises(InsufficientKeyError, match="hop 2"):
        forward_key(SESSION, hops, payload)
    for store in stores.values():
        store.audit()  # burned key stays burned, books still balance


# ---------------------------------------------------------------------------
# combination


def test_combine_identity_and_commutativity():
    a = chunk(random.Random(1).randbytes(32), tag="s1", cid="ca")
    zero = chunk(bytes(32), tag="s2", cid="cz")
    combined = combine_streams([a, zero])
    assert combined.data == a.data
    forward = combine_streams([a, zero])
    backward = combine_streams([zero, a])
    assert forward.data == backward.data
    assert forward.stream_tag == backward.stream_tag == "combined(s1,s2)"
    assert forward.provenance == backward.provenance


def test_combine_associative():
    rng = random.Random(2)
    a = chunk(rng.randbytes(16), tag="s1", cid="a")
    b = chunk(rng.randbytes(16), tag="s2", cid="b")
    c = chunk(rng.randbytes(16), tag="s3", cid="c")
    left = combine_streams([combine_streams([a, b]), c])
    right = combine_streams([a, combine_streams([b, c])])
    assert left.data == right.data


def test_combine_rejects_duplicate_tags_and_bad_lengths():
    a = chunk(bytes(16), tag="s1")
    b = chunk(bytes(16), tag="s1")
    with pytest.raises(StreamTagError):
        combine_streams([a, b])
    c = chunk(bytes(8), tag="s2")
    with pytest.raises(LengthMismatchError):
        combine_streams([a, c])
    with pytest.raises(lkms.LkmsError):
        combine_streams([a])


# ---------------------------------------------------------------------------
# randomized discipline audit


def test_one_time_pad_discipline_random_ops():
    rng = random.Random(20_24)
    stores, hops = chain_stores(4, nbytes=64)
    links = [h.link_id for h in hops]
    node_of = {h.link_id: (h.sender, h.receiver) for h in hops}
    counter = 0
    for step_no in range(2000):
        action = rng.random()
        link = rng.choice(links)
        sender, receiver = node_of[link]
        if action < 0.55:
            data = rng.randbytes(rng.randrange(16, 128))
            counter += 1
            for store in (sender, receiver):
                store.ingest(KeyBlock(
                    block_id=f"r{counter}", link_id=link, vendor="v1",
                    stream_tag=link, data=data, created_at=step_no,
                    mode="distilled",
                ))
        elif action < 0.8:
            # paired consumption keeps the hop aligned; occasionally only one
            # side reserves, which later surfaces as an auth failure
            want = rng.randrange(1, 96)
            try:
                sender.reserve(receiver.node_id, want)
                if rng.random() < 0.9:
                    receiver.reserve(sender.node_id, want)
            except InsufficientKeyError:
                pass
        else:
            payload = chunk(rng.randbytes(rng.randrange(1, 64)),
                            tag=f"p{step_no}")
            try:
                forward_key(SESSION, hops, payload)
            except (InsufficientKeyError, AuthFailureError):
                pass  # shortage and injected desync are expected events
        if step_no % 50 == 0:
            for hop in hops:
                hop.sender.audit()
                hop.receiver.audit()
    for hop in hops:
        hop.sender.audit()
        hop.receiver.audit()


def test_forwarding_is_vendor_agnostic():
    stores = {n: KeyStore(n) for n in "ABC"}
    hops = []
    for (a, b), vendor in ((("A", "B"), "vend-one"), (("B", "C"), "vend-two")):
        link = f"l-{a}{b}"
        stores[a].register_link(link, b)
        stores[b].register_link(link, a)
        data = random.Random(hash(vendor) & 0xFFFF).randbytes(512)
        for end in (a, b):
            stores[end].ingest(KeyBlock(
                block_id=f"{link}-0", link_id=link, vendor=vendor,
                stream_tag=link, data=data, created_at=0, mode="distilled",
            ))
        hops.append(HopContext(sender=stores[a], receiver=stores[b],
                               vendor=vendor, link_id=link))
    payload = chunk(b"\x77" * 100, tag="end-key")
    outcome = forward_key(SESSION, hops, payload)
    assert outcome.chunk.data == payload.data
    # the delivery record names links and byte counts, never vendors
    for acct in outcome.hops:
        assert not hasattr(acct, "vendor")
