"""Pure-Python reference implementation of the byte-level kernels.

These four routines sit on the hot path of every simulated link: producing
key material, one-time-pad mixing, tag computation for hop authentication,
and per-bit error injection for raw-mode links. The compiled backend in
``_core.pyx`` must produce bitwise-identical output; parity is enforced by
tests, so any change here is a format change for the whole simulator.

Keystream definition: output block ``k`` is ``mix64(seed + (counter+k+1) *
GOLDEN) mod 2**64`` serialized little-endian, i.e. a counter-mode splitmix64
sequence. It is seekable, deterministic, and platform-independent. It is a
simulation generator, not a cryptographic one.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_GF_HI = 1 << 128
_GF_POLY = 0x87  # x^128 folds to x^7 + x^2 + x + 1
_MASK128 = (1 << 128) - 1


def mix64(x: int) -> int:
    x &= MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


def draw(seed: int, index: int) -> int:
    """The index-th 64-bit value of the stream keyed by seed."""
    return mix64((seed + ((index + 1) * GOLDEN)) & MASK64)


def fill_keystream(seed: int, counter: int, nbytes: int) -> bytes:
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    out = bytearray()
    nblocks = (nbytes + 7) // 8
    for k in range(nblocks):
        out += draw(seed, counter + k).to_bytes(8, "little")
    return bytes(out[:nbytes])


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} != {len(b)}")
    return (
        int.from_bytes(a, "little") ^ int.from_bytes(b, "little")
    ).to_bytes(len(a), "little")


def _gf_mul(a: int, b: int) -> int:
    r = 0
    for _ in range(128):
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & _GF_HI:
            a = (a & _MASK128) ^ _GF_POLY
    return r


def poly_mac(key: bytes, data: bytes) -> bytes:
    """16-byte tag of a one-time polynomial MAC over GF(2^128).

    The 32-byte key splits into a point H (first half) and a mask S
    (second half). The message is absorbed in zero-padded 16-byte blocks
    followed by a bit-length block, and the mask is XORed last. Both key
    halves are single-use by contract; reuse is prevented by the caller's
    key accounting, not here.
    """
    if len(key) != 32:
        raise ValueError("poly_mac key must be 32 bytes")
    h = int.from_bytes(key[:16], "little")
    s = int.from_bytes(key[16:32], "little")
    acc = 0
    for i in range(0, len(data), 16):
        block = data[i : i + 16]
        if len(block) < 16:
            block = block + b"\x00" * (16 - len(block))
        acc = _gf_mul(acc ^ int.from_bytes(block, "little"), h)
    acc = _gf_mul(acc ^ (8 * len(data)), h)
    return (acc ^ s).to_bytes(16, "little")


def corrupt_bits(data: bytes, flip_threshold: int, seed: int) -> bytes:
    """Flip each bit independently: bit k flips iff draw(seed, k) < threshold.

    flip_threshold is the flip probability scaled to [0, 2^64].
    """
    if not 0 <= flip_threshold <= (1 << 64):
        raise ValueError("flip_threshold out of range")
    out = bytearray(data)
    k = 0
    for i in range(len(out)):
        flips = 0
        for bit in range(8):
            if draw(seed, k) < flip_threshold:
                flips |= 1 << bit
            k += 1
        out[i] ^= flips
    return bytes(out)
