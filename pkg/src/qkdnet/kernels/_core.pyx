# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Must stay bit-for-bit equal to purepy.py."""

from libc.stdint cimport uint8_t, uint64_t
from cpython.bytes cimport PyBytes_FromStringAndSize

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15U


cdef inline uint64_t c_mix64(uint64_t x) nogil:
    x ^= x >> 30
    x *= 0xBF58476D1CE4E5B9U
    x ^= x >> 27
    x *= 0x94D049BB133111EBU
    x ^= x >> 31
    return x


cdef inline uint64_t c_draw(uint64_t seed, uint64_t index) nogil:
    return c_mix64(seed + (index + 1) * GOLDEN)


def mix64(x):
    return c_mix64(<uint64_t> (x & 0xFFFFFFFFFFFFFFFF))


def draw(seed, index):
    return c_draw(<uint64_t> (seed & 0xFFFFFFFFFFFFFFFF), <uint64_t> index)


def fill_keystream(seed, counter, nbytes):
    if nbytes < 0:
        raise ValueError("nbytes must be >= 0")
    cdef uint64_t s = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t c = <uint64_t> counter
    cdef Py_ssize_t n = <Py_ssize_t> nbytes
    out = PyBytes_FromStringAndSize(NULL, n)
    cdef uint8_t* buf = <uint8_t*> (<char*> out)
    cdef Py_ssize_t i = 0
    cdef uint64_t k = 0
    cdef uint64_t v
    cdef int j
    while i < n:
        v = c_draw(s, c + k)
        j = 0
        while j < 8 and i < n:
            buf[i] = <uint8_t> (v & 0xFF)
            v >>= 8
            i += 1
            j += 1
        k += 1
    return out


def xor_bytes(a, b):
    cdef const uint8_t[:] av = a
    cdef const uint8_t[:] bv = b
    cdef Py_ssize_t n = av.shape[0]
    if n != bv.shape[0]:
        raise ValueError(f"length mismatch: {av.shape[0]} != {bv.shape[0]}")
    out = PyBytes_FromStringAndSize(NULL, n)
    cdef uint8_t* buf = <uint8_t*> (<char*> out)
    cdef Py_ssize_t i
    for i in range(n):
        buf[i] = av[i] ^ bv[i]
    return out


cdef struct U128:
    uint64_t lo
    uint64_t hi


cdef inline U128 gf_mul_128(uint64_t a_lo, uint64_t a_hi,
                            uint64_t b_lo, uint64_t b_hi) nogil:
    # Carryless multiply mod x^128 + x^7 + x^2 + x + 1, LSB-first.
    cdef U128 r
    r.lo = 0
    r.hi = 0
    cdef uint64_t carry
    cdef int i
    for i in range(128):
        if i < 64:
            if (b_lo >> i) & 1U:
                r.lo ^= a_lo
                r.hi ^= a_hi
        else:
            if (b_hi >> (i - 64)) & 1U:
                r.lo ^= a_lo
                r.hi ^= a_hi
        carry = a_hi >> 63
        a_hi = (a_hi << 1) | (a_lo >> 63)
        a_lo = a_lo << 1
        if carry:
            a_lo ^= 0x87U
    return r


cdef inline uint64_t load_le64(const uint8_t* p) nogil:
    cdef uint64_t v = 0
    cdef int i
    for i in range(8):
        v |= (<uint64_t> p[i]) << (8 * i)
    return v


def poly_mac(key, data):
    if len(key) != 32:
        raise ValueError("poly_mac key must be 32 bytes")
    cdef const uint8_t[:] kv = key
    cdef const uint8_t[:] dv = data
    cdef uint64_t h_lo = load_le64(&kv[0])
    cdef uint64_t h_hi = load_le64(&kv[8])
    cdef uint64_t s_lo = load_le64(&kv[16])
    cdef uint64_t s_hi = load_le64(&kv[24])
    cdef uint64_t acc_lo = 0, acc_hi = 0
    cdef Py_ssize_t n = dv.shape[0]
    cdef Py_ssize_t i = 0
    cdef uint8_t block[16]
    cdef int j
    cdef U128 r
    while i < n:
        for j in range(16):
            if i + j < n:
                block[j] = dv[i + j]
            else:
                block[j] = 0
        acc_lo ^= load_le64(&block[0])
        acc_hi ^= load_le64(&block[8])
        r = gf_mul_128(acc_lo, acc_hi, h_lo, h_hi)
        acc_lo = r.lo
        acc_hi = r.hi
        i += 16
    acc_lo ^= <uint64_t> (8 * n)
    r = gf_mul_128(acc_lo, acc_hi, h_lo, h_hi)
    acc_lo = r.lo ^ s_lo
    acc_hi = r.hi ^ s_hi
    out = PyBytes_FromStringAndSize(NULL, 16)
    cdef uint8_t* buf = <uint8_t*> (<char*> out)
    for j in range(8):
        buf[j] = <uint8_t> ((acc_lo >> (8 * j)) & 0xFF)
        buf[8 + j] = <uint8_t> ((acc_hi >> (8 * j)) & 0xFF)
    return out


def corrupt_bits(data, flip_threshold, seed):
    if not 0 <= flip_threshold <= (1 << 64):
        raise ValueError("flip_threshold out of range")
    cdef const uint8_t[:] dv = data
    cdef Py_ssize_t n = dv.shape[0]
    cdef uint64_t s = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    # threshold == 2^64 means "always flip"; fold into a flag since the
    # comparison value itself must stay a uint64.
    cdef bint always = flip_threshold == (1 << 64)
    cdef uint64_t thr = 0 if always else <uint64_t> flip_threshold
    out = PyBytes_FromStringAndSize(NULL, n)
    cdef uint8_t* buf = <uint8_t*> (<char*> out)
    cdef Py_ssize_t i
    cdef uint64_t k = 0
    cdef int bit
    cdef uint8_t flips
    for i in range(n):
        flips = 0
        for bit in range(8):
            if always or c_draw(s, k) < thr:
                flips |= <uint8_t> (1 << bit)
            k += 1
        buf[i] = dv[i] ^ flips
    return out
