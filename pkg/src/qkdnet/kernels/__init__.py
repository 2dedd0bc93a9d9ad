"""Byte-level kernels with a compiled fast path.

The compiled extension is optional: if it is missing (or the environment
variable ``QKDNET_PURE_PYTHON=1`` is set) the pure-Python reference
implementation is used instead. Both backends are bit-for-bit identical,
so simulation output never depends on which one is loaded.
"""

from __future__ import annotations

import os

from . import purepy

_impl = purepy
BACKEND = "purepy"

if os.environ.get("QKDNET_PURE_PYTHON") != "1":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

GOLDEN = purepy.GOLDEN
MASK64 = purepy.MASK64

mix64 = _impl.mix64
draw = _impl.draw
fill_keystream = _impl.fill_keystream
xor_bytes = _impl.xor_bytes
poly_mac = _impl.poly_mac
corrupt_bits = _impl.corrupt_bits


def backend_name() -> str:
    return BACKEND
