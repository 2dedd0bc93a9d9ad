"""Build hook for the optional compiled kernel extension.

The package works without the extension (a pure-Python backend is selected
at import time), so a failed build is downgraded to a warning. Set
QKDNET_NO_EXT=1 to skip the compile step entirely.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("QKDNET_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "qkdnet.kernels._core",
                    ["src/qkdnet/kernels/_core.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level="3",
        )
    except ImportError as exc:
        print(f"qkdnet: skipping compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
