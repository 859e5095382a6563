"""Build script: compiles the fast kernel extension when Cython is available.

The package is fully functional without the extension; ``newstrend.kernels``
falls back to the numpy implementation at import time.  Set NEWSTREND_NO_EXT=1
to force a pure-Python build.
"""

import os

from setuptools import Extension, setup

PYX = "src/newstrend/kernels/_core.pyx"

ext_modules = []
if not os.environ.get("NEWSTREND_NO_EXT") and os.path.exists(PYX):
    try:
        from Cython.Build import cythonize

        ext = Extension(
            "newstrend.kernels._core",
            [PYX],
            extra_compile_args=["-O3"],
            
        )
        ext_modules = cythonize(
            [ext],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
