import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; mpapkit falls back at import
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("MPAPKIT_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "mpapkit._kernels",
                ["src/mpapkit/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: keeps results bit-identical to the fallback
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
