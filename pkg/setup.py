"""Build the optional compiled contraction kernels.

The package works without them: ``coca_lab.kernels`` falls back to a numpy
implementation when the extension is missing. Set ``COCA_LAB_NO_EXT=1`` to
skip compilation entirely.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if not os.environ.get("COCA_LAB_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # pragma: no cover
        print("Cython/numpy unavailable; building pure-Python package", file=sys.stderr)
    else:
        openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
        ext_modules = cythonize(
            [
                Extension(
                    "coca_lab.kernels._fused",
                    ["src/coca_lab/kernels/_fused.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"] + openmp,
                    extra_link_args=openmp,
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
