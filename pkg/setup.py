"""Build script for the optional compiled raster kernels.

The package works without the extension (a NumPy fallback is selected at
import time); building it just makes pose rasterization faster.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "sparsepose.raster._kernels",
                ["src/sparsepose/raster/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # -ffp-contract=off keeps the compiled kernels bit-identical
                # to the NumPy fallback (no fused multiply-add contraction).
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
