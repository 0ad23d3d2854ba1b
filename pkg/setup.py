import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("PEGEQAT_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "pegeqat._kernels",
                ["src/pegeqat/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
