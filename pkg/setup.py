import ctypes.util

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# any library exporting the Fortran dgemm_/dgemv_ symbols works
blas = "openblas" if ctypes.util.find_library("openblas") else "blas"

ext = Extension(
    "taxdqn._core",
    ["src/taxdqn/_core.pyx"],
    include_dirs=[np.get_include()],
    libraries=[blas],
    extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    optional=True,
)

setup(ext_modules=cythonize([ext], language_level=3))
