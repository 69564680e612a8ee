import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Compiled hot kernels; the package falls back to the pure-numpy backend in
# crosslayer/_kernels/core_py.py when this extension is unavailable.
ext = Extension(
    "crosslayer._kernels.core_cy",
    ["src/crosslayer/_kernels/core_cy.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3))
