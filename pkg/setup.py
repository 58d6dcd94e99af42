"""Build the optional Cython kernels.

The package imports without them; ``assetpricing.kernels`` falls back to
the numpy implementations in ``_kernels_py`` when the extension is absent.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install
    cythonize = None

extensions = [
    Extension(
        "assetpricing._kernels",
        ["src/assetpricing/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=(
        cythonize(extensions, compiler_directives={"language_level": "3"})
        if cythonize is not None
        else []
    ),
)
