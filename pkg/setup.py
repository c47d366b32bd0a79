import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "pointshell._kernels",
                ["src/pointshell/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                # no -ffast-math / -march=native: the compiled backend must be
                # bit-identical to the pure numpy one
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Cython unavailable: install the pure-Python package; the numpy kernel
    # twin is selected at import time.
    extensions = []

setup(ext_modules=extensions)
