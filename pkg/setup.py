import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "reidgate.kernels._lstm_cy",
                ["src/reidgate/kernels/_lstm_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Pure-python kernel backend is selected at import time when the
    # extension is unavailable.
    ext_modules = []

setup(ext_modules=ext_modules)
