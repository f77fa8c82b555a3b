import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

DIRECTIVES = {
    "language_level": "3",
    "boundscheck": False,
    "wraparound": False,
    "cdivision": True,
}

ext_modules = []
if cythonize is not None and not os.environ.get("MCSEG_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "mcseg._convkernels",
                sources=["src/mcseg/_convkernels.pyx"],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives=DIRECTIVES,
    )

setup(
    ext_modules=ext_modules,
    include_dirs=[np.get_include()],
)
