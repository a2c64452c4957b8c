import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("HFMF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "hfmf._kernels",
                    ["src/hfmf/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython: the package runs on the numpy fallback
        ext_modules = []

setup(ext_modules=ext_modules)
