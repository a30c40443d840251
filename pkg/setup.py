import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("COSTEPS_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "costeps.tensor._ckernels",
                    ["src/costeps/tensor/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native", "-fno-math-errno", "-fno-trapping-math", "-ffast-math"],
                    extra_link_args=["-lmvec", "-lm"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
