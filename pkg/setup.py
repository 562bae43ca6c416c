import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3", "-fopenmp"]
if os.environ.get("STAIRNET_PORTABLE", "") in ("", "0"):
    compile_args.append("-march=native")

extensions = [
    Extension(
        "stairnet._kernels",
        ["src/stairnet/_kernels.pyx"],
        include_dirs=[np.get_include(), "src/stairnet"],
        extra_compile_args=compile_args,
        extra_link_args=["-fopenmp"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
