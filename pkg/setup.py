"""Build the optional Cython kernels; the package still works without them."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("EMOGEN_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "emogen._kernels",
                    ["src/emogen/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffast-math"],
                    libraries=["mvec", "m"],
                    optional=True,
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
