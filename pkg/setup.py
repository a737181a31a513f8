"""Build script for the optional compiled kernel extension.

The package works without the extension (pure numpy fallbacks are selected
at import time); building it just makes the eigensolver and patch-extraction
hot loops much faster. If Cython or a C compiler is unavailable the install
proceeds without the extension.
"""

import sys

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dpkfac._kernels._fast",
                ["src/dpkfac/_kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    sys.stderr.write(
        "dpkfac: compiled kernels skipped (%s); pure-python fallback will be used\n" % exc
    )

setup(ext_modules=ext_modules)
