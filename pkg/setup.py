import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("TGCIMPUTE_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [Extension("tgcimpute._ckernels", ["src/tgcimpute/_ckernels.pyx"])],
            language_level="3",
        )
    except ImportError:
        # No Cython available: install the pure-Python fallback only.
        ext_modules = []

setup(ext_modules=ext_modules)
