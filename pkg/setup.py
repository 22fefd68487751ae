"""Build script for the optional compiled codec core.

The extension accelerates the stream-frame hot path (header pack/scan and
the 64-bit state hash). It is optional: if no compiler or Cython is
available the install still succeeds and appshare.wire falls back to the
pure-Python kernels at import time.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "appshare._wirecore",
                ["src/appshare/_wirecore.pyx"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
