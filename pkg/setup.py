"""Build script: compiles the optional Cython convolution core.

The package works without the extension (a numpy fallback is selected at
import time), so a failed or skipped extension build must not fail the
install. Set INTERSTYLE_NO_EXT=1 to skip the extension entirely.
"""

import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """build_ext that degrades to the pure-python backend on failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, openmp absent, ...
            print(f"warning: skipping compiled kernels ({exc}); "
                  "falling back to numpy backend", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  "falling back to numpy backend", file=sys.stderr)


def extensions():
    if os.environ.get("INTERSTYLE_NO_EXT") == "1":
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "interstyle._kernels._conv_cy",
        sources=["src/interstyle/_kernels/_conv_cy.pyx"],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
