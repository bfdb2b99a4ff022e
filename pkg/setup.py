"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile downgrades to a warning instead of
aborting the install. Set SDFYOLO_NO_EXT=1 to skip the extension entirely.
"""
import os
import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """build_ext that tolerates a missing/failing compiler."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001 - any build failure is non-fatal
            warnings.warn(f"sdfyolo: extension build failed ({exc}); "
                          "falling back to pure-numpy kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"sdfyolo: building {ext.name} failed ({exc}); "
                          "falling back to pure-numpy kernels")


ext_modules = []
cmdclass = {}
if os.environ.get("SDFYOLO_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [Extension(
                "sdfyolo._kernels",
                ["src/sdfyolo/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )],
            language_level="3",
        )
        cmdclass = {"build_ext": OptionalBuildExt}
    except ImportError:
        warnings.warn("sdfyolo: Cython/numpy unavailable at build time; "
                      "installing without the compiled kernels")

setup(ext_modules=ext_modules, cmdclass=cmdclass)
