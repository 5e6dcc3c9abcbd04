"""Builds the optional compiled kernel; the package falls back to numpy without it."""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext

ext_modules = []
if os.environ.get("SAFEREALIGN_NO_EXT", "") not in ("1", "true"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "saferealign._kernels",
                    ["src/saferealign/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled kernels not built ({exc}); using the numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: could not build {ext.name} ({exc}); using the numpy fallback")


setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
