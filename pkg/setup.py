"""Build script: compiles the optional Cython channel-synthesis kernel.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so a failed compile is not fatal.
"""
from setuptools import setup

ext_modules = None
include_dirs = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [Extension("beamweaver._kernels._ray_sum",
                   ["src/beamweaver/_kernels/_ray_sum.pyx"],
                   include_dirs=[numpy.get_include()],
                   # no FMA contraction: keeps the kernel's rounding aligned
                   # with the NumPy fallback (ulp-level agreement)
                   extra_compile_args=["-ffp-contract=off"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
