import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CTCS_NO_EXTENSION"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("ctcs._ckernels", ["src/ctcs/_ckernels.pyx"], extra_compile_args=["-O3"])],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
