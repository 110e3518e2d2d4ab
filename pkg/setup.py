from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "defense_prefix._orient",
                ["src/defense_prefix/_orient.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: the numpy kernels in defense_prefix._orient_py are used.
    ext_modules = []

setup(ext_modules=ext_modules)
