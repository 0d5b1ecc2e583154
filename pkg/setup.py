import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; widthlab.optim falls back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "widthlab.optim._adam_kernel",
                ["src/widthlab/optim/_adam_kernel.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
