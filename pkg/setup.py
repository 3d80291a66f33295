import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

# The compiled kernels are optional: the package falls back to the pure
# numpy implementations in nielab._pykernels when the extension is missing.
extensions = [
    Extension(
        "nielab._ckernels",
        ["src/nielab/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
