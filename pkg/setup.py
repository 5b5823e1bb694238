"""Build hook for the optional Cython simulation kernel.

The package is pure Python except for the discrete-event loop in
``twoprice/_des_cy.pyx``.  If Cython or a C compiler is unavailable the
extension is skipped and the interpreted fallback in ``_des_py.py`` is
used at import time instead.
"""
from setuptools import setup

kwargs = {}
try:
    from Cython.Build import cythonize

    kwargs["ext_modules"] = cythonize(
        ["src/twoprice/_des_cy.pyx"],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"twoprice: building without compiled kernel ({exc})")

setup(**kwargs)
