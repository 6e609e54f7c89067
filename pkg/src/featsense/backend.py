"""Kernel backend selection.

Set FEATSENSE_BACKEND=numpy to force the pure-numpy kernels,
FEATSENSE_BACKEND=numba to require the JIT kernels; default is numba when
importable. Both backends produce bit-identical volumes.
"""

import os

_requested = os.environ.get("FEATSENSE_BACKEND", "auto").lower()

if _requested == "numpy":
    USE_NUMBA = False
elif _requested == "numba":
    import numba  # noqa: F401
    USE_NUMBA = True
elif _requested == "auto":
    try:
        import numba  # noqa: F401
        USE_NUMBA = True
    except ImportError:
        USE_NUMBA = False
else:
    raise ValueError(f"FEATSENSE_BACKEND={_requested!r} "
                     "(expected auto, numba or numpy)")

BACKEND = "numba" if USE_NUMBA else "numpy"
