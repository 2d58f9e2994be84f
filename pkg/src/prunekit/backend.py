"""Kernel backend selection.

The hot numeric kernels (convolution, dense matmul, pooling) exist twice:
a numba-compiled implementation and a pure-numpy fallback with identical
semantics. The active backend is chosen once at import time from the
``PRUNEKIT_BACKEND`` environment variable:

* ``auto`` (default): numba if it imports, numpy otherwise
* ``numba``: require numba, fail loudly if unavailable
* ``numpy``: force the pure-numpy fallback
"""

import os

ENV_VAR = "PRUNEKIT_BACKEND"
_VALID = ("auto", "numba", "numpy")


def resolve_backend() -> str:
    """Return 'numba' or 'numpy' according to the environment."""
    choice = os.environ.get(ENV_VAR, "auto").strip().lower() or "auto"
    if choice not in _VALID:
        raise ValueError(
            f"{ENV_VAR}={choice!r} is not valid; expected one of {_VALID}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise ImportError(
                f"{ENV_VAR}=numba but numba is not importable in this environment"
            )
        return "numpy"
    return "numba"
