"""Backend switch for the hot kernels.

Set ``MEANFIELD_CLT_NUMBA=0`` to force the pure-numpy path. The flag is read
once at import; numba is used only when it is importable.
"""

import os

_FALSE = {"0", "false", "no", "off"}


def _numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover
        return False
    return True


NUMBA_AVAILABLE = _numba_available()
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("MEANFIELD_CLT_NUMBA", "1").strip().lower() not in _FALSE


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
