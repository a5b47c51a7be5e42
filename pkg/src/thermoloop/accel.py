"""Optional numba acceleration for the hot numeric kernels.

Every kernel is written in plain NumPy-compatible style; when numba is
available and enabled the kernel is nopython-compiled, otherwise the very
same function runs uncompiled. Set ``THERMOLOOP_NUMBA=0`` to force the pure
NumPy fallback path (read once at import time).
"""

import os

_flag = os.environ.get("THERMOLOOP_NUMBA", "1").strip().lower()
NUMBA_ENABLED = _flag not in ("0", "false", "off", "no")

if NUMBA_ENABLED:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


def jit_kernel(func):
    """Compile ``func`` with ``numba.njit`` when enabled, else return it as-is."""
    if NUMBA_ENABLED:
        return numba.njit(cache=True)(func)
    return func


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
