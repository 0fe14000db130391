"""Optional numba acceleration.

Kernels in :mod:`relayrank.kernels` are written twice: a numba ``@njit`` loop
version and a vectorised numpy version. Which one is bound at import time is
controlled by ``RELAYRANK_NUMBA``:

* unset / ``1`` / ``auto``: use numba when it imports cleanly
* ``0`` / ``off`` / ``false``: always use the numpy path

Both paths are always importable so tests and the benchmark can compare them.
"""

from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

_FLAG = os.environ.get("RELAYRANK_NUMBA", "auto").strip().lower()

try:  # pragma: no cover - depends on the environment
    import numba

    HAVE_NUMBA = True
except Exception:  # noqa: BLE001 - any import failure means "no numba"
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in {"0", "off", "false", "no"}


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, else an identity decorator.

    The jitted function is only *used* when :data:`USE_NUMBA` is true; this
    wrapper just keeps module import working without numba installed.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
