"""Acceleration toggle.

Hot kernels ship in two variants: explicit-loop functions compiled with numba
and vectorized numpy equivalents.  The numba path is used when the package is
importable and FAMELAB_NO_NUMBA is unset; either way both variants stay
importable from famelab._kernels for equivalence tests and benchmarks.
"""

import os


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


NUMBA_REQUESTED = not _env_flag("FAMELAB_NO_NUMBA")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via FAMELAB_NO_NUMBA instead
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and NUMBA_REQUESTED

if HAVE_NUMBA:
    njit = _njit
else:  # pragma: no cover

    def njit(*args, **kwargs):
        """No-op stand-in so kernel modules import cleanly without numba."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
