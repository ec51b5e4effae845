"""LSTM cell kernel backends.

The compiled Cython kernel is preferred when available; the pure-numpy
fallback is bit-compatible up to last-ulp transcendental differences.
Selection is controlled by the ``REIDGATE_KERNEL`` environment variable:
``auto`` (default), ``cython``, or ``python``.
"""

import os

from . import lstm_py

_requested = os.environ.get("REIDGATE_KERNEL", "auto").lower()

if _requested not in ("auto", "cython", "python"):
    raise ValueError(f"REIDGATE_KERNEL must be auto, cython, or python; got {_requested!r}")

if _requested in ("auto", "cython"):
    try:
        from . import _lstm_cy as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = lstm_py
        BACKEND = "python"
else:
    _impl = lstm_py
    BACKEND = "python"

cell_forward = _impl.cell_forward
cell_backward = _impl.cell_backward


def get_backend(name):
    """Return (cell_forward, cell_backward) for an explicit backend name."""
    if name == "python":
        return lstm_py.cell_forward, lstm_py.cell_backward
    if name == "cython":
        from . import _lstm_cy

        return _lstm_cy.cell_forward, _lstm_cy.cell_backward
    raise ValueError(f"unknown kernel backend {name!r}")
