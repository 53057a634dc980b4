"""Numeric kernel backend selection.

The compiled extension is preferred when it imported cleanly; setting
NOISEPLAN_PURE=1 forces the numpy fallback. Both backends expose the same
three callables with identical semantics.
"""

from __future__ import annotations

import os

from ._fallback import n_params, unpack

if os.environ.get("NOISEPLAN_PURE", "") == "1":
    from ._fallback import mlp_forward, mlp_train, nearest_state

    BACKEND = "numpy"
else:
    try:
        from ._core import mlp_forward, mlp_train, nearest_state

        BACKEND = "cython"
    except ImportError:
        from ._fallback import mlp_forward, mlp_train, nearest_state

        BACKEND = "numpy"

__all__ = [
    "BACKEND",
    "mlp_forward",
    "mlp_train",
    "n_params",
    "nearest_state",
    "unpack",
]
