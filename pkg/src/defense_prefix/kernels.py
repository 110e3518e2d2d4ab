"""Hot image kernels: compiled extension when built, numpy otherwise.

Set ``DEFENSE_PREFIX_PURE_PYTHON=1`` to force the numpy implementation.
"""

from __future__ import annotations

import os

import numpy as np

from . import _orient_py

try:
    if os.environ.get("DEFENSE_PREFIX_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from . import _orient as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def orientation_field(img: np.ndarray, pool: int = 4) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if _compiled is not None:
        return _compiled.orientation_field(img, pool)
    return _orient_py.orientation_field(img, pool)
