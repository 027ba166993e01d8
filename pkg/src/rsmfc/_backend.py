"""Kernel backend selection.

The compiled extension is used when it imports; ``RSMFC_BACKEND=python``
forces the numpy fallback.
"""

from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)


def _load():
    if os.environ.get("RSMFC_BACKEND", "").lower() == "python":
        from . import _kernels_py as mod

        return mod
    try:
        from . import _kernels as mod
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        from . import _kernels_py as mod
    return mod


kernels = _load()
BACKEND = kernels.BACKEND
