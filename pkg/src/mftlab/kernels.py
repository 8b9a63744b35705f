"""Kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``MFTLAB_PURE_PYTHON=1`` before import to force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
project_box_batch = _pykernels.project_box_batch
euler_step = _pykernels.euler_step

if os.environ.get("MFTLAB_PURE_PYTHON") != "1":
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        project_box_batch = _ckernels.project_box_batch
        euler_step = _ckernels.euler_step

__all__ = ["BACKEND", "project_box_batch", "euler_step"]
