"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``ROOMVOL_PURE_PYTHON=1``
to force the numpy/scipy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
gammatone_analysis = _pykernels.gammatone_analysis
accumulate_images = _pykernels.accumulate_images

if os.environ.get("ROOMVOL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        gammatone_analysis = _kernels.gammatone_analysis
        accumulate_images = _kernels.accumulate_images

__all__ = ["BACKEND", "gammatone_analysis", "accumulate_images"]
