"""Select the compiled kernels when available.

Set ``GRADFLOWS_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

if os.environ.get("GRADFLOWS_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as kernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as kernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
