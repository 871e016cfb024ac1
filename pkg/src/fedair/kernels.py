"""Hot-loop kernels, compiled when available.

``BACKEND`` is ``"cython"`` when the extension imported, otherwise
``"python"``.  Setting ``FEDAIR_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _crc_fallback

python_crc_rows = _crc_fallback.crc_rows

if os.environ.get("FEDAIR_PURE_PYTHON", "") not in ("", "0"):
    crc_rows = python_crc_rows
    BACKEND = "python"
else:
    try:
        from ._crc_kernel import crc_rows
        BACKEND = "cython"
    except ImportError:
        crc_rows = python_crc_rows
        BACKEND = "python"

__all__ = ["BACKEND", "crc_rows", "python_crc_rows"]
