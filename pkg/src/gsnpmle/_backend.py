"""Pick the compiled core when it imports, else the numpy fallback.

Set ``GSNPMLE_BACKEND=python`` to force the fallback.
"""

import os

from . import _pycore

if os.environ.get("GSNPMLE_BACKEND", "").lower() == "python":
    core = _pycore
    NAME = "python"
else:
    try:
        from . import _core as core  # type: ignore[attr-defined]

        NAME = "compiled"
    except ImportError:
        core = _pycore
        NAME = "python"

__all__ = ["core", "NAME"]
