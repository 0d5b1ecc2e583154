"""Pick the compiled Adam kernel when it is built, else the numpy twin.

Set ``WIDTHLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _adam_numpy

BACKEND = "numpy"
adam_direction = _adam_numpy.adam_direction

if os.environ.get("WIDTHLAB_PURE_PYTHON", "") in ("", "0"):
    try:
        from ._adam_kernel import adam_direction  # noqa: F811
    except ImportError:
        pass
    else:
        BACKEND = "cython"

BACKENDS = {"numpy": _adam_numpy.adam_direction}
try:
    from ._adam_kernel import adam_direction as _compiled
except ImportError:
    pass
else:
    BACKENDS["cython"] = _compiled
