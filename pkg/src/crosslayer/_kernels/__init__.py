"""Hot-kernel backend selection.

The compiled Cython module is preferred when importable; otherwise the
pure-numpy reference backend is used.  Set CROSSLAYER_BACKEND=python (or
=cython) to force one.  Both expose the same functions with identical
per-index arithmetic; results agree to floating-point rounding.
"""

import os

from . import core_py

_forced = os.environ.get("CROSSLAYER_BACKEND", "").lower()

if _forced == "python":
    core = core_py
else:
    try:
        from . import core_cy as core  # type: ignore
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "CROSSLAYER_BACKEND=cython but the compiled kernels are not built"
            )
        core = core_py


def backend_name() -> str:
    return core.BACKEND


def available_backends():
    out = {"python": core_py}
    try:
        from . import core_cy

        out["cython"] = core_cy
    except ImportError:
        pass
    return out
