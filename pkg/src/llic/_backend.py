"""Select the compiled kernels when available, else the NumPy/pure-Python ones.

Set ``LLIC_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from llic import _kernels_py

kernels = _kernels_py
COMPILED = False

if os.environ.get("LLIC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from llic import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        kernels = _compiled
        COMPILED = True

CorruptStream = _kernels_py.CorruptStream


def use(name: str) -> None:
    """Switch backends at runtime: ``"compiled"`` or ``"python"``."""
    global kernels, COMPILED
    if name == "python":
        kernels, COMPILED = _kernels_py, False
    elif name == "compiled":
        from llic import _kernels as _compiled

        kernels, COMPILED = _compiled, True
    else:
        raise ValueError(f"unknown backend {name!r}")
