"""Kernel selection: the compiled extension when built, else the Python twin.

Set ``BILEVEL_RL_KERNEL=python`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
run_segment = _pykernels.run_segment

if os.environ.get("BILEVEL_RL_KERNEL", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        run_segment = _ckernels.run_segment

python_run_segment = _pykernels.run_segment
categorical = _pykernels.categorical


def compiled_run_segment():
    """The compiled kernel, or None when the extension is unavailable."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels.run_segment
