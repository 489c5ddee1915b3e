"""Backend selection for the hot loops.

The Cython extension ``sentinel._ext`` is used when it was built; otherwise
the numpy implementation in ``sentinel._fallback`` takes over. Setting
``SENTINEL_PURE=1`` forces the fallback even when the extension exists.
"""

import os

from . import _fallback

fallback = _fallback

try:
    from . import _ext as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not os.environ.get("SENTINEL_PURE"):
    active = compiled
else:
    active = _fallback

BACKEND = active.NAME


def available():
    """Backends importable in this process, compiled first."""
    return [b for b in (compiled, fallback) if b is not None]
