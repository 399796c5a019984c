"""Block kernels: compiled extension when available, numpy fallback otherwise.

Set ``PHYLOGRAD_PURE_PYTHON=1`` to force the fallback at import time.
"""

import logging
import os

from . import _reference as python

log = logging.getLogger(__name__)

try:
    if os.environ.get("PHYLOGRAD_PURE_PYTHON", "").strip() not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _compiled as compiled
except ImportError as exc:  # pragma: no cover - depends on build
    log.info("compiled kernels unavailable (%s); using numpy fallback", exc)
    compiled = None

IMPLEMENTATIONS = {"python": python}
if compiled is not None:
    IMPLEMENTATIONS["compiled"] = compiled

DEFAULT = "compiled" if compiled is not None else "python"

REDUCTION_WIDTH = 128


def get(name=None):
    name = name or DEFAULT
    try:
        return IMPLEMENTATIONS[name]
    except KeyError:
        raise ValueError(
            f"kernel implementation {name!r} not available; have {sorted(IMPLEMENTATIONS)}"
        ) from None


def staging_doubles(kernel, states, cbs, pbs, mbs=16, rate_block=1):
    """Scratch doubles one block of ``kernel`` stages, per the compiled layout."""
    pbs = min(pbs, states)
    if kernel == "postOrderPartials":
        return 3 * cbs * states + pbs * states
    if kernel == "preOrderPartials":
        return 4 * cbs * states + pbs * states
    if kernel == "gradient":
        return 5 * cbs * states + pbs * states + rate_block
    if kernel == "matrixTranspose":
        return mbs * mbs
    if kernel == "nodeSiteReduction":
        return REDUCTION_WIDTH
    if kernel == "rescalePartials":
        return 0
    raise ValueError(f"unknown kernel {kernel!r}")
