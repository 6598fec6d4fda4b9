"""Kernel dispatch: the compiled extension when it imports, NumPy otherwise.

Set ``DPMOE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DPMOE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def fcfs_assign(experts, num_experts, capacity, impl=None):
    """Assign tokens to expert slots first-come first-served.

    ``experts`` is the flat top-expert id per token in processing order.
    Returns ``(slot, counts, slot_token)``: the slot index per token (-1 when
    the expert was full), the occupancy per expert, and the inverse map
    ``[num_experts, capacity]`` from slot to token index (-1 when empty).
    """
    impl = impl or _impl
    experts = np.ascontiguousarray(experts, dtype=np.int64)
    return impl.fcfs_assign(experts, int(num_experts), int(capacity))


def segment_outer_sum(dy, x, owner, num_samples, impl=None):
    """``out[b] = sum over slots c with owner[c] == b of outer(dy[c], x[c])``."""
    impl = impl or _impl
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    owner = np.ascontiguousarray(owner, dtype=np.int64)
    if dy.shape[0] != x.shape[0] or owner.shape[0] != dy.shape[0]:
        raise ValueError(f"slot extents disagree: {dy.shape[0]}, {x.shape[0]}, {owner.shape[0]}")
    return impl.segment_outer_sum(dy, x, owner, int(num_samples))


def implementations():
    impls = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        impls["cython"] = _compiled
    return impls
