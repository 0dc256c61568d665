"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy twins in ``_pykernels`` are used.  Setting ``PHYSREG_PURE_PYTHON=1``
forces the numpy path.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("PHYSREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

sdf_query = _impl.sdf_query
mesh_distance = _impl.mesh_distance
ray_parity = _impl.ray_parity
score_topk = _impl.score_topk
rasterize = _impl.rasterize

__all__ = ["BACKEND", "sdf_query", "mesh_distance", "ray_parity", "score_topk",
           "rasterize"]
