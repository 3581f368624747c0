"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback. Set ``FJORD_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("FJORD_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return _kernels_py, "python"
    return _kernels, "cython"


backend, BACKEND = _load()

hash_join_pairs = backend.hash_join_pairs
qs_masks = backend.qs_masks
exit_leaves = backend.exit_leaves
pq_distances = backend.pq_distances

__all__ = ["BACKEND", "hash_join_pairs", "qs_masks", "exit_leaves", "pq_distances"]
