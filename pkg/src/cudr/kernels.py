"""Kernel dispatch: the compiled BPE loop when built, pure Python otherwise.

Set ``CUDR_PURE_PYTHON=1`` to force the fallback.  Edge scoring is a dense
contraction and always goes through numpy's BLAS, which beats a per-edge loop.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CUDR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def bpe_merge(symbols: list[int], merges: dict[int, int]) -> list[int]:
    return _impl.bpe_merge(symbols, merges)


def edge_scores(dz: np.ndarray, grads: np.ndarray, edge_src: np.ndarray, edge_channel: np.ndarray) -> np.ndarray:
    """Score every edge as ``sum(dz[src] * grads[channel])`` with float64 accumulation.

    ``dz`` is ``[n_src, width]`` and ``grads`` is ``[n_channels, width]``.
    """
    dtype = np.result_type(dz.dtype, grads.dtype)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    dz = np.ascontiguousarray(dz, dtype=dtype)
    grads = np.ascontiguousarray(grads, dtype=dtype)
    src = np.ascontiguousarray(edge_src, dtype=np.int64)
    chan = np.ascontiguousarray(edge_channel, dtype=np.int64)
    return _kernels_py.edge_scores(dz, grads, src, chan)
