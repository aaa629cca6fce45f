"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np


def bpe_merge(symbols: list[int], merges: dict[int, int]) -> list[int]:
    """Greedy lowest-rank pair merging over a word's symbol ids.

    ``merges`` maps ``(left << 32) | right`` to ``(rank << 32) | merged_id``.
    """
    word = list(symbols)
    while len(word) > 1:
        best = -1
        best_pair = None
        for a, b in zip(word, word[1:]):
            val = merges.get((a << 32) | b)
            if val is not None and (best < 0 or (val >> 32) < (best >> 32)):
                best = val
                best_pair = (a, b)
        if best_pair is None:
            break
        merged = best & 0xFFFFFFFF
        left, right = best_pair
        out = []
        i = 0
        while i < len(word):
            if i < len(word) - 1 and word[i] == left and word[i + 1] == right:
                out.append(merged)
                i += 2
            else:
                out.append(word[i])
                i += 1
        word = out
    return word


def edge_scores(dz: np.ndarray, grads: np.ndarray, edge_src: np.ndarray, edge_channel: np.ndarray) -> np.ndarray:
    """Per-edge dot products ``dz[src] . grads[channel]`` accumulated in float64."""
    if dz.shape[1] != grads.shape[1]:
        raise ValueError("dz and grads must have the same flattened width")
    pair = dz.astype(np.float64) @ grads.astype(np.float64).T
    return pair[edge_src, edge_channel]
