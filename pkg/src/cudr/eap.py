"""Edge attribution patching: first-order estimates of every edge effect from two forwards and one backward."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .model import EdgeId, ModelFingerprint, Params, PatchableGraph, build_graph, forward, node_input_grads
from .patching import ProvenanceError, exact_edge_effects
from .tasks import LogitDiff, TaskBatch


class ScoreError(ValueError):
    pass


@dataclass
class EdgeScores:
    """One float64 score per graph edge, in canonical edge order."""

    graph: PatchableGraph
    scores: np.ndarray
    n_samples: int
    fingerprint: ModelFingerprint | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (self.graph.n_edges,):
            raise ScoreError(f"expected {self.graph.n_edges} scores, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            bad = [str(self.graph.edges[i]) for i in np.flatnonzero(~np.isfinite(self.scores))[:3]]
            raise ScoreError(f"non-finite edge scores (e.g. {', '.join(bad)})")
        if self.n_samples < 1:
            raise ScoreError("n_samples must be >= 1")

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, edge: EdgeId) -> float:
        return float(self.scores[self.graph.edge_index[edge]])

    def items(self):
        return zip(self.graph.edges, self.scores.tolist())

    def as_dict(self) -> dict[EdgeId, float]:
        return dict(self.items())


def eap_scores(
    params: Params,
    batch: TaskBatch,
    metric: LogitDiff | None = None,
    graph: PatchableGraph | None = None,
    per_position: bool = False,
    resid_start_value: np.ndarray | None = None,
    clean_z: np.ndarray | None = None,
) -> EdgeScores:
    """``g(e) = sum_{b,s,d} (z_ori - z_cf)[src] * dL/d input[dst, channel]``, divided by the batch size.

    Sequence positions are summed; ``per_position`` divides by the sequence
    length too.  ``resid_start_value`` overrides the corrupt run's embedding
    output and ``clean_z`` supplies precomputed clean node outputs.
    """
    graph = graph or build_graph(params.config)
    metric = metric if metric is not None else batch.metric()
    if clean_z is None:
        _, clean = forward(params, batch.clean, graph)
        clean_z = clean.z
    grads, cf = node_input_grads(params, batch.corrupt, metric, graph, resid_start_value, with_cache=True)
    n_src, B, S, D = clean_z.shape
    dz = (clean_z.astype(np.float64) - cf.z).reshape(n_src, -1)
    g = grads.grads.reshape(len(graph.channels), -1)
    scores = kernels.edge_scores(dz, g, graph.edge_src, graph.edge_channel)
    scores = scores / (B * S if per_position else B)
    prov = dict(batch.provenance)
    prov["per_position"] = per_position
    return EdgeScores(graph, scores, B, params.fingerprint, prov)


def eap_first_order_check(
    params: Params,
    batch: TaskBatch,
    metric: LogitDiff | None = None,
    eps_grid: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4),
    graph: PatchableGraph | None = None,
) -> np.ndarray:
    """Max over edges of ``|g_eap - g_exact|`` for corrupt runs interpolated toward the clean run.

    The corrupt run's embedding output is ``clean + eps * (corrupt - clean)``.
    Use float64 parameters: the error at small eps is below float32 resolution.
    """
    eps_grid = [float(e) for e in eps_grid]
    if any(e < 0 for e in eps_grid):
        raise ValueError("eps values must be non-negative")
    graph = graph or build_graph(params.config)
    metric = metric if metric is not None else batch.metric()
    _, clean = forward(params, batch.clean, graph)
    _, corrupt = forward(params, batch.corrupt, graph)
    z0_clean = clean.z[0].astype(np.float64)
    z0_cf = corrupt.z[0].astype(np.float64)
    errors = []
    for eps in eps_grid:
        rs = (z0_clean + eps * (z0_cf - z0_clean)).astype(params.dtype)
        approx = eap_scores(params, batch, metric, graph, resid_start_value=rs, clean_z=clean.z).scores
        exact = exact_edge_effects(params, batch, None, metric, graph=graph, clean_cache=clean, resid_start_value=rs)
        errors.append(float(np.max(np.abs(approx - exact))))
    return np.array(errors)


def loglog_slope(eps: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(eps)."""
    x, y = np.log(np.asarray(eps, dtype=np.float64)), np.log(np.asarray(errors, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def average_scores(items: Sequence[EdgeScores]) -> EdgeScores:
    """Sample-count-weighted mean, combined in list order."""
    if not items:
        raise ScoreError("nothing to average")
    first = items[0]
    for s in items[1:]:
        if s.fingerprint != first.fingerprint:
            raise ProvenanceError(f"cannot average scores from models {first.fingerprint} and {s.fingerprint}")
        if s.graph != first.graph:
            raise ScoreError("cannot average scores over different graphs")
    total = sum(s.n_samples for s in items)
    if len(items) == 1:
        return EdgeScores(first.graph, first.scores.copy(), total, first.fingerprint, dict(first.provenance))
    acc = np.zeros_like(first.scores)
    for s in items:
        acc += s.scores * s.n_samples
    prov = {"averaged": [s.provenance for s in items]}
    return EdgeScores(first.graph, acc / total, total, first.fingerprint, prov)
