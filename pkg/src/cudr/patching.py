"""Exact interventions: single-edge activation patching, circuit runs and circuit ablation."""

from __future__ import annotations

import enum
from typing import Iterable, Sequence

import numpy as np

from .model import (
    ActivationCache,
    EdgeId,
    InterventionError,
    Params,
    PatchableGraph,
    build_graph,
    forward,
    forward_with_interventions,
)
from .tasks import LogitDiff, TaskBatch


class PatchValueMode(enum.Enum):
    PER_SAMPLE = "per-sample"
    BATCH_MEAN = "batch-mean"

    @classmethod
    def parse(cls, value: "str | PatchValueMode") -> "PatchValueMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown patch mode {value!r}; expected per-sample or batch-mean") from None


class ProvenanceError(ValueError):
    """A circuit or score set belongs to a different model."""


def build_clean_cache(
    params: Params,
    batch: TaskBatch | np.ndarray,
    mode: PatchValueMode | str = PatchValueMode.PER_SAMPLE,
    graph: PatchableGraph | None = None,
) -> ActivationCache:
    """Cache of the clean run; BatchMean replaces each node output with its per-position batch mean."""
    tokens = batch.clean if isinstance(batch, TaskBatch) else batch
    _, cache = forward(params, tokens, graph or build_graph(params.config))
    if PatchValueMode.parse(mode) is PatchValueMode.BATCH_MEAN:
        return cache.batch_mean()
    return cache


def _metric(batch: TaskBatch, metric: LogitDiff | None) -> LogitDiff:
    return metric if metric is not None else batch.metric()


def _edges_of(circuit) -> list[EdgeId]:
    return list(circuit.edge_ids if hasattr(circuit, "edge_ids") else circuit)


def check_provenance(params: Params, obj) -> None:
    fp = getattr(obj, "fingerprint", None)
    if fp is not None and fp != params.fingerprint:
        raise ProvenanceError(f"object was built for model {fp}, not {params.fingerprint}")


def corrupt_baseline(params: Params, batch: TaskBatch, metric: LogitDiff | None = None, graph=None) -> float:
    logits, _ = forward(params, batch.corrupt, graph)
    return float(np.mean(_metric(batch, metric).value(logits)))


def clean_baseline(params: Params, batch: TaskBatch, metric: LogitDiff | None = None, graph=None) -> float:
    logits, _ = forward(params, batch.clean, graph)
    return float(np.mean(_metric(batch, metric).value(logits)))


def exact_edge_effects(
    params: Params,
    batch: TaskBatch,
    edges: Sequence[EdgeId] | None = None,
    metric: LogitDiff | None = None,
    mode: PatchValueMode | str = PatchValueMode.PER_SAMPLE,
    graph: PatchableGraph | None = None,
    clean_cache: ActivationCache | None = None,
    resid_start_value: np.ndarray | None = None,
) -> np.ndarray:
    """``L(x_cf | do(e = clean)) - L(x_cf)`` for each edge (all graph edges by default), batch-averaged.

    ``resid_start_value`` overrides the corrupt run's embedding output.
    """
    graph = graph or build_graph(params.config)
    metric = _metric(batch, metric)
    edges = graph.edges if edges is None else list(edges)
    cache = clean_cache if clean_cache is not None else build_clean_cache(params, batch, mode, graph)
    tokens = batch.corrupt
    base_logits = forward_with_interventions(params, tokens, {}, graph, resid_start_value)
    base = metric.value(base_logits)
    out = np.empty(len(edges), dtype=np.float64)
    for i, e in enumerate(edges):
        if e not in graph.edge_index:
            raise InterventionError(f"edge {e} is not in the {graph.convention} graph")
        logits = forward_with_interventions(params, tokens, {e: cache}, graph, resid_start_value)
        out[i] = np.mean(metric.value(logits) - base)
    return out


def exact_edge_effect(
    params: Params,
    batch: TaskBatch,
    edge: EdgeId,
    metric: LogitDiff | None = None,
    mode: PatchValueMode | str = PatchValueMode.PER_SAMPLE,
    graph: PatchableGraph | None = None,
) -> float:
    return float(exact_edge_effects(params, batch, [edge], metric, mode, graph)[0])


def run_with_circuit(
    params: Params,
    batch: TaskBatch,
    circuit,
    metric: LogitDiff | None = None,
    mode: PatchValueMode | str = PatchValueMode.PER_SAMPLE,
    graph: PatchableGraph | None = None,
    clean_cache: ActivationCache | None = None,
) -> float:
    """Mean metric of the corrupt run with every circuit edge fed its clean value.

    ``circuit`` is a :class:`~cudr.circuits.Circuit` (fingerprint checked) or
    any iterable of edge ids.
    """
    check_provenance(params, circuit)
    graph = graph or build_graph(params.config)
    cache = clean_cache if clean_cache is not None else build_clean_cache(params, batch, mode, graph)
    assignment = {e: cache for e in _edges_of(circuit)}
    logits = forward_with_interventions(params, batch.corrupt, assignment, graph)
    return float(np.mean(_metric(batch, metric).value(logits)))


def ablate_circuit(
    params: Params,
    batch: TaskBatch | np.ndarray,
    circuit,
    donor: TaskBatch | np.ndarray,
    metric: LogitDiff,
    graph: PatchableGraph | None = None,
    donor_cache: ActivationCache | None = None,
) -> float:
    """Mean metric of a run on ``batch`` (clean tokens) with circuit edges fed the donor run's values."""
    check_provenance(params, circuit)
    tokens = batch.clean if isinstance(batch, TaskBatch) else np.asarray(batch)
    donor_tokens = donor.clean if isinstance(donor, TaskBatch) else np.asarray(donor)
    if tokens.shape != donor_tokens.shape:
        raise InterventionError(f"donor batch shape {donor_tokens.shape} does not match input {tokens.shape}")
    graph = graph or build_graph(params.config)
    if donor_cache is None:
        _, donor_cache = forward(params, donor_tokens, graph)
    assignment = {e: donor_cache for e in _edges_of(circuit)}
    logits = forward_with_interventions(params, tokens, assignment, graph)
    return float(np.mean(metric.value(logits)))


def edge_list(edges: Iterable[EdgeId]) -> list[EdgeId]:
    return sorted(set(edges), key=lambda e: e.sort_key)
