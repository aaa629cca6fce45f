import numpy as np
import pytest

from cudr.circuits import top_k
from cudr.eap import eap_scores
from cudr.model import InterventionError, build_graph, forward, init_params
from cudr.patching import (
    PatchValueMode,
    ProvenanceError,
    ablate_circuit,
    build_clean_cache,
    clean_baseline,
    corrupt_baseline,
    edge_list,
    exact_edge_effect,
    exact_edge_effects,
    run_with_circuit,
)
from cudr.tensor import make_rng
from oracles import edge_key, logit_diff, reference_forward


@pytest.fixture(scope="module")
def setup(random_tiny, toy_pool):
    pool, _ = toy_pool
    return random_tiny, pool.sample(make_rng(1), 6)


def oracle_effect(params, batch, edges, donor_outputs):
    base, _ = reference_forward(params, batch.corrupt)
    patched, _ = reference_forward(params, batch.corrupt, {edge_key(e): donor_outputs[str(e.src)] for e in edges})
    m = lambda lg: logit_diff(lg, batch.answers, batch.distractors)  # noqa: E731
    return float(np.mean(m(patched) - m(base))), float(np.mean(m(patched)))


def test_exact_effects_match_oracle(setup):
    params, batch = setup
    g = build_graph(params.config)
    got = exact_edge_effects(params, batch)
    _, donor = reference_forward(params, batch.clean)
    want = [oracle_effect(params, batch, [e], donor)[0] for e in g.edges]
    np.testing.assert_allclose(got, want, atol=1e-10)
    assert got.dtype == np.float64


def test_batch_mean_uses_mean_clean_values(setup):
    params, batch = setup
    g = build_graph(params.config)
    got = exact_edge_effects(params, batch, g.edges[:10], mode="batch-mean")
    _, donor = reference_forward(params, batch.clean)
    donor = {k: np.broadcast_to(v.mean(0, keepdims=True), v.shape) for k, v in donor.items()}
    want = [oracle_effect(params, batch, [e], donor)[0] for e in g.edges[:10]]
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_single_edge_helper(setup):
    params, batch = setup
    g = build_graph(params.config)
    assert exact_edge_effect(params, batch, g.edges[5]) == pytest.approx(exact_edge_effects(params, batch, [g.edges[5]])[0])


def test_run_with_circuit_matches_oracle(setup):
    params, batch = setup
    g = build_graph(params.config)
    edges = [g.edges[i] for i in make_rng(2).choice(g.n_edges, 12, replace=False)]
    _, donor = reference_forward(params, batch.clean)
    assert run_with_circuit(params, batch, edges) == pytest.approx(oracle_effect(params, batch, edges, donor)[1], abs=1e-10)


def test_endpoints(setup):
    params, batch = setup
    g = build_graph(params.config)
    assert run_with_circuit(params, batch, []) == corrupt_baseline(params, batch)
    assert run_with_circuit(params, batch, g.edges) == pytest.approx(clean_baseline(params, batch), abs=1e-10)
    # batch mean substitution of every edge restores the batch-mean clean output, not the clean metric
    bm = run_with_circuit(params, batch, g.edges, mode="batch-mean")
    assert np.isfinite(bm)


def test_circuit_from_other_model_rejected(setup, toy_pool):
    params, batch = setup
    other = init_params(params.config, make_rng(99), std=0.3, dtype=np.float64)
    circ = top_k(eap_scores(other, batch), 5)
    with pytest.raises(ProvenanceError):
        run_with_circuit(params, batch, circ)


def test_ablate_circuit_matches_oracle(setup):
    params, batch = setup
    g = build_graph(params.config)
    edges = g.edges[::7]
    donor_tokens = batch.corrupt
    got = ablate_circuit(params, batch, edges, donor_tokens, batch.metric())
    _, donor = reference_forward(params, donor_tokens)
    lg, _ = reference_forward(params, batch.clean, {edge_key(e): donor[str(e.src)] for e in edges})
    assert got == pytest.approx(float(np.mean(logit_diff(lg, batch.answers, batch.distractors))), abs=1e-10)
    with pytest.raises(InterventionError):
        ablate_circuit(params, batch, edges, donor_tokens[:2], batch.metric())


def test_mode_parsing():
    assert PatchValueMode.parse("per-sample") is PatchValueMode.PER_SAMPLE
    with pytest.raises(ValueError, match="unknown patch mode"):
        PatchValueMode.parse("mean")


def test_batch_mean_cache_is_constant_over_batch(setup):
    params, batch = setup
    cache = build_clean_cache(params, batch, "batch-mean")
    assert np.ptp(cache.z, axis=1).max() == 0


def test_edge_list_sorted_unique(setup):
    params, _ = setup
    g = build_graph(params.config)
    edges = edge_list(list(reversed(g.edges)) + g.edges[:3])
    assert edges == sorted(g.edges, key=lambda e: e.sort_key)


def test_unknown_edge_rejected(setup):
    params, batch = setup
    merged = build_graph(params.config, split_qkv=False)
    with pytest.raises(InterventionError):
        exact_edge_effects(params, batch, [build_graph(params.config).edges[0]], graph=merged)
