"""Acceptance criteria 1-10; each test prints one PASS/FAIL line and a summary is shown at the end."""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pydot
import pytest

from cudr.circuits import build_hierarchy, containment_violations, merge, overlap, ranking, top_k
from cudr.eap import EdgeScores, eap_first_order_check, eap_scores, loglog_slope
from cudr.harness import ExperimentConfig, correlate, faithfulness_sweep, random_baseline, train_toy
from cudr.model import (
    TOY_PRESETS,
    ModelConfig,
    ModelFingerprint,
    build_graph,
    forward,
    forward_with_interventions,
)
from cudr.oracle import node_gradient_error, param_gradient_error
from cudr.patching import clean_baseline, corrupt_baseline, run_with_circuit
from cudr.tasks import (
    default_toy_spec,
    gen_toy_cudr,
    hierarchy_toy_spec,
    ingest_cudr,
    relation_counts,
    write_cudr,
)
from cudr.tensor import make_rng
from oracles import loop_intersection, sentence_corpus

TOY_STEPS = 150
CORR_SEEDS = range(5)
PAIRED_SEEDS = range(10)
C5_GRID = (8, 32, 128)
PDTB_OFFICIAL_COUNT = 11843


def toy_model(preset, spec, seed=0, steps=TOY_STEPS):
    pool, vocab = gen_toy_cudr(make_rng(0), spec)
    X, Y = spec.training_set()
    cfg = ModelConfig(vocab_size=len(vocab), max_seq=8, **TOY_PRESETS[preset])
    return train_toy(cfg, X, Y, steps, make_rng(seed), eval_batch=pool), pool


def test_c1_gradients(trained_tiny, toy_pool, report):
    start = time.perf_counter()
    params = trained_tiny.params.astype(np.float64)
    batch = toy_pool[0].sample(make_rng(1), 4)
    p_err = param_gradient_error(params, batch, make_rng(1), coords_per_param=None, h=1e-3)
    n_err = node_gradient_error(params, batch, make_rng(1), coords_per_channel=None, h=1e-4)
    elapsed = time.perf_counter() - start
    ok = p_err < 1e-3 and n_err < 1e-3 and elapsed < 60
    detail = f"param max rel err {p_err:.2e}, node-input max rel err {n_err:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)"
    assert report("1", "gradient correctness", ok, detail), detail


def test_c2a_taylor_slope(trained_tiny, toy_pool, report):
    params = trained_tiny.params.astype(np.float64)
    batch = toy_pool[0].sample(make_rng(2), 8)
    eps = (1e-1, 1e-2, 1e-3, 1e-4)
    errs = eap_first_order_check(params, batch, eps_grid=eps)
    slope = loglog_slope(eps, errs)
    detail = f"log-log slope {slope:.3f} in [1.8, 2.2]; errors {', '.join(f'{e:.2e}' for e in errs)}"
    assert report("2a", "EAP first-order error slope", 1.8 <= slope <= 2.2, detail), detail


def test_c2b_eap_vs_exact(toy_spec, report):
    start = time.perf_counter()
    rs = []
    for seed in CORR_SEEDS:
        result, pool = toy_model("tiny", toy_spec, seed)
        params = result.params.astype(np.float64)
        batch = pool.sample(make_rng(2), 32)
        from cudr.patching import exact_edge_effects

        exact = exact_edge_effects(params, batch)
        assert len(exact) == 46
        rs.append(correlate(eap_scores(params, batch).scores, exact))
    elapsed = time.perf_counter() - start
    r = float(np.median(rs))
    ok = r >= 0.8 and elapsed < 120 * len(rs)
    detail = (
        f"median Pearson r over {len(rs)} trained models {r:.3f} (>= 0.8); per model "
        f"{', '.join(f'{x:.3f}' for x in rs)}; {elapsed / len(rs):.1f}s per model"
    )
    assert report("2b", "EAP vs exact patching on 46 edges", ok, detail), detail


def test_c3_endpoints(trained_tiny, toy_pool, report):
    params = trained_tiny.params
    batch = toy_pool[0].sample(make_rng(3), 32)
    g = build_graph(params.config)
    scores = eap_scores(params, batch)
    cfg = ExperimentConfig(grid=(g.n_edges,), mode="per-sample")
    curve = faithfulness_sweep(params, scores, batch, cfg, check=False)
    full, cf = clean_baseline(params, batch), corrupt_baseline(params, batch)
    f0 = run_with_circuit(params, batch, []) / full
    f_all = float(curve.F[0, -1])
    rel0 = abs(f0 - cf / full) / abs(cf / full)
    plain, _ = forward(params, batch.corrupt)
    bit = np.array_equal(forward_with_interventions(params, batch.corrupt, {}), plain)
    ok = rel0 <= 1e-5 and abs(f_all - 1.0) <= 1e-4 and bit
    detail = f"F(0) rel err {rel0:.1e} (<= 1e-5), |F(|E|) - 1| {abs(f_all - 1):.1e} (<= 1e-4), empty patch bit-identical {bit}"
    assert report("3", "patching endpoint identities", ok, detail), detail


def test_c4_residual_reconstruction(trained_default, report):
    params = trained_default.params
    g = build_graph(params.config)
    rng = make_rng(4)
    worst = 0.0
    for _ in range(100):
        tokens = rng.integers(0, params.config.vocab_size, size=(1, params.config.max_seq))
        _, cache = forward(params, tokens, g, keep_inputs=True)
        for ci, ch in enumerate(g.channels):
            total = cache.z[: g.n_upstream[ci]].astype(np.float64).sum(0) + cache.channel_bias(ch)
            worst = max(worst, float(np.abs(total - cache.channel_inputs[ci]).max()))
    detail = f"max |sum of upstream outputs - channel input| {worst:.2e} over 100 inputs, {len(g.channels)} channels (<= 1e-4)"
    assert report("4", "residual reconstruction", worst <= 1e-4, detail), detail


def test_c5_discursive_circuit(trained_default, toy_pool, report):
    params = trained_default.params
    pool = toy_pool[0]
    g = build_graph(params.config)
    cfg = ExperimentConfig(grid=C5_GRID, mode="per-sample")
    eap_F, rand_F = [], []
    for s in PAIRED_SEEDS:
        disc = pool.sample(make_rng(s), 32)
        ev = pool.sample(make_rng(1000 + s), 32)
        scores = eap_scores(params, disc)
        eap_F.append(faithfulness_sweep(params, scores, ev, cfg, g, seed=s).F[0])
        rb = random_baseline(g, make_rng(s), params.fingerprint)
        rand_F.append(faithfulness_sweep(params, rb, ev, cfg, g, seed=s).F[0])
    eap_F, rand_F = np.array(eap_F), np.array(rand_F)
    wins = (eap_F > rand_F).sum(axis=0)
    med = np.median(eap_F, axis=0)
    violations = int(np.sum(np.diff(med) < 0))
    acc = trained_default.accuracy
    ok = acc >= 0.95 and bool(np.all(wins >= 9)) and violations <= 1
    detail = (
        f"accuracy {acc:.3f} (>= 0.95); EAP beats random at k={C5_GRID} in {wins.tolist()} of 10 seeds (>= 9 each); "
        f"median F {np.round(med, 4).tolist()} with {violations} monotonicity violation(s) (<= 1)"
    )
    assert report("5", "desk-scale discursive circuit", ok, detail), detail


def _random_circuits(rng, graph, fp, n):
    return [ranking(EdgeScores(graph, rng.normal(size=graph.n_edges), 1, fp)) for _ in range(n)]


def test_c6_circuit_algebra(report):
    graph = build_graph(ModelConfig(n_layer=2, n_head=2, d_model=16, vocab_size=28, max_seq=8))
    fp = ModelFingerprint("L2-H2-D16-M64-V28-S8", "0" * 16)
    rng = make_rng(6)
    checks = 0
    failures = []
    for trial in range(20):
        cs = _random_circuits(rng, graph, fp, 4)
        for K in range(1, graph.n_edges + 1):
            m = merge(cs, K)
            tops = [c.head(K).edge_set for c in cs]
            if m.edge_set != loop_intersection(tops) or any(not m.edge_set <= t for t in tops):
                failures.append(f"containment K={K}")
            if merge(cs[::-1], K).edge_set != m.edge_set or merge([cs[1], cs[0]], K).edge_set != merge(cs[:2], K).edge_set:
                failures.append(f"commutativity K={K}")
            if merge([cs[0], cs[0]], K).edge_ids != cs[0].head(K).edge_ids:
                failures.append(f"idempotence K={K}")
            s = EdgeScores(graph, cs[0].scores, 1, fp)
            if top_k(s, K).edge_ids != top_k(s, graph.n_edges).edge_ids[:K]:
                failures.append(f"prefix K={K}")
            for a in cs:
                if overlap(a, a, K) != K:
                    failures.append(f"diagonal K={K}")
                for b in cs:
                    if overlap(a, b, K) != overlap(b, a, K):
                        failures.append(f"symmetry K={K}")
            checks += 1
    detail = f"{checks} (circuit set, K) cases over the 46-edge graph, K = 1..46; {len(failures)} law violations"
    assert report("6", "circuit algebra laws", not failures, detail), failures[:5]


def test_c7_hierarchy(report):
    spec = hierarchy_toy_spec()
    result, pool = toy_model("tiny", spec, steps=300)
    K = 30
    l3 = {}
    for rel in spec.relations:
        batch = pool.where(relation=rel.label).sample(make_rng(7), 32)
        l3[rel.label] = top_k(eap_scores(result.params, batch), K)
    h = build_hierarchy(l3, K)
    sizes = h.sizes()
    l0 = sizes["L0"]["root"]
    l1 = min(sizes["L1"].values())
    l3min = min(sizes["L3"].values())
    problems = containment_violations(h)
    ok = len(spec.relations) >= 4 and l0 <= l1 <= l3min and not problems
    detail = (
        f"{len(spec.relations)} relations (accuracy {result.accuracy:.3f}); |L0| {l0} <= min|L1| {l1} <= min|L3| {l3min}; "
        f"L2 nodes {sorted(sizes['L2'])}; containment violations {len(problems)}"
    )
    assert report("7", "hierarchy structure", ok, detail), detail


def test_c8_tokenizer_parity(gpt2_files, report):
    transformers = pytest.importorskip("transformers")
    from cudr.tokenizer import BPETokenizer

    tok = BPETokenizer.from_files(*gpt2_files)
    try:
        ref = transformers.GPT2Tokenizer(vocab=str(gpt2_files[0]), merges=str(gpt2_files[1]))
    except TypeError:
        ref = transformers.GPT2Tokenizer(vocab_file=str(gpt2_files[0]), merges_file=str(gpt2_files[1]))
    corpus = sentence_corpus(1000)
    bad = sum(tok.encode(s) != ref.encode(s) for s in corpus)
    detail = f"{len(corpus) - bad}/{len(corpus)} sentences tokenize identically to the reference"
    assert report("8a", "GPT-2 tokenizer parity", bad == 0, detail), detail


@pytest.mark.skipif(not os.environ.get("CUDR_GPT2_CHECKPOINT"), reason="set CUDR_GPT2_CHECKPOINT to a GPT-2 small model.safetensors")
def test_c8_real_weights(gpt2_files, report):
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    from cudr.tokenizer import BPETokenizer
    from cudr.weights import load_weights

    path = Path(os.environ["CUDR_GPT2_CHECKPOINT"])
    _, params = load_weights(path)
    ref = transformers.GPT2LMHeadModel.from_pretrained(str(path.parent)).eval()
    tok = BPETokenizer.from_files(*gpt2_files)
    prompts = [
        "Bob is hungry, so he",
        "The meeting was cancelled because",
        "When Mary and John went to the store, John gave a drink to",
        "Much is being done in Colombia to fight the drug cartel mafia. For example,",
        "It was raining; however,",
    ]
    worst = 0.0
    for p in prompts:
        ids = np.array([tok.encode(p)])
        with torch.no_grad():
            want = ref(torch.tensor(ids)).logits.numpy()
        worst = max(worst, float(np.abs(forward(params, ids)[0] - want).max()))
    detail = f"max |logit diff| {worst:.2e} over 5 prompts (< 1e-3)"
    assert report("8b", "real GPT-2 small logits parity", worst < 1e-3, detail), detail


def test_c9_ingestion(fixtures_dir, tmp_path, report):
    path = fixtures_dir / "cudr_samples.jsonl"
    records = ingest_cudr(path)
    header = json.loads(path.read_text().splitlines()[0])["cudr_header"]
    write_cudr(tmp_path / "rt.jsonl", records)
    back = ingest_cudr(tmp_path / "rt.jsonl")
    ok = back == records and relation_counts(records) == header["counts"]
    detail = f"{len(records)} records round-trip losslessly; per-relation counts match the header"
    official = os.environ.get("CUDR_OFFICIAL_DATA")
    if official:
        recs = ingest_cudr(official)
        n_pdtb = sum(r.framework == "PDTB" for r in recs)
        ok = ok and n_pdtb == PDTB_OFFICIAL_COUNT
        detail += f"; official PDTB count {n_pdtb} (== {PDTB_OFFICIAL_COUNT})"
    else:
        detail += "; official data not supplied, PDTB count not checked"
    assert report("9", "CuDR ingestion", ok, detail), detail


def test_c10_end_to_end(tmp_path, report):
    def cudr(*args):
        out = subprocess.run([sys.executable, "-m", "cudr.cli", *map(str, args)], capture_output=True, text=True)
        assert out.returncode == 0, (args, out.stderr)
        return out.stdout

    start = time.perf_counter()
    pairs, model = tmp_path / "pairs.jsonl", tmp_path / "model.safetensors"
    cudr("gen-tasks", "--task", "toy-cudr", "--out", pairs)
    cudr("train-toy", "--toy", "default", "--task", "toy-cudr", "--min-accuracy", "0.95", "--out", model)
    circuits = []
    for seed in (0, 1):
        c = tmp_path / f"seed{seed}.circuit"
        cudr("discover", "--model", model, "--task", pairs, "--k", 100, "--seed", seed, "--out", c)
        circuits.append(c)
    cudr("sweep", "--model", model, "--task", pairs, "--circuit", circuits[0], "--grid", "8,32,128", "--repeats", 3,
         "--patch-mode", "per-sample", "--out", tmp_path / "curve.tsv")
    cudr("merge", *circuits, "--K", 100, "--out", tmp_path / "merged.circuit")
    cudr("overlap", *circuits, "--k", 50, "--out", tmp_path / "overlap.tsv")
    cudr("export-dot", tmp_path / "merged.circuit", "--out", tmp_path / "merged.dot")
    elapsed = time.perf_counter() - start
    graphs = pydot.graph_from_dot_file(str(tmp_path / "merged.dot"))
    ok = elapsed < 300 and bool(graphs) and graphs[0].get_edges() is not None
    detail = f"gen-tasks -> train-toy -> discover -> sweep -> merge -> overlap -> export-dot in {elapsed:.1f}s (< 300s); DOT parsed"
    assert report("10", "end-to-end CLI pipeline", ok, detail), detail
