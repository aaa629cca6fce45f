import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cudr.tasks import (
    FEATURES,
    INSTRUCTION,
    IOI_NAMES,
    CudrRecord,
    ParseError,
    PairRejected,
    TaskError,
    ToyCudrSpec,
    connective_table,
    default_toy_spec,
    feature_prompts,
    gen_toy_cudr,
    hierarchy_toy_spec,
    in_taxonomy,
    ingest_cudr,
    ioi_prompts,
    logit_diff_metric,
    make_batch,
    pairs_from_records,
    pdtb_relation,
    read_pairs,
    relation_counts,
    render_prompt,
    to_pair,
    write_cudr,
    write_pairs,
)
from cudr.tensor import Tensor, make_rng
from cudr.tokenizer import WordTokenizer

BOB = CudrRecord(
    arg1="Bob is hungry", arg2="he goes to the canteen", arg2_cf="the canteen is closed", conn="so", conn_cf="but",
    relation="Contingency.Cause.Result", relation_cf="Comparison.Concession.Arg2-as-denier", framework="PDTB",
    source_id="bob",
)


@pytest.fixture(scope="module")
def samples(fixtures_dir):
    return ingest_cudr(fixtures_dir / "cudr_samples.jsonl")


def bob_tokenizer():
    words = "Bob is hungry so but he goes to the canteen closed for example".split()
    return WordTokenizer(words)


def test_ingest_samples(samples):
    assert len(samples) == 13
    assert {r.framework for r in samples} == {"PDTB", "GDTB", "RST", "SDRT"}
    assert relation_counts(samples)["Contingency.Cause.Result"] == 3


def test_round_trip_is_lossless(samples, tmp_path):
    write_cudr(tmp_path / "out.jsonl", samples)
    back = ingest_cudr(tmp_path / "out.jsonl")
    assert back == samples
    write_cudr(tmp_path / "again.jsonl", back)
    assert (tmp_path / "out.jsonl").read_bytes() == (tmp_path / "again.jsonl").read_bytes()


def test_pretokenized_fields_round_trip(tmp_path):
    rec = replace(BOB, tokens_clean=(1, 2, 3), tokens_corrupt=(1, 2, 4), tokens_arg2=(5,), tokens_arg2_cf=(6, 7))
    write_cudr(tmp_path / "t.jsonl", [rec])
    (back,) = ingest_cudr(tmp_path / "t.jsonl")
    assert back == rec and back.pretokenized
    pair = to_pair(back)
    assert (pair.clean, pair.corrupt, pair.answer, pair.distractor) == ((1, 2, 3), (1, 2, 4), 5, 6)
    swapped = to_pair(back, direction="counterfactual")
    assert (swapped.clean, swapped.answer) == ((1, 2, 4), 6)


def _write(tmp_path, lines):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")
    return p


@pytest.mark.parametrize(
    "mutate,needle,line",
    [
        (lambda d: d.pop("arg2"), "missing field", 1),
        (lambda d: d.update(bogus=1), "unknown field", 1),
        (lambda d: d.update(relation="Contingency.Nonsense"), "taxonomy", 1),
        (lambda d: d.update(conn_cf="so"), "conn and conn_cf", 1),
        (lambda d: d.update(framework="XYZ"), "taxonomy|framework", 1),
        (lambda d: d.update(tokens_clean=[1, -2]), "non-negative", 1),
    ],
)
def test_malformed_records(tmp_path, mutate, needle, line):
    d = BOB.to_json()
    mutate(d)
    with pytest.raises(ParseError, match=needle) as err:
        ingest_cudr(_write(tmp_path, [d]))
    assert err.value.line == line


def test_duplicate_ids_and_bad_json(tmp_path):
    d = BOB.to_json()
    with pytest.raises(ParseError, match="duplicate") as err:
        ingest_cudr(_write(tmp_path, [d, d]))
    assert err.value.line == 2
    with pytest.raises(ParseError, match="invalid JSON"):
        ingest_cudr(_write(tmp_path, [d, "{nope"]))


def test_header_count_mismatch(tmp_path):
    header = {"cudr_header": {"version": 1, "counts": {"Contingency.Cause.Result": 2}}}
    with pytest.raises(ParseError, match="header counts"):
        ingest_cudr(_write(tmp_path, [header, BOB.to_json()]))
    with pytest.raises(ParseError, match="first record"):
        ingest_cudr(_write(tmp_path, [BOB.to_json(), header]))


def test_taxonomy_lookups():
    table = connective_table()
    assert table["Contingency.Result"][0] == "so"
    assert table["Contingency.Reason"][0] == "because"
    assert all(len(cfs) == 5 and ori not in cfs for ori, cfs in table.values())
    assert in_taxonomy("Comparison", "PDTB")
    assert in_taxonomy("causal-result", "RST")
    assert not in_taxonomy("causal-result", "PDTB")
    assert pdtb_relation("Contingency.Cause.Result", "PDTB") == "Contingency.Result"
    assert pdtb_relation("Parallel", "SDRT") == "Expansion.Conjunction"
    with pytest.raises(TaskError):
        pdtb_relation("Nonsense", "RST")


def test_render_prompt_styles():
    prompt, ans, dis = render_prompt(BOB)
    assert (prompt, ans, dis) == ("Bob is hungry so", BOB.arg2, BOB.arg2_cf)
    prompt, ans, dis = render_prompt(BOB, "counterfactual", "full")
    assert prompt.startswith(INSTRUCTION) and prompt.endswith("Bob is hungry but")
    assert (ans, dis) == (BOB.arg2_cf, BOB.arg2)
    with pytest.raises(TaskError):
        render_prompt(BOB, style="fancy")


def test_to_pair_aligns_arg1_positions():
    tok = bob_tokenizer()
    rec = replace(BOB, conn="for example", conn_cf="so")
    # WordTokenizer ignores the leading space, so "for example" is two tokens
    pair = to_pair(rec, tok)
    assert len(pair.clean) == len(pair.corrupt)
    assert pair.meta["padded"] == 1
    n_arg1 = len(tok.encode(rec.arg1))
    assert pair.clean[:n_arg1] == pair.corrupt[:n_arg1]
    assert pair.corrupt[n_arg1] == tok.eot_id
    assert pair.clean[-1] == tok.encode("example")[0] and pair.corrupt[-1] == tok.encode("so")[0]


def test_directions_are_mirror_images():
    tok = bob_tokenizer()
    a = to_pair(BOB, tok)
    b = to_pair(BOB, tok, direction="counterfactual")
    assert (a.clean, a.corrupt, a.answer, a.distractor) == (b.corrupt, b.clean, b.distractor, b.answer)
    assert b.meta["relation"] == BOB.relation_cf


def test_shared_first_token_rejected():
    tok = bob_tokenizer()
    rec = replace(BOB, arg2_cf="he is closed")
    with pytest.raises(PairRejected):
        to_pair(rec, tok)
    pairs, rejected = pairs_from_records([BOB, rec], tok)
    assert (len(pairs), rejected) == (1, 1)


def test_gpt2_pairs_from_samples(samples, gpt2_files):
    from cudr.tokenizer import BPETokenizer

    tok = BPETokenizer.from_files(*gpt2_files)
    pairs, rejected = pairs_from_records(samples, tok)
    assert len(pairs) + rejected == len(samples)
    for p in pairs:
        assert len(p.clean) == len(p.corrupt)
        diff = [i for i, (x, y) in enumerate(zip(p.clean, p.corrupt)) if x != y]
        assert diff and min(diff) >= len(p.clean) - 1 - p.meta["padded"] - 1
    batch = make_batch(pairs, tok.eot_id)
    assert batch.clean.shape == batch.corrupt.shape


def test_make_batch_left_pads():
    tok = bob_tokenizer()
    short = to_pair(replace(BOB, arg1="Bob"), tok)
    long = to_pair(BOB, tok)
    batch = make_batch([short, long], tok.eot_id)
    assert batch.seq_len == len(long.clean)
    assert batch.clean[0, -1] == long.clean[-1]
    assert batch.pairs[0].meta["padded"] == 2


def test_metric_tensor_and_array_agree():
    logits = make_rng(0).normal(size=(3, 4, 6))
    batch, _ = gen_toy_cudr(make_rng(0), ToyCudrSpec.from_shifts(2, 3, {"x": 0, "y": 1}, [("R", "x", "y")]), n=3)
    ans = np.array([0, 1, 2])
    m = batch.metric()
    m.answers, m.distractors = ans, (ans + 1) % 6
    np.testing.assert_allclose(m(Tensor(logits)).data, m.value(logits))
    np.testing.assert_allclose(m.scaled(2.0).value(logits), 2 * m.value(logits))


def test_logit_diff_metric_single_pair():
    tok = bob_tokenizer()
    pair = to_pair(BOB, tok)
    logits = np.zeros((len(pair.clean), tok.vocab_size))
    logits[-1, pair.answer] = 3.0
    logits[-1, pair.distractor] = 1.0
    assert logit_diff_metric(logits, pair).tolist() == [2.0]


def test_ioi_prompts_are_balanced_and_well_formed():
    prompts = ioi_prompts(make_rng(0), 40)
    counts = Counter(p.answer for p in prompts)
    assert set(counts) == set(IOI_NAMES) and set(counts.values()) == {4}
    for p in prompts:
        assert p.clean.split(".")[0] == p.corrupt.split(".")[0]
        assert p.answer != p.distractor
        assert p.answer in p.clean.split(".")[0]


@pytest.mark.parametrize("feature", FEATURES)
def test_feature_prompts_change_target(feature):
    for p in feature_prompts(feature, make_rng(1), 20):
        assert p.clean != p.corrupt and p.answer != p.distractor


def test_feature_unknown():
    with pytest.raises(TaskError):
        feature_prompts("irony", make_rng(0), 1)


def test_toy_spec_counts_and_vocab():
    spec = default_toy_spec()
    batch, vocab = gen_toy_cudr(make_rng(0), spec)
    assert len(batch) == 64 and len(vocab) == 28
    distinct = {p.clean for p in batch.pairs} | {p.corrupt for p in batch.pairs}
    assert len(distinct) == 128
    assert all(p.answer != p.distractor for p in batch.pairs)
    X, Y = spec.training_set()
    assert X.shape == (128, 4) and len(set(map(tuple, X))) == 128


def test_hierarchy_spec_has_enough_relations():
    spec = hierarchy_toy_spec()
    assert len(spec.relations) >= 4
    assert all(in_taxonomy(r.label, "PDTB") for r in spec.relations)
    assert ToyCudrSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    one, _ = gen_toy_cudr(make_rng(0), spec, relation="Contingency.Reason")
    assert {p.meta["relation"] for p in one.pairs} == {"Contingency.Reason"}


@pytest.mark.parametrize(
    "shifts", [{"a": 0, "b": 0}, {"a": 0, "b": 8}],
)
def test_toy_spec_rejects_ambiguous_relations(shifts):
    with pytest.raises(TaskError):
        ToyCudrSpec.from_shifts(2, 4, shifts, [("R", "a", "b")])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_toy_pairs_differ_only_in_connective(n_s, n_p, shift, seed):
    shift = shift % n_p or 1
    spec = ToyCudrSpec.from_shifts(n_s, n_p, {"x": 0, "y": shift}, [("R", "x", "y")])
    batch, vocab = gen_toy_cudr(make_rng(seed), spec, n=10)
    for p in batch.pairs:
        assert p.clean[:-1] == p.corrupt[:-1] and p.clean[-1] != p.corrupt[-1]
        assert vocab[p.answer].startswith("A")


def test_batch_helpers():
    batch, _ = gen_toy_cudr(make_rng(0), default_toy_spec())
    s = batch.sample(make_rng(1), 10)
    assert len(s) == 10 and s.provenance["sample"]["replace"] is False
    assert batch.sample(make_rng(1), 100).provenance["sample"]["replace"] is True
    sw = batch.swapped()
    np.testing.assert_array_equal(sw.clean, batch.corrupt)
    np.testing.assert_array_equal(sw.answers, batch.distractors)
    assert len(batch.where(predicate=0)) == 8


def test_pair_file_round_trip(tmp_path):
    batch, vocab = gen_toy_cudr(make_rng(0), default_toy_spec())
    write_pairs(tmp_path / "p.jsonl", batch, vocab, {"toy_spec": default_toy_spec().to_json()})
    back, header = read_pairs(tmp_path / "p.jsonl")
    assert back.pairs == batch.pairs
    assert header["vocab"] == vocab
    (tmp_path / "bad.jsonl").write_text('{"x": 1}\n')
    with pytest.raises(ParseError):
        read_pairs(tmp_path / "bad.jsonl")
