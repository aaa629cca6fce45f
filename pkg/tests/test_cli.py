import json
import subprocess
import sys

import pydot
import pytest

from cudr import circuits as C
from cudr.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    model = d / "toy.safetensors"
    assert main(["train-toy", "--toy", "tiny", "--task", "toy-cudr-hierarchy", "--steps", "120", "--out", str(model)]) == EXIT_OK
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_train_writes_manifest(workdir):
    doc = json.loads((workdir / "toy.safetensors.manifest.json").read_text())
    assert doc["tool"] == "cudr" and doc["command"] == "train-toy"
    assert doc["accuracy"] > 0.5
    assert "time" not in json.dumps(doc).lower()


def test_discover_merge_overlap_dot(workdir, capsys):
    model = workdir / "toy.safetensors"
    rels = ["Contingency.Reason", "Contingency.Result", "Comparison.Contrast"]
    paths = []
    for i, rel in enumerate(rels):
        out = workdir / f"c{i}.circuit"
        assert run("discover", "--model", model, "--task", "toy-cudr-hierarchy", "--relation", rel, "--k", 30, "--samples", 16, "--out", out) == EXIT_OK
        c = C.load(out)
        assert len(c) == 30 and c.provenance["label"] == rel
        paths.append(out)
    merged = workdir / "merged.circuit"
    assert run("merge", *paths[:2], "--K", 30, "--label", "Contingency", "--out", merged) == EXIT_OK
    m = C.load(merged)
    assert m.level == "L2" and m.edge_set <= C.load(paths[0]).edge_set
    capsys.readouterr()
    assert run("overlap", paths[0], paths[0], "--k", 12) == EXIT_OK
    assert capsys.readouterr().out.strip() == "12"
    assert run("overlap", *paths, "--k", 10, "--out", workdir / "ov.tsv") == EXIT_OK
    rows = (workdir / "ov.tsv").read_text().splitlines()
    assert [r.split("\t")[i + 1] for i, r in enumerate(rows[1:])] == ["10"] * 3
    assert run("export-dot", merged, "--out", workdir / "m.dot") == EXIT_OK
    assert pydot.graph_from_dot_file(str(workdir / "m.dot"))


def test_sweep_and_random_baseline(workdir):
    model = workdir / "toy.safetensors"
    circ = workdir / "full.circuit"
    assert run("discover", "--model", model, "--task", "toy-cudr-hierarchy", "--k", 10**9, "--out", circ) == EXIT_OK
    assert len(C.load(circ)) == 46
    out = workdir / "curve.tsv"
    args = ["sweep", "--model", model, "--task", "toy-cudr-hierarchy", "--circuit", circ, "--grid", "5,20,100", "--repeats", 2, "--samples", 8]
    assert run(*args, "--out", out) == EXIT_OK
    lines = out.read_text().splitlines()
    assert [line.split("\t")[0] for line in lines[2:]] == ["5", "20", "46"]
    assert run(*args, "--random-baseline", "--out", workdir / "rand.tsv") == EXIT_OK


def test_rerun_is_byte_identical(workdir):
    model = workdir / "toy.safetensors"
    out = workdir / "again.circuit"
    assert run("discover", "--model", model, "--task", "toy-cudr-hierarchy", "--k", 15, "--seed", 3, "--out", out) == EXIT_OK
    first = out.read_bytes()
    out.unlink()
    assert run("rerun", str(out) + ".manifest.json") == EXIT_OK
    assert out.read_bytes() == first


def test_gen_tasks_and_pair_file_input(workdir):
    pairs = workdir / "pairs.jsonl"
    assert run("gen-tasks", "--task", "toy-cudr", "--out", pairs) == EXIT_OK
    assert len(pairs.read_text().splitlines()) == 65
    assert run("discover", "--toy", "tiny", "--task", pairs, "--k", 5, "--out", workdir / "p.circuit") == EXIT_OK


def test_gen_tasks_from_cudr_file(workdir, fixtures_dir, gpt2_files):
    out = workdir / "gpt2_pairs.jsonl"
    code = run(
        "gen-tasks", "--task", fixtures_dir / "cudr_samples.jsonl", "--vocab-file", gpt2_files[0],
        "--merges-file", gpt2_files[1], "--out", out,
    )
    assert code == EXIT_OK
    header = json.loads(out.read_text().splitlines()[0])
    assert header["cudr_pairs"] == 1


def test_bias_probe(workdir):
    model = workdir / "toy.safetensors"
    out = workdir / "bias.tsv"
    code = run(
        "bias-probe", "--model", model, "--task", "toy-cudr-hierarchy", "--relation", "Contingency.Result",
        "--circuit", workdir / "full.circuit", "--donor", "toy-cudr-hierarchy", "--grid", "5,46", "--samples", 8, "--out", out,
    )
    assert code == EXIT_OK
    assert out.read_text().splitlines()[0] == "k\tlogit_gap"


def test_exit_codes(workdir, tmp_path):
    assert run("bogus") == EXIT_USAGE
    assert run("discover", "--toy", "tiny", "--task", "toy-cudr") == EXIT_USAGE
    assert run("discover", "--toy", "tiny", "--task", tmp_path / "missing.jsonl", "--out", tmp_path / "x") == EXIT_DATA
    bad = tmp_path / "bad.circuit"
    bad.write_text("not a circuit\n")
    assert run("export-dot", bad) == EXIT_DATA
    assert run("discover", "--toy", "huge", "--task", "toy-cudr", "--out", tmp_path / "y") == EXIT_USAGE
    assert run("train-toy", "--toy", "tiny", "--steps", 0, "--min-accuracy", 0.99, "--out", tmp_path / "m.st") == EXIT_NUMERIC


def test_cross_model_merge_is_data_error(workdir, tmp_path):
    a = tmp_path / "a.circuit"
    b = tmp_path / "b.circuit"
    assert run("discover", "--toy", "tiny", "--seed", 1, "--task", "toy-cudr", "--k", 5, "--out", a) == EXIT_OK
    assert run("discover", "--toy", "tiny", "--seed", 2, "--task", "toy-cudr", "--k", 5, "--out", b) == EXIT_OK
    assert run("merge", a, b, "--out", tmp_path / "m.circuit") == EXIT_DATA


def test_data_dir_resolution(workdir, monkeypatch):
    assert run("discover", "--toy", "tiny", "--task", "toy-cudr", "--k", 5, "--out", workdir / "dd.circuit") == EXIT_OK
    monkeypatch.setenv("CUDR_DATA_DIR", str(workdir))
    monkeypatch.chdir(workdir.parent)
    assert run("export-dot", "dd.circuit", "--k", 3) == EXIT_OK


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "cudr.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("cudr ")
