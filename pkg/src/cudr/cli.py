"""``cudr`` command line: discover, sweep, merge, overlap, export-dot, gen-tasks, train-toy, oracle-check, bias-probe.

Exit codes: 0 success, 1 usage, 2 data/validation error, 3 numerical check failure.
Every command that writes ``--out`` also writes ``<out>.manifest.json``;
``cudr rerun <manifest>`` replays it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from importlib import metadata
from pathlib import Path

import numpy as np

from . import circuits as C
from . import eap, harness, patching, tasks, weights
from .model import (
    TOY_PRESETS,
    ConfigError,
    InputError,
    InterventionError,
    ModelConfig,
    Params,
    build_graph,
    forward,
    init_params,
)
from .tensor import ShapeError, make_rng

log = logging.getLogger("cudr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_DIR_ENV = "CUDR_DATA_DIR"
TOY_SPECS = {"default": tasks.default_toy_spec, "hierarchy": tasks.hierarchy_toy_spec}
TOY_TASKS = {"toy-cudr": "default", "toy-cudr-hierarchy": "hierarchy"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --- input resolution ------------------------------------------------------


def resolve_input(path: str) -> Path:
    """Existing path as given, else relative to ``$CUDR_DATA_DIR``."""
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(DATA_DIR_ENV)
    if base and not p.is_absolute() and (Path(base) / p).exists():
        return Path(base) / p
    raise DataError(f"input file not found: {path}")


def file_digest(path: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_tokenizer(args):
    from .tokenizer import BPETokenizer

    vocab, merges = getattr(args, "vocab_file", None), getattr(args, "merges_file", None)
    if vocab is None and merges is None and os.environ.get(DATA_DIR_ENV):
        vocab, merges = "encoder.json", "vocab.bpe"
    if vocab is None or merges is None:
        raise UsageError("this task needs a GPT-2 tokenizer: pass --vocab-file and --merges-file")
    return BPETokenizer.from_files(resolve_input(vocab), resolve_input(merges))


class ModelBundle:
    def __init__(self, params: Params, toy_spec: tasks.ToyCudrSpec | None, source: str):
        self.params = params
        self.toy_spec = toy_spec
        self.source = source


def toy_config(preset: str, spec: tasks.ToyCudrSpec) -> ModelConfig:
    if preset not in TOY_PRESETS:
        raise UsageError(f"unknown toy preset {preset!r}; choose from {sorted(TOY_PRESETS)}")
    return ModelConfig(vocab_size=len(spec.vocabulary()), max_seq=8, **TOY_PRESETS[preset])


def load_model(args, inputs: dict) -> ModelBundle:
    if getattr(args, "model", None):
        path = resolve_input(args.model)
        inputs[str(path)] = file_digest(path)
        try:
            _, meta = weights.read_tensors(path)
            config, params = weights.load_weights(path)
        except weights.LoadError as exc:
            raise DataError(str(exc)) from None
        spec = tasks.ToyCudrSpec.from_json(json.loads(meta["cudr_toy_spec"])) if "cudr_toy_spec" in meta else None
        return ModelBundle(params, spec, str(path))
    if getattr(args, "toy", None):
        spec = TOY_SPECS[args.toy_spec]()
        params = init_params(toy_config(args.toy, spec), make_rng(args.seed))
        return ModelBundle(params, spec, f"toy:{args.toy}:seed{args.seed}")
    raise UsageError("give a model with --model PATH or --toy PRESET")


def load_pool(args, bundle: ModelBundle | None, inputs: dict, task: str | None = None) -> tasks.TaskBatch:
    """Build the pair pool named by ``--task``."""
    task = task or args.task
    relation = getattr(args, "relation", None)
    if task in TOY_TASKS:
        spec = bundle.toy_spec if bundle is not None and bundle.toy_spec is not None else TOY_SPECS[TOY_TASKS[task]]()
        pool, _ = tasks.gen_toy_cudr(make_rng(args.seed), spec)
    elif task == "ioi" or task in tasks.FEATURES:
        tok = load_tokenizer(args)
        n = max(args.samples, 64)
        gen = tasks.gen_ioi(make_rng(args.seed), n, tok) if task == "ioi" else tasks.gen_feature_task(task, make_rng(args.seed), n, tok)
        pool = gen
    else:
        path = resolve_input(task)
        inputs[str(path)] = file_digest(path)
        with open(path, encoding="utf-8") as f:
            first = f.readline()
        if '"cudr_pairs"' in first:
            pool, _ = tasks.read_pairs(path)
        else:
            records = tasks.ingest_cudr(path)
            tok = None if all(r.pretokenized for r in records) else load_tokenizer(args)
            pairs, rejected = tasks.pairs_from_records(records, tok, args.direction, args.prompt_style)
            if rejected:
                log.warning("%d record(s) rejected while building pairs", rejected)
            if not pairs:
                raise DataError(f"no usable pairs in {path}")
            pad = tok.eot_id if tok is not None else 0
            pool = tasks.make_batch(pairs, pad, {"source": str(path), "rejected": rejected})
    if relation:
        pool = pool.where(relation=relation)
    if getattr(args, "reverse", False):
        pool = pool.swapped()
    return pool


# --- manifests -------------------------------------------------------------


def manifest_path(out: str) -> str:
    return f"{out}.manifest.json"


def write_manifest(args, argv: list[str], inputs: dict, outputs: list[str], extra: dict | None = None) -> None:
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "log_level")}
    doc = {
        "tool": "cudr",
        "version": _version(),
        "command": args.command,
        "argv": argv,
        "options": options,
        "inputs": inputs,
        "outputs": {o: file_digest(Path(o)) for o in outputs},
    }
    doc.update(extra or {})
    with open(manifest_path(args.out), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


# --- commands --------------------------------------------------------------


def cmd_discover(args, argv) -> int:
    inputs: dict = {}
    bundle = load_model(args, inputs)
    pool = load_pool(args, bundle, inputs)
    batch = pool.sample(make_rng(args.seed), args.samples)
    scores = eap.eap_scores(bundle.params, batch, per_position=args.per_position)
    label = args.label or args.relation or args.task
    circuit = C.top_k(
        scores, args.k, level=args.level, provenance={"label": label, "task": args.task, "seed": args.seed, "patch_mode": args.patch_mode}
    )
    C.save(circuit, args.out)
    outputs = [args.out]
    if args.ranking_out:
        C.save(C.ranking(scores, level=args.level, provenance={"label": label}), args.ranking_out)
        outputs.append(args.ranking_out)
    print(f"wrote {len(circuit)} edges to {args.out}")
    write_manifest(args, argv, inputs, outputs, {"fingerprint": str(bundle.params.fingerprint)})
    return EXIT_OK


def _parse_grid(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad --grid {text!r}; expected comma-separated integers") from None


def cmd_sweep(args, argv) -> int:
    inputs: dict = {}
    bundle = load_model(args, inputs)
    cpath = resolve_input(args.circuit)
    inputs[str(cpath)] = file_digest(cpath)
    circuit = C.load(cpath)
    pool = load_pool(args, bundle, inputs)
    seeds = tuple(range(args.seed, args.seed + args.repeats))
    cfg = harness.ExperimentConfig(seeds, args.samples, _parse_grid(args.grid), args.patch_mode, args.prompt_style)
    graph = build_graph(bundle.params.config)
    if args.random_baseline:
        curves = []
        for s in seeds:
            rb = harness.random_baseline(graph, make_rng(s), bundle.params.fingerprint)
            curves.append(harness.faithfulness_sweep(bundle.params, rb, pool.sample(make_rng(s), cfg.sample_size), cfg, graph, s))
        curve = harness.FaithfulnessCurve.stack(curves)
    else:
        curve = harness.repeated_sweep(bundle.params, circuit, pool, cfg, graph)
    text = harness.curve_tsv(curve, {"circuit": str(cpath), "task": args.task, "random_baseline": args.random_baseline})
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    sys.stdout.write(text)
    write_manifest(args, argv, inputs, [args.out], {"fingerprint": str(bundle.params.fingerprint)})
    return EXIT_OK


def _load_circuits(paths, inputs) -> list[C.Circuit]:
    out = []
    for p in paths:
        path = resolve_input(p)
        inputs[str(path)] = file_digest(path)
        out.append(C.load(path))
    return out


def cmd_merge(args, argv) -> int:
    inputs: dict = {}
    children = _load_circuits(args.circuits, inputs)
    merged = C.merge(children, args.K, args.mode, level=args.level, label=args.label)
    if not len(merged):
        print("warning: merged circuit is empty", file=sys.stderr)
    C.save(merged, args.out)
    print(f"wrote {len(merged)} edges ({merged.level}) to {args.out}")
    write_manifest(args, argv, inputs, [args.out])
    return EXIT_OK


def cmd_overlap(args, argv) -> int:
    inputs: dict = {}
    cs = _load_circuits(args.circuits, inputs)
    if len(cs) == 2 and not args.out:
        print(C.overlap(cs[0], cs[1], args.k))
        return EXIT_OK
    labels = [c.provenance.get("label", Path(p).stem) for c, p in zip(cs, args.circuits)]
    seen: dict[str, int] = {}
    for i, lab in enumerate(labels):
        if lab in seen:
            labels[i] = f"{lab}#{i}"
        seen[lab] = i
    m = C.overlap_matrix(dict(zip(labels, cs)), args.k)
    text = m.to_tsv()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        write_manifest(args, argv, inputs, [args.out])
    return EXIT_OK


def cmd_export_dot(args, argv) -> int:
    inputs: dict = {}
    (circuit,) = _load_circuits([args.circuit], inputs)
    text = C.to_dot(circuit, args.k, name=circuit.provenance.get("label", "circuit"))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        write_manifest(args, argv, inputs, [args.out])
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_tasks(args, argv) -> int:
    inputs: dict = {}
    vocab = None
    extra = {}
    if args.task in TOY_TASKS:
        spec = TOY_SPECS[TOY_TASKS[args.task]]()
        batch, vocab = tasks.gen_toy_cudr(make_rng(args.seed), spec, args.n, args.relation)
        extra["toy_spec"] = spec.to_json()
    elif args.task == "ioi" or args.task in tasks.FEATURES:
        tok = load_tokenizer(args)
        if args.task == "ioi":
            batch = tasks.gen_ioi(make_rng(args.seed), args.n or 32, tok)
        else:
            batch = tasks.gen_feature_task(args.task, make_rng(args.seed), args.n or 32, tok)
    else:
        args.samples = args.n or 0
        batch = load_pool(args, None, inputs)
    tasks.write_pairs(args.out, batch, vocab, extra)
    print(f"wrote {len(batch)} pairs to {args.out}")
    write_manifest(args, argv, inputs, [args.out])
    return EXIT_OK


def cmd_train_toy(args, argv) -> int:
    spec = TOY_SPECS[TOY_TASKS[args.task]]()
    config = toy_config(args.toy, spec)
    X, Y = spec.training_set()
    pool, vocab = tasks.gen_toy_cudr(make_rng(args.seed), spec)
    opt = harness.AdamSpec(lr=args.lr, weight_decay=args.weight_decay)
    result = harness.train_toy(config, X, Y, args.steps, make_rng(args.seed), opt, eval_batch=pool)
    meta = {
        "cudr_toy_spec": json.dumps(spec.to_json(), sort_keys=True),
        "cudr_vocab": json.dumps(vocab),
        "cudr_config": json.dumps(config.to_dict(), sort_keys=True),
    }
    weights.save_weights(args.out, result.params, meta)
    final = result.losses[-1] if result.losses else float("nan")
    print(f"steps={args.steps} loss={final:.6f} accuracy={result.accuracy:.4f} logit_diff={result.logit_diff:.4f}")
    print(f"fingerprint {result.params.fingerprint}")
    write_manifest(
        args, argv, {}, [args.out],
        {"fingerprint": str(result.params.fingerprint), "accuracy": result.accuracy, "final_loss": final},
    )
    if args.min_accuracy is not None and not result.accuracy >= args.min_accuracy:
        print(f"FAIL accuracy {result.accuracy:.4f} < {args.min_accuracy}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_oracle_check(args, argv) -> int:
    from . import oracle

    spec = TOY_SPECS[args.toy_spec]()
    report = oracle.run_checks(spec, args.toy, seed=args.seed, steps=args.steps, coords_per_param=args.coords)
    ok = True
    for line in report:
        print(line.render())
        ok &= line.passed
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("\n".join(line.render() for line in report) + "\n")
        write_manifest(args, argv, {}, [args.out], {"passed": ok})
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bias_probe(args, argv) -> int:
    inputs: dict = {}
    bundle = load_model(args, inputs)
    (circuit,) = _load_circuits([args.circuit], inputs)
    batch = load_pool(args, bundle, inputs).sample(make_rng(args.seed), args.samples)
    donor = load_pool(args, bundle, inputs, task=args.donor).sample(make_rng(args.seed + 1), args.samples)
    if donor.seq_len != batch.seq_len:
        raise DataError(f"donor sequence length {donor.seq_len} differs from input length {batch.seq_len}")
    ks = [0] + [k for k in _parse_grid(args.grid)]
    rows = harness.bias_probe(bundle.params, batch, circuit, donor, ks, batch.metric())
    donor_gap = float(np.mean(batch.metric().value(forward(bundle.params, donor.clean)[0])))
    lines = ["k\tlogit_gap", *(f"{k}\t{v!r}" for k, v in rows), f"# donor\t{donor_gap!r}"]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    write_manifest(args, argv, inputs, [args.out], {"fingerprint": str(bundle.params.fingerprint)})
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    path = resolve_input(args.manifest)
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("tool") != "cudr" or "argv" not in doc:
        raise DataError(f"{path} is not a cudr manifest")
    print("rerunning: cudr " + " ".join(doc["argv"]))
    return main(doc["argv"])


# --- parser ----------------------------------------------------------------


def _add_model(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model", help="safetensors weights file")
    g.add_argument("--toy", help=f"randomly initialized toy model preset ({', '.join(TOY_PRESETS)})")
    p.add_argument("--toy-spec", default="default", choices=sorted(TOY_SPECS), help="toy language for --toy models")


def _add_task(p, required=True):
    p.add_argument("--task", required=required, help="toy-cudr, toy-cudr-hierarchy, ioi, a feature name, or a pair/CuDR file")
    p.add_argument("--relation", help="keep only pairs with this relation label")
    p.add_argument("--direction", default="original", choices=["original", "counterfactual"])
    p.add_argument("--prompt-style", default="minimal", choices=["minimal", "full"])
    p.add_argument("--reverse", action="store_true", help="swap clean and corrupt (noising direction)")
    p.add_argument("--vocab-file", help="GPT-2 encoder.json")
    p.add_argument("--merges-file", help="GPT-2 vocab.bpe")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cudr", description="Edge-level circuit discovery on contrastive tasks.")
    parser.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=f"cudr {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="EAP scores -> top-k circuit file")
    _add_model(p)
    _add_task(p)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument(
        "--patch-mode", default="batch-mean", choices=["per-sample", "batch-mean"],
        help="evaluation mode recorded with the circuit",
    )
    p.add_argument("--per-position", action="store_true", help="divide scores by sequence length")
    p.add_argument("--level", default="L3", choices=list(C.LEVELS))
    p.add_argument("--label")
    p.add_argument("--ranking-out", help="also save every edge ranked by score")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("sweep", help="faithfulness curve of a circuit")
    _add_model(p)
    _add_task(p)
    p.add_argument("--circuit", required=True)
    p.add_argument("--grid", default=",".join(map(str, harness.DEFAULT_GRID)))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--patch-mode", default="batch-mean", choices=["per-sample", "batch-mean"])
    p.add_argument("--random-baseline", action="store_true", help="evaluate random circuits instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="merge circuits (top-K intersection by default)")
    p.add_argument("circuits", nargs="+")
    p.add_argument("--K", type=int, default=1000)
    p.add_argument("--mode", default="intersection", choices=list(C.MERGE_MODES))
    p.add_argument("--level", choices=list(C.LEVELS))
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("overlap", help="top-k edge overlap of two or more circuits")
    p.add_argument("circuits", nargs="+")
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("export-dot", help="write a circuit as a DOT digraph")
    p.add_argument("circuit")
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("gen-tasks", help="write a pre-tokenized pair file")
    _add_task(p)
    p.add_argument("--n", type=int, help="number of pairs (toy default: every combination)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train-toy", help="train a toy model on a toy CuDR language")
    p.add_argument("--toy", default="default", help=f"preset ({', '.join(TOY_PRESETS)})")
    p.add_argument("--task", default="toy-cudr", choices=sorted(TOY_TASKS))
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-accuracy", type=float, help="exit 3 if final accuracy is below this")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("oracle-check", help="gradient and EAP-vs-exact checks on a trained toy model")
    p.add_argument("--toy", default="tiny", help=f"preset ({', '.join(TOY_PRESETS)})")
    p.add_argument("--toy-spec", default="default", choices=sorted(TOY_SPECS))
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--coords", type=int, default=24, help="finite-difference coordinates per parameter tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("bias-probe", help="overwrite circuit edges with donor values along k")
    _add_model(p)
    _add_task(p)
    p.add_argument("--circuit", required=True)
    p.add_argument("--donor", required=True, help="task source for donor inputs")
    p.add_argument("--grid", default="10,20,50,100,200")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bias_probe)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        with _thread_limit(args.threads):
            code = args.func(args, argv)
    except UsageError as exc:
        print(f"cudr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except harness.NumericalCheckError as exc:
        print(f"cudr: numerical check failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        DataError, tasks.TaskError, C.CircuitError, weights.LoadError, patching.ProvenanceError, eap.ScoreError,
        ConfigError, InputError, InterventionError, ShapeError, KeyError, ValueError, OSError,
    ) as exc:
        print(f"cudr: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
