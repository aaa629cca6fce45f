"""Time the compiled BPE merge loop against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--vocab encoder.json --merges vocab.bpe]

Without tokenizer files the BPE benchmark uses a synthetic merge table.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from cudr import _kernels_py

try:
    from cudr import _kernels as compiled
except ImportError:
    compiled = None


def synthetic_bpe(rng: np.random.Generator, n_base: int = 64, n_merges: int = 2000):
    merges: dict[int, int] = {}
    next_id = n_base
    for rank in range(n_merges):
        a, b = (int(x) for x in rng.integers(0, next_id, size=2))
        key = (a << 32) | b
        if key not in merges:
            merges[key] = (rank << 32) | next_id
            next_id += 1
    words = [list(rng.integers(0, n_base, size=int(rng.integers(2, 12)))) for _ in range(5000)]
    return [[int(s) for s in w] for w in words], merges


def real_bpe(vocab: str, merges_path: str, n_words: int = 5000):
    from cudr.tokenizer import BPETokenizer

    tok = BPETokenizer.from_files(vocab, merges_path)
    rng = np.random.default_rng(0)
    pieces = [w for w in tok.encoder if w.isalpha() and len(w) > 3]
    picked = rng.choice(len(pieces), size=n_words, replace=False)
    words = [[tok._symbols[ch] for ch in pieces[i]] for i in picked]
    return words, tok._merges


def bench(label: str, fn, repeat: int = 5, number: int = 1) -> float:
    best = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
    print(f"  {label:<10} {best * 1e3:9.3f} ms")
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vocab")
    ap.add_argument("--merges")
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels are not built; only the fallback can be timed", file=sys.stderr)

    if args.vocab and args.merges:
        words, merges = real_bpe(args.vocab, args.merges)
        source = "GPT-2 vocabulary"
    else:
        words, merges = synthetic_bpe(np.random.default_rng(0))
        source = "synthetic merges"
    print(f"bpe_merge: {len(words)} words, {source}")
    impls = [("python", _kernels_py)] + ([("compiled", compiled)] if compiled else [])
    times = {}
    outs = {}
    for name, mod in impls:
        times[name] = bench(name, lambda m=mod: [m.bpe_merge(w, merges) for w in words])
        outs[name] = [mod.bpe_merge(w, merges) for w in words]
    if compiled:
        assert outs["python"] == outs["compiled"], "backends disagree on bpe_merge"
        print(f"  speedup    {times['python'] / times['compiled']:9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
