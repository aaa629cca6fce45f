from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from cudr.harness import train_toy
from cudr.model import TOY_PRESETS, ModelConfig, init_params
from cudr.tasks import default_toy_spec, gen_toy_cudr
from cudr.tensor import make_rng
from oracles import randomize_affine

FIXTURES = Path(__file__).parent / "fixtures"
TOKENIZER_DIRS = [
    os.environ.get("CUDR_TOKENIZER_DIR", ""),
    "/usr/local/lib/python3.10/dist-packages/gpt3_tokenizer/data",
]


def toy_config(preset: str, vocab_size: int, max_seq: int = 8) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, max_seq=max_seq, **TOY_PRESETS[preset])


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def toy_spec():
    return default_toy_spec()


@pytest.fixture(scope="session")
def toy_pool(toy_spec):
    batch, vocab = gen_toy_cudr(make_rng(0), toy_spec)
    return batch, vocab


@pytest.fixture(scope="session")
def random_tiny(toy_pool):
    _, vocab = toy_pool
    return randomize_affine(init_params(toy_config("tiny", len(vocab)), make_rng(3), std=0.3, dtype=np.float64), 3)


@pytest.fixture(scope="session")
def trained_tiny(toy_spec, toy_pool):
    pool, vocab = toy_pool
    X, Y = toy_spec.training_set()
    return train_toy(toy_config("tiny", len(vocab)), X, Y, 150, make_rng(0), eval_batch=pool)


@pytest.fixture(scope="session")
def trained_default(toy_spec, toy_pool):
    pool, vocab = toy_pool
    X, Y = toy_spec.training_set()
    return train_toy(toy_config("default", len(vocab)), X, Y, 150, make_rng(0), eval_batch=pool)


@pytest.fixture(scope="session")
def gpt2_files():
    for d in TOKENIZER_DIRS:
        if d and (Path(d) / "encoder.json").exists() and (Path(d) / "vocab.bpe").exists():
            return Path(d) / "encoder.json", Path(d) / "vocab.bpe"
    pytest.skip("GPT-2 encoder.json / vocab.bpe not available")


_CRITERIA: dict[str, str] = {}


@pytest.fixture
def report(capsys):
    """Record one acceptance line; the caller asserts afterwards."""

    def _report(key: str, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  [{key}] {title}: {detail}"
        _CRITERIA[key] = line
        with capsys.disabled():
            print("\n" + line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(_CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit()) or 0), k)):
            terminalreporter.write_line(_CRITERIA[key])
