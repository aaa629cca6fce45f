"""Experiments: faithfulness sweeps, random baselines, cross-task evaluation, toy training and the bias probe."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .circuits import Circuit, ranking
from .eap import EdgeScores
from .model import ConfigError, ModelConfig, Params, PatchableGraph, build_graph, forward, init_params, run_tensors
from .patching import PatchValueMode, ablate_circuit, build_clean_cache, check_provenance, run_with_circuit
from .tasks import LogitDiff, TaskBatch
from .tensor import Tape, Tensor, make_rng

log = logging.getLogger(__name__)

DEFAULT_GRID = (10, 20, 50, 100, 200, 500, 1000)
MAX_TOY_LAYERS = 6
MAX_TOY_WIDTH = 128
UNDEFINED_BELOW = 1e-6


class NumericalCheckError(RuntimeError):
    """An identity that must hold numerically did not."""


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sample_size: int = 32
    grid: tuple[int, ...] = DEFAULT_GRID
    mode: str = PatchValueMode.BATCH_MEAN.value
    prompt_style: str = "minimal"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "grid", tuple(int(k) for k in self.grid))
        if not self.grid or any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError(f"k grid must be non-empty and strictly increasing, got {self.grid}")
        if self.grid[0] < 1:
            raise ValueError("k grid values must be >= 1")
        if self.sample_size < 1:
            raise ValueError("sample size must be >= 1")
        PatchValueMode.parse(self.mode)

    @property
    def patch_mode(self) -> PatchValueMode:
        return PatchValueMode.parse(self.mode)

    def clamped_grid(self, n_edges: int) -> tuple[int, ...]:
        """Grid values above ``n_edges`` collapse to ``n_edges``."""
        out = []
        for k in self.grid:
            k = min(k, n_edges)
            if not out or k > out[-1]:
                out.append(k)
        return tuple(out)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FaithfulnessCurve:
    """``F[r, i]`` is the normalized faithfulness of repeat ``r`` at ``ks[i]``."""

    ks: tuple[int, ...]
    F: np.ndarray
    delta_full: np.ndarray
    delta_cf: np.ndarray
    seeds: tuple[int, ...] = ()
    n_edges: int = 0
    config: dict = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return bool(np.all(np.abs(self.delta_full) >= UNDEFINED_BELOW))

    @property
    def f0(self) -> np.ndarray:
        return self.delta_cf / self.delta_full

    def mean(self) -> np.ndarray:
        return self.F.mean(axis=0)

    def median(self) -> np.ndarray:
        return np.median(self.F, axis=0)

    def std(self) -> np.ndarray:
        return self.F.std(axis=0, ddof=1) if len(self.F) > 1 else np.zeros(len(self.ks))

    def at(self, k: int) -> np.ndarray:
        return self.F[:, self.ks.index(k)]

    @classmethod
    def stack(cls, curves: Sequence["FaithfulnessCurve"]) -> "FaithfulnessCurve":
        ks = curves[0].ks
        if any(c.ks != ks for c in curves):
            raise ValueError("cannot stack curves over different k grids")
        return cls(
            ks,
            np.vstack([c.F for c in curves]),
            np.concatenate([c.delta_full for c in curves]),
            np.concatenate([c.delta_cf for c in curves]),
            tuple(s for c in curves for s in c.seeds),
            curves[0].n_edges,
            curves[0].config,
        )


def _as_ranking(scores: EdgeScores | Circuit) -> Circuit:
    return scores if isinstance(scores, Circuit) else ranking(scores)


def faithfulness_sweep(
    params: Params,
    scores: EdgeScores | Circuit,
    batch: TaskBatch,
    cfg: ExperimentConfig = ExperimentConfig(),
    graph: PatchableGraph | None = None,
    seed: int = 0,
    check: bool = True,
) -> FaithfulnessCurve:
    """``F(k) = L_patch(top-k) / L_full`` on one evaluation batch.

    The endpoints are always evaluated too: ``F(0)`` must equal
    ``L_cf / L_full`` and, in per-sample mode, ``F(|E|)`` must equal 1.
    """
    graph = graph or build_graph(params.config)
    order = _as_ranking(scores)
    check_provenance(params, order)
    metric = batch.metric()
    mode = cfg.patch_mode
    ks = cfg.clamped_grid(len(order))
    cache = build_clean_cache(params, batch, mode, graph)
    clean_logits, _ = forward(params, batch.clean, graph)
    d_full = float(np.mean(metric.value(clean_logits)))
    corrupt_logits, _ = forward(params, batch.corrupt, graph)
    d_cf = float(np.mean(metric.value(corrupt_logits)))
    defined = abs(d_full) >= UNDEFINED_BELOW
    if not defined:
        log.warning("clean logit difference %.3g is too small; faithfulness undefined", d_full)

    def F(k: int) -> float:
        patched = run_with_circuit(params, batch, order.head(k), metric, mode, graph, cache)
        return patched / d_full if defined else math.nan

    values = np.array([[F(k) for k in ks]])
    if check and defined:
        f0 = F(0)
        if abs(f0 - d_cf / d_full) > 1e-5 * max(1.0, abs(d_cf / d_full)):
            raise NumericalCheckError(f"F(0) = {f0!r} but L_cf/L_full = {d_cf / d_full!r}")
        if mode is PatchValueMode.PER_SAMPLE and len(order) == graph.n_edges:
            f_all = F(graph.n_edges)
            if abs(f_all - 1.0) > 1e-4:
                raise NumericalCheckError(f"F(|E|) = {f_all!r}, expected 1")
    return FaithfulnessCurve(ks, values, np.array([d_full]), np.array([d_cf]), (seed,), graph.n_edges, cfg.to_json())


def repeated_sweep(
    params: Params,
    scores: EdgeScores | Circuit,
    pool: TaskBatch,
    cfg: ExperimentConfig = ExperimentConfig(),
    graph: PatchableGraph | None = None,
) -> FaithfulnessCurve:
    """One sweep per seed, each on ``cfg.sample_size`` pairs drawn from ``pool``."""
    curves = [
        faithfulness_sweep(params, scores, pool.sample(make_rng(s), cfg.sample_size), cfg, graph, seed=s)
        for s in cfg.seeds
    ]
    return FaithfulnessCurve.stack(curves)


def cross_eval(
    circuit: Circuit, batch: TaskBatch, params: Params, cfg: ExperimentConfig = ExperimentConfig(), graph=None
) -> FaithfulnessCurve:
    """Faithfulness of a circuit found on one task, evaluated on another task's batch."""
    return faithfulness_sweep(params, circuit, batch, cfg, graph)


def random_baseline(graph: PatchableGraph, rng: np.random.Generator, fingerprint=None) -> EdgeScores:
    """Scores are a random permutation of ranks, so every top-k is a uniform sample of k edges."""
    ranks = rng.permutation(graph.n_edges).astype(np.float64) + 1.0
    return EdgeScores(graph, ranks, 1, fingerprint, {"generator": "random"})


def correlate(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson r; ``nan`` (with a warning) when either input is constant."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        log.warning("correlation undefined: zero variance")
        return math.nan
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# --- toy training ----------------------------------------------------------


@dataclass(frozen=True)
class AdamSpec:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainResult:
    params: Params
    losses: list[float]
    accuracy: float
    logit_diff: float


def check_toy_scale(config: ModelConfig) -> None:
    if config.n_layer > MAX_TOY_LAYERS or config.d_model > MAX_TOY_WIDTH:
        raise ConfigError(
            f"training is limited to toy models (n_layer <= {MAX_TOY_LAYERS}, d_model <= {MAX_TOY_WIDTH}); got {config.summary()}"
        )


def choice_accuracy(params: Params, batch: TaskBatch, graph=None) -> tuple[float, float]:
    """Fraction of clean prompts where the answer outscores the distractor, and the mean logit difference."""
    logits, _ = forward(params, batch.clean, graph)
    ld = batch.metric().value(logits)
    return float(np.mean(ld > 0)), float(np.mean(ld))


def train_toy(
    config: ModelConfig,
    tokens: np.ndarray,
    targets: np.ndarray,
    steps: int,
    rng: np.random.Generator,
    optimizer: AdamSpec = AdamSpec(),
    eval_batch: TaskBatch | None = None,
    init: Params | None = None,
    init_std: float = 0.1,
) -> TrainResult:
    """Full-batch next-token cross-entropy at the final position, optimized with Adam."""
    check_toy_scale(config)
    params = init if init is not None else init_params(config, rng, std=init_std)
    if params.config != config:
        raise ConfigError("initial parameters do not match the config")
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    names = sorted(params)
    values = {k: params[k].astype(np.float64) for k in names}
    m = {k: np.zeros_like(v) for k, v in values.items()}
    v2 = {k: np.zeros_like(v) for k, v in values.items()}
    graph = build_graph(config)
    rows = np.arange(len(targets))
    losses = []
    o = optimizer
    for step in range(1, steps + 1):
        with Tape() as tape:
            leaves = {k: Tensor(values[k].astype(params.dtype), requires_grad=True) for k in names}
            logits = run_tensors(params, leaves, tokens, graph)
            logp = T.log_softmax(T.getitem(logits, (slice(None), -1)), axis=-1)
            loss = T.mul(T.mean(T.getitem(logp, (rows, targets))), -1.0)
        T.backward(loss, tape, leaves=list(leaves.values()))
        losses.append(float(loss.data))
        for k in names:
            g = leaves[k].grad
            if o.weight_decay:
                g = g + o.weight_decay * values[k]
            m[k] = o.beta1 * m[k] + (1 - o.beta1) * g
            v2[k] = o.beta2 * v2[k] + (1 - o.beta2) * g * g
            mhat = m[k] / (1 - o.beta1**step)
            vhat = v2[k] / (1 - o.beta2**step)
            values[k] = values[k] - o.lr * mhat / (np.sqrt(vhat) + o.eps)
    trained = params.with_arrays({k: values[k].astype(params.dtype) for k in names}) if steps else params
    acc, ld = choice_accuracy(trained, eval_batch, graph) if eval_batch is not None else (math.nan, math.nan)
    return TrainResult(trained, losses, acc, ld)


# --- bias probe ------------------------------------------------------------


def bias_probe(
    params: Params,
    batch: TaskBatch | np.ndarray,
    circuit: Circuit,
    donor: TaskBatch | np.ndarray,
    ks: Sequence[int],
    metric: LogitDiff,
    graph: PatchableGraph | None = None,
) -> list[tuple[int, float]]:
    """Answer-logit gap on ``batch`` after overwriting the top-k circuit edges with donor-run values, per k."""
    graph = graph or build_graph(params.config)
    donor_tokens = donor.clean if isinstance(donor, TaskBatch) else np.asarray(donor)
    _, donor_cache = forward(params, donor_tokens, graph)
    out = []
    for k in ks:
        sub = circuit.head(min(k, len(circuit)))
        out.append((int(k), ablate_circuit(params, batch, sub, donor, metric, graph, donor_cache)))
    return out


# --- reports ---------------------------------------------------------------


def curve_tsv(curve: FaithfulnessCurve, extra: dict | None = None) -> str:
    header = dict(curve.config)
    header.update(extra or {})
    header["n_edges"] = curve.n_edges
    header["delta_full"] = curve.delta_full.tolist()
    header["delta_cf"] = curve.delta_cf.tolist()
    lines = ["# " + json.dumps(header, sort_keys=True)]
    seeds = curve.seeds or tuple(range(len(curve.F)))
    lines.append("\t".join(["k"] + [f"seed_{s}" for s in seeds] + ["mean", "stdev"]))
    mean, std = curve.mean(), curve.std()
    for i, k in enumerate(curve.ks):
        cells = [str(k)] + [repr(float(v)) for v in curve.F[:, i]] + [repr(float(mean[i])), repr(float(std[i]))]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_curve(path: str | os.PathLike, curve: FaithfulnessCurve, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(curve_tsv(curve, extra))
