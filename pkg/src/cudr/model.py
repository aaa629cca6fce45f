"""GPT-2 style decoder with an explicit, patchable residual graph.

Every output-producing node (the embedding "resid start", each attention
head, each MLP) writes an additive contribution to the residual stream.  Every
destination channel (an attention head's Q, K or V input, an MLP input, and
the final "resid end" input) reads the sum of all upstream contributions plus
a constant stream of attention output biases.  An edge is a (source node,
destination channel) pair; patching an edge swaps that single summand.

Caches store per-node outputs stacked as ``[n_src, batch, seq, d_model]``;
gradient caches store per-channel input gradients as
``[n_channels, batch, seq, d_model]``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int
    n_head: int
    d_model: int
    vocab_size: int
    max_seq: int = 64
    d_mlp: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)
        for name in ("n_layer", "n_head", "d_model", "vocab_size", "max_seq", "d_mlp"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_head={self.n_head}")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head

    def summary(self) -> str:
        return (
            f"L{self.n_layer}-H{self.n_head}-D{self.d_model}-M{self.d_mlp}"
            f"-V{self.vocab_size}-S{self.max_seq}"
        )

    def to_dict(self) -> dict:
        return {
            "n_layer": self.n_layer,
            "n_head": self.n_head,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "d_mlp": self.d_mlp,
            "ln_eps": self.ln_eps,
        }


TOY_PRESETS = {
    "tiny": dict(n_layer=2, n_head=2, d_model=16),
    "default": dict(n_layer=3, n_head=4, d_model=32),
}

# --- graph -----------------------------------------------------------------

RESID_START = "resid_start"
ATTN = "attn"
MLP = "mlp"
RESID_END = "resid_end"

CHANNEL_ORDER = {"Q": 0, "K": 1, "V": 2, "QKV": 3, "In": 4}


@dataclass(frozen=True, order=False)
class NodeId:
    kind: str
    layer: int = -1
    head: int = -1

    @property
    def sort_key(self) -> tuple:
        if self.kind == RESID_START:
            return (-1, 0, 0)
        if self.kind == ATTN:
            return (self.layer, 0, self.head)
        if self.kind == MLP:
            return (self.layer, 1, 0)
        return (1 << 30, 0, 0)

    def __str__(self) -> str:
        if self.kind == RESID_START:
            return "resid_start"
        if self.kind == ATTN:
            return f"a{self.layer}.{self.head}"
        if self.kind == MLP:
            return f"m{self.layer}"
        return "resid_end"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text == "resid_start":
            return resid_start()
        if text == "resid_end":
            return cls(RESID_END)
        try:
            if text.startswith("a"):
                layer, head = text[1:].split(".")
                return attn(int(layer), int(head))
            if text.startswith("m"):
                return mlp(int(text[1:]))
        except ValueError:
            pass
        raise ValueError(f"unrecognised node name {text!r}")


def resid_start() -> NodeId:
    return NodeId(RESID_START)


def attn(layer: int, head: int) -> NodeId:
    return NodeId(ATTN, layer, head)


def mlp(layer: int) -> NodeId:
    return NodeId(MLP, layer)


def resid_end(n_layer: int | None = None) -> NodeId:
    # layer-free so that parsed and constructed ids compare equal
    return NodeId(RESID_END)


@dataclass(frozen=True)
class EdgeId:
    src: NodeId
    dst: NodeId
    channel: str

    @property
    def sort_key(self) -> tuple:
        return (self.dst.sort_key, CHANNEL_ORDER[self.channel], self.src.sort_key)

    def __str__(self) -> str:
        return f"{self.src}->{self.dst}[{self.channel}]"


def node_layer(node: NodeId, n_layer: int) -> int:
    """Layer index used for histograms: resid start -1, resid end n_layer."""
    if node.kind == RESID_START:
        return -1
    if node.kind == RESID_END:
        return n_layer
    return node.layer


class PatchableGraph:
    """Nodes, destination channels and edges of a config's residual graph.

    ``split_qkv=False`` merges each head's Q/K/V inputs into one channel
    (``QKV``); an edge into it patches all three inputs at once.
    """

    def __init__(self, config: ModelConfig, split_qkv: bool = True):
        self.config = config
        self.split_qkv = split_qkv
        L, H = config.n_layer, config.n_head
        self.src_nodes: list[NodeId] = [resid_start()]
        for l in range(L):
            self.src_nodes += [attn(l, h) for h in range(H)]
            self.src_nodes.append(mlp(l))
        self.nodes: list[NodeId] = self.src_nodes + [resid_end(L)]
        self.src_index = {n: i for i, n in enumerate(self.src_nodes)}

        attn_channels = ("Q", "K", "V") if split_qkv else ("QKV",)
        self.channels: list[tuple[NodeId, str]] = []
        n_upstream: list[int] = []
        for l in range(L):
            first_head_src = 1 + l * (H + 1)
            for h in range(H):
                for c in attn_channels:
                    self.channels.append((attn(l, h), c))
                    n_upstream.append(first_head_src)
            self.channels.append((mlp(l), "In"))
            n_upstream.append(first_head_src + H)
        self.channels.append((resid_end(L), "In"))
        n_upstream.append(len(self.src_nodes))
        self.channel_index = {c: i for i, c in enumerate(self.channels)}
        self.n_upstream = np.array(n_upstream, dtype=np.int64)

        srcs, chans = [], []
        for ci, n in enumerate(n_upstream):
            srcs.extend(range(n))
            chans.extend([ci] * n)
        self.edge_src = np.array(srcs, dtype=np.int64)
        self.edge_channel = np.array(chans, dtype=np.int64)
        self.edges: list[EdgeId] = [
            EdgeId(self.src_nodes[s], self.channels[c][0], self.channels[c][1]) for s, c in zip(srcs, chans)
        ]
        self.edge_index = {e: i for i, e in enumerate(self.edges)}

    @property
    def convention(self) -> str:
        return "qkv-split" if self.split_qkv else "qkv-merged"

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def incoming(self, dst: NodeId, channel: str) -> list[EdgeId]:
        ci = self.channel_index[(dst, channel)]
        return [self.edges[i] for i in np.flatnonzero(self.edge_channel == ci)]

    def outgoing(self, src: NodeId) -> list[EdgeId]:
        si = self.src_index[src]
        return [self.edges[i] for i in np.flatnonzero(self.edge_src == si)]

    def __contains__(self, edge: EdgeId) -> bool:
        return edge in self.edge_index

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PatchableGraph)
            and self.config == other.config
            and self.split_qkv == other.split_qkv
        )

    def __hash__(self) -> int:
        return hash((self.config, self.split_qkv))


def build_graph(config: ModelConfig, split_qkv: bool = True) -> PatchableGraph:
    return PatchableGraph(config, split_qkv=split_qkv)


def edge_count_closed_form(n_layer: int, n_head: int, split_qkv: bool = True) -> int:
    per = 3 if split_qkv else 1
    attn_in = per * n_head * sum(1 + (n_head + 1) * l for l in range(n_layer))
    mlp_in = sum(1 + (n_head + 1) * l + n_head for l in range(n_layer))
    return attn_in + mlp_in + 1 + (n_head + 1) * n_layer


# --- parameters ------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, H, dh, M, V = config.d_model, config.n_head, config.d_head, config.d_mlp, config.vocab_size
    shapes = {"embed.W_E": (V, D), "embed.W_pos": (config.max_seq, D)}
    for l in range(config.n_layer):
        p = f"blocks.{l}."
        shapes.update(
            {
                p + "ln1.w": (D,),
                p + "ln1.b": (D,),
                p + "attn.W_Q": (H, D, dh),
                p + "attn.b_Q": (H, dh),
                p + "attn.W_K": (H, D, dh),
                p + "attn.b_K": (H, dh),
                p + "attn.W_V": (H, D, dh),
                p + "attn.b_V": (H, dh),
                p + "attn.W_O": (H, dh, D),
                p + "attn.b_O": (D,),
                p + "ln2.w": (D,),
                p + "ln2.b": (D,),
                p + "mlp.W_in": (D, M),
                p + "mlp.b_in": (M,),
                p + "mlp.W_out": (M, D),
                p + "mlp.b_out": (D,),
            }
        )
    shapes.update({"ln_final.w": (D,), "ln_final.b": (D,), "unembed.W_U": (D, V)})
    return shapes


class Params(Mapping):
    """Read-only named parameter arrays plus their config."""

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        expected = param_shapes(config)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        self.config = config
        self._arrays: dict[str, np.ndarray] = {}
        for name in expected:
            arr = np.array(arrays[name], copy=True)
            if arr.shape != expected[name]:
                raise ConfigError(f"{name}: expected shape {expected[name]}, got {arr.shape}")
            arr.flags.writeable = False
            self._arrays[name] = arr

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def dtype(self):
        return self._arrays["embed.W_E"].dtype

    def astype(self, dtype) -> "Params":
        return Params(self.config, {k: v.astype(dtype) for k, v in self._arrays.items()})

    def replace(self, **updates: np.ndarray) -> "Params":
        arrays = dict(self._arrays)
        for k, v in updates.items():
            arrays[k.replace("__", ".")] = v
        return Params(self.config, arrays)

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "Params":
        merged = dict(self._arrays)
        merged.update(arrays)
        return Params(self.config, merged)

    @cached_property
    def fingerprint(self) -> "ModelFingerprint":
        return fingerprint(self.config, self)


@dataclass(frozen=True)
class ModelFingerprint:
    config: str
    checksum: str

    def __str__(self) -> str:
        return f"{self.config}:{self.checksum}"

    @classmethod
    def parse(cls, text: str) -> "ModelFingerprint":
        config, _, checksum = text.rpartition(":")
        if not config or len(checksum) != 16:
            raise ValueError(f"malformed fingerprint {text!r}")
        return cls(config, checksum)


def fingerprint(config: ModelConfig, params: Mapping[str, np.ndarray]) -> ModelFingerprint:
    """64-bit BLAKE2b checksum over names, dtypes, shapes and little-endian bytes."""
    h = hashlib.blake2b(digest_size=8)
    h.update(config.summary().encode())
    for name in sorted(params):
        arr = np.asarray(params[name])
        h.update(name.encode())
        h.update(arr.dtype.str.lstrip("<>|=").encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return ModelFingerprint(config.summary(), h.hexdigest())


def init_params(config: ModelConfig, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> Params:
    arrays = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w":
            arrays[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return Params(config, arrays)


def zero_params(config: ModelConfig, dtype=np.float32) -> Params:
    return Params(config, {k: np.zeros(s, dtype=dtype) for k, s in param_shapes(config).items()})


# --- caches ----------------------------------------------------------------


@dataclass
class ActivationCache:
    """Per-source-node residual contributions from one run."""

    graph: PatchableGraph
    z: np.ndarray  # [n_src, batch, seq, d_model]
    logits: np.ndarray  # [batch, seq, vocab]
    channel_inputs: np.ndarray | None = None  # [n_channels, batch, seq, d_model]
    bias_stream: np.ndarray | None = None  # [n_layer + 1, d_model]: b_O sum before each layer / the end

    def __post_init__(self):
        self.z.flags.writeable = False

    def __getitem__(self, node: NodeId) -> np.ndarray:
        return self.z[self.graph.src_index[node]]

    @property
    def batch_size(self) -> int:
        return self.z.shape[1]

    @property
    def seq_len(self) -> int:
        return self.z.shape[2]

    def channel_bias(self, channel: tuple[NodeId, str]) -> np.ndarray:
        """Summed attention output biases read by ``channel``; they belong to no source node."""
        if self.bias_stream is None:
            raise InterventionError("cache was built without a bias stream")
        dst = channel[0]
        if dst.kind == RESID_END:
            return self.bias_stream[self.graph.config.n_layer]
        # an MLP reads after its own layer's attention bias
        return self.bias_stream[dst.layer + (dst.kind == MLP)]

    def batch_mean(self) -> "ActivationCache":
        z = np.broadcast_to(self.z.mean(axis=1, keepdims=True, dtype=np.float64), self.z.shape).astype(self.z.dtype)
        logits = np.broadcast_to(self.logits.mean(axis=0, keepdims=True), self.logits.shape).astype(self.logits.dtype)
        return ActivationCache(self.graph, z, logits)


@dataclass
class GradientCache:
    """Per-channel gradient of a summed metric w.r.t. the channel's pre-LayerNorm input."""

    graph: PatchableGraph
    grads: np.ndarray  # [n_channels, batch, seq, d_model]

    def __getitem__(self, channel: tuple[NodeId, str]) -> np.ndarray:
        return self.grads[self.graph.channel_index[channel]]


# --- forward ---------------------------------------------------------------

# patches map a destination channel to a list of (source node, value); value is
# the array (or Tensor) that replaces the source's live contribution there.
Patches = Mapping[tuple[NodeId, str], list[tuple[NodeId, "np.ndarray | Tensor"]]]


@dataclass
class RunOutput:
    logits: Tensor
    z: list[Tensor]  # live source outputs, in graph.src_nodes order
    channel_inputs: dict[tuple[NodeId, str], Tensor] = field(default_factory=dict)
    attn_inputs: list[dict[str, Tensor]] = field(default_factory=list)
    bias_stream: np.ndarray | None = None


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InputError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.dtype.kind not in "iu":
        raise InputError("tokens must be integer ids")
    if tokens.shape[1] > config.max_seq:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq={config.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= config.vocab_size)][0]
        raise InputError(f"token id {int(bad)} out of range for vocab_size={config.vocab_size}")
    return tokens.astype(np.int64)


def _run(
    params: Params,
    tokens,
    graph: PatchableGraph,
    patches: Patches | None = None,
    resid_start_value: np.ndarray | None = None,
    param_tensors: Mapping[str, Tensor] | None = None,
    retain: bool = False,
) -> RunOutput:
    """Shared forward used by every public entry point.

    ``param_tensors`` lets training/gradient checks pass grad-requiring leaves.
    With ``retain`` every channel input tensor keeps its gradient.
    """
    cfg = params.config
    tokens = _check_tokens(cfg, tokens)
    B, S = tokens.shape
    L, H, D = cfg.n_layer, cfg.n_head, cfg.d_model
    P = param_tensors if param_tensors is not None else {k: Tensor(v) for k, v in params.items()}
    patches = patches or {}
    eps = cfg.ln_eps

    if resid_start_value is not None:
        z0 = T.as_tensor(resid_start_value, dtype=P["embed.W_E"].dtype)
        if z0.shape != (B, S, D):
            raise InterventionError(f"resid start override has shape {z0.shape}, expected {(B, S, D)}")
    else:
        z0 = T.add(T.embed(P["embed.W_E"], tokens), T.getitem(P["embed.W_pos"], slice(0, S)))
    live: list[Tensor] = [z0]
    out = RunOutput(logits=None, z=live)  # type: ignore[arg-type]

    def live_value(node: NodeId) -> Tensor:
        return live[graph.src_index[node]]

    def delta_for(channel: tuple[NodeId, str]) -> Tensor | None:
        items = patches.get(channel)
        if not items:
            return None
        total = None
        for src, value in items:
            if graph.src_index.get(src, len(live)) >= len(live):
                raise InterventionError(f"edge {src}->{channel[0]} does not respect residual order")
            value = T.as_tensor(value, dtype=z0.dtype)
            if value.shape != (B, S, D):
                raise InterventionError(
                    f"patched value for {src}->{channel[0]}[{channel[1]}] has shape {value.shape}, expected {(B, S, D)}"
                )
            d = T.sub(value, live_value(src))
            total = d if total is None else T.add(total, d)
        return total

    def channel_input(resid: Tensor, channel: tuple[NodeId, str]) -> Tensor:
        d = delta_for(channel)
        x = resid if d is None else T.add(resid, d)
        if retain:
            # a distinct node per channel so gradients are not shared
            x = T.mul(x, 1.0)
            if x.requires_grad:
                x.retain_grad()
        out.channel_inputs[channel] = x
        return x

    resid = z0
    bias_acc = np.zeros(D, dtype=np.float64)
    bias_rows = [bias_acc.copy()]
    mask = np.triu(np.full((S, S), -1e9, dtype=z0.dtype), k=1)
    scale = 1.0 / np.sqrt(cfg.d_head)
    split = graph.split_qkv
    for l in range(L):
        p = f"blocks.{l}."
        per_c = {}
        for c in ("Q", "K", "V"):
            heads = []
            for h in range(H):
                key = (attn(l, h), c if split else "QKV")
                if not split and c != "Q":
                    heads.append(out.channel_inputs[key])
                else:
                    heads.append(channel_input(resid, key))
            x = T.stack(heads, axis=1)  # [B, H, S, D]
            ln = T.layer_norm(x, P[p + "ln1.w"], P[p + "ln1.b"], eps)
            bias = T.broadcast_to(T.reshape(P[p + f"attn.b_{c}"], (H, 1, cfg.d_head)), (H, S, cfg.d_head))
            per_c[c] = T.add(T.matmul(ln, P[p + f"attn.W_{c}"]), bias)  # [B, H, S, dh]
        scores = T.add(T.mul(T.matmul(per_c["Q"], T.swapaxes(per_c["K"], -1, -2)), scale), Tensor(mask))
        pattern = T.softmax(scores, axis=-1)
        mixed = T.matmul(pattern, per_c["V"])  # [B, H, S, dh]
        z_heads = T.matmul(mixed, P[p + "attn.W_O"])  # [B, H, S, D]
        for h in range(H):
            zh = T.getitem(z_heads, (slice(None), h))
            live.append(zh)
            resid = T.add(resid, zh)
        resid = T.add(resid, P[p + "attn.b_O"])
        bias_acc = bias_acc + params[p + "attn.b_O"]

        x = channel_input(resid, (mlp(l), "In"))
        ln = T.layer_norm(x, P[p + "ln2.w"], P[p + "ln2.b"], eps)
        hidden = T.gelu(T.add(T.matmul(ln, P[p + "mlp.W_in"]), P[p + "mlp.b_in"]))
        zm = T.add(T.matmul(hidden, P[p + "mlp.W_out"]), P[p + "mlp.b_out"])
        live.append(zm)
        resid = T.add(resid, zm)
        bias_rows.append(bias_acc.copy())

    x = channel_input(resid, (resid_end(L), "In"))
    ln = T.layer_norm(x, P["ln_final.w"], P["ln_final.b"], eps)
    out.logits = T.matmul(ln, P["unembed.W_U"])
    out.bias_stream = np.array(bias_rows)
    return out


def run_tensors(
    params: Params, param_tensors: Mapping[str, Tensor], tokens, graph: PatchableGraph | None = None
) -> Tensor:
    """Logits as a Tensor computed from caller-supplied parameter tensors (for training)."""
    graph = graph or build_graph(params.config)
    return _run(params, tokens, graph, param_tensors=param_tensors).logits


def _cache_from(graph: PatchableGraph, run: RunOutput, keep_inputs: bool = False) -> ActivationCache:
    z = np.stack([t.data for t in run.z], axis=0)
    inputs = None
    if keep_inputs:
        inputs = np.stack([run.channel_inputs[ch].data for ch in graph.channels], axis=0)
    return ActivationCache(graph, z, run.logits.data, inputs, run.bias_stream)


def forward(
    params: Params,
    tokens,
    graph: PatchableGraph | None = None,
    keep_inputs: bool = False,
    resid_start_value: np.ndarray | None = None,
) -> tuple[np.ndarray, ActivationCache]:
    """Plain forward pass; returns ``(logits, cache)``."""
    graph = graph or build_graph(params.config)
    run = _run(params, tokens, graph, resid_start_value=resid_start_value)
    cache = _cache_from(graph, run, keep_inputs=keep_inputs)
    return cache.logits, cache


def _patches_from_assignment(graph: PatchableGraph, assignment: Mapping[EdgeId, ActivationCache]) -> dict:
    patches: dict[tuple[NodeId, str], list] = {}
    for edge, cache in assignment.items():
        if edge not in graph.edge_index:
            raise InterventionError(f"edge {edge} is not in the {graph.convention} graph")
        patches.setdefault((edge.dst, edge.channel), []).append((edge.src, cache[edge.src]))
    return patches


def forward_with_interventions(
    params: Params,
    tokens,
    assignment: Mapping[EdgeId, ActivationCache],
    graph: PatchableGraph | None = None,
    resid_start_value: np.ndarray | None = None,
) -> np.ndarray:
    """Forward where each assigned edge carries its source's value from a cache.

    Unassigned edges carry the live value recomputed in this pass, so patches
    propagate downstream.
    """
    graph = graph or build_graph(params.config)
    tokens = _check_tokens(params.config, tokens)
    for cache in {id(c): c for c in assignment.values()}.values():
        if cache.z.shape[1:3] != tokens.shape:
            raise InterventionError(
                f"cache batch/seq {cache.z.shape[1:3]} does not match tokens {tokens.shape}"
            )
    patches = _patches_from_assignment(graph, assignment)
    return _run(params, tokens, graph, patches, resid_start_value=resid_start_value).logits.data


MetricFn = Callable[[Tensor], Tensor]


def node_input_grads(
    params: Params,
    tokens,
    metric: MetricFn,
    graph: PatchableGraph | None = None,
    resid_start_value: np.ndarray | None = None,
    with_cache: bool = False,
):
    """One backward pass of ``sum(metric(logits))`` to every channel input.

    Returns the :class:`GradientCache` (and the run's :class:`ActivationCache`
    when ``with_cache``).
    """
    graph = graph or build_graph(params.config)
    dtype = params.dtype
    with Tape() as tape:
        P = {k: Tensor(v) for k, v in params.items()}
        # a grad-requiring seed so every downstream op is recorded
        anchor = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        P["embed.W_pos"] = T.add(P["embed.W_pos"], anchor)
        rs = None
        if resid_start_value is not None:
            rs = T.add(T.as_tensor(resid_start_value, dtype=dtype), anchor)
        run = _run(params, tokens, graph, param_tensors=P, retain=True, resid_start_value=rs)
        loss = T.sum_(metric(run.logits))
    T.backward(loss, tape)
    shape = run.logits.shape[:2] + (params.config.d_model,)
    grads = np.empty((len(graph.channels),) + shape, dtype=dtype)
    for i, ch in enumerate(graph.channels):
        # a merged QKV channel is one tensor read three times, so its grad is the sum
        x = run.channel_inputs[ch]
        grads[i] = x.grad if x.grad is not None else 0.0
    gc = GradientCache(graph, grads)
    if with_cache:
        return gc, _cache_from(graph, run)
    return gc
