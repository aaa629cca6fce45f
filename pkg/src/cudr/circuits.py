"""Circuits as ranked edge sets: top-k, merging into a relation hierarchy, overlap, histograms, DOT and files."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .eap import EdgeScores
from .model import RESID_END, RESID_START, ATTN, EdgeId, ModelFingerprint, NodeId, node_layer
from .patching import ProvenanceError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = "# cudr-circuit"
LEVELS = ("L3", "L2", "L1", "L0", "custom")
MERGE_MODES = ("intersection", "union", "average")


class CircuitError(ValueError):
    pass


class CircuitFileError(CircuitError):
    pass


def _order(edges: Sequence[EdgeId], scores: np.ndarray) -> np.ndarray:
    # |score| descending, ties by canonical edge order
    keys = sorted(range(len(edges)), key=lambda i: (-abs(scores[i]), edges[i].sort_key))
    return np.array(keys, dtype=np.int64)


class Circuit:
    """Edges ranked by |score| (descending), ties by canonical edge order."""

    __slots__ = ("edge_ids", "scores", "fingerprint", "convention", "level", "provenance", "_set")

    def __init__(
        self,
        edges: Iterable[EdgeId],
        scores: Iterable[float],
        fingerprint: ModelFingerprint | None = None,
        convention: str = "qkv-split",
        level: str = "custom",
        provenance: Mapping | None = None,
    ):
        edges = list(edges)
        scores = np.asarray(list(scores), dtype=np.float64)
        if len(edges) != len(scores):
            raise CircuitError(f"{len(edges)} edges but {len(scores)} scores")
        if len(set(edges)) != len(edges):
            dup = next(e for i, e in enumerate(edges) if e in edges[:i])
            raise CircuitError(f"duplicate edge {dup}")
        if level not in LEVELS:
            raise CircuitError(f"unknown level tag {level!r}")
        idx = _order(edges, scores)
        self.edge_ids: tuple[EdgeId, ...] = tuple(edges[i] for i in idx)
        self.scores = scores[idx] if len(idx) else scores
        self.scores.flags.writeable = False
        self.fingerprint = fingerprint
        self.convention = convention
        self.level = level
        self.provenance = dict(provenance or {})
        self._set = frozenset(self.edge_ids)

    def __len__(self) -> int:
        return len(self.edge_ids)

    def __iter__(self):
        return iter(self.edge_ids)

    def __contains__(self, edge: EdgeId) -> bool:
        return edge in self._set

    def __eq__(self, other) -> bool:
        if not isinstance(other, Circuit):
            return NotImplemented
        return (
            self.edge_ids == other.edge_ids
            and np.array_equal(self.scores, other.scores)
            and self.fingerprint == other.fingerprint
            and self.convention == other.convention
            and self.level == other.level
            and self.provenance == other.provenance
        )

    def __repr__(self) -> str:
        return f"Circuit({len(self)} edges, level={self.level}, fingerprint={self.fingerprint})"

    @property
    def edge_set(self) -> frozenset[EdgeId]:
        return self._set

    def score_of(self, edge: EdgeId) -> float:
        return float(self.scores[self.edge_ids.index(edge)])

    def items(self):
        return zip(self.edge_ids, self.scores.tolist())

    def head(self, k: int) -> "Circuit":
        """The top ``k`` edges (a prefix), clamped to the circuit size."""
        if k < 0:
            raise CircuitError("k must be >= 0")
        k = min(k, len(self))
        return Circuit(self.edge_ids[:k], self.scores[:k], self.fingerprint, self.convention, self.level, self.provenance)

    def with_meta(self, level: str | None = None, **provenance) -> "Circuit":
        prov = dict(self.provenance, **provenance)
        return Circuit(self.edge_ids, self.scores, self.fingerprint, self.convention, level or self.level, prov)


def _clamp(k: int, n: int, what: str) -> int:
    if k > n:
        log.warning("k=%d exceeds %s size %d; clamping", k, what, n)
        return n
    return k


def top_k(scores: EdgeScores, k: int, level: str = "L3", provenance: Mapping | None = None) -> Circuit:
    if k < 1:
        raise CircuitError("k must be >= 1")
    k = _clamp(k, len(scores), "graph")
    full = ranking(scores, level, provenance)
    return full.head(k).with_meta(k=k)


def ranking(scores: EdgeScores, level: str = "custom", provenance: Mapping | None = None) -> Circuit:
    """Every graph edge ranked by its score; a lossless serialisable form of the scores."""
    prov = dict(scores.provenance)
    prov.update(provenance or {})
    prov["n_samples"] = scores.n_samples
    return Circuit(scores.graph.edges, scores.scores, scores.fingerprint, scores.graph.convention, level, prov)


def _same_model(circuits: Sequence[Circuit]) -> None:
    first = circuits[0]
    for c in circuits[1:]:
        if c.fingerprint != first.fingerprint:
            raise ProvenanceError(f"circuits come from different models: {first.fingerprint} vs {c.fingerprint}")
        if c.convention != first.convention:
            raise CircuitError(f"circuits use different graph conventions: {first.convention} vs {c.convention}")


def next_level(level: str) -> str:
    return {"L3": "L2", "L2": "L1", "L1": "L0", "L0": "L0"}.get(level, "custom")


def merge(
    children: Sequence[Circuit],
    K: int = 1000,
    mode: str = "intersection",
    level: str | None = None,
    label: str | None = None,
) -> Circuit:
    """Combine children's top-``K`` edge sets.

    ``intersection`` keeps edges present in every child, ``union`` edges in any
    child; both score an edge by the mean over the children that contain it.
    ``average`` averages scores over all children (absent = 0) and keeps the top ``K``.
    """
    if not children:
        raise CircuitError("merge needs at least one circuit")
    if mode not in MERGE_MODES:
        raise CircuitError(f"unknown merge mode {mode!r}")
    _same_model(children)
    tops = [c.head(K) for c in children]
    maps = [dict(t.items()) for t in tops]
    if mode == "intersection":
        keep = set(maps[0]).intersection(*maps[1:])
    else:
        keep = set().union(*maps)
    edges = sorted(keep, key=lambda e: e.sort_key)
    # exactly rounded sums keep the result independent of child order
    if mode == "average":
        scores = [math.fsum(m.get(e, 0.0) for m in maps) / len(maps) for e in edges]
    else:
        scores = [math.fsum(vals) / len(vals) for vals in ([m[e] for m in maps if e in m] for e in edges)]
    if level is None:
        levels = {c.level for c in children}
        level = next_level(levels.pop()) if len(levels) == 1 else "custom"
    prov = {"merge": mode, "K": K, "children": [c.provenance.get("label", "?") for c in children]}
    if label is not None:
        prov["label"] = label
    out = Circuit(edges, scores, children[0].fingerprint, children[0].convention, level, prov)
    if mode == "average":
        out = out.head(K)
    if not len(out):
        log.warning("merge of %d circuits produced an empty circuit", len(children))
    return out


# --- hierarchy -------------------------------------------------------------


@dataclass
class Hierarchy:
    K: int
    levels: dict[str, dict[str, Circuit]]
    children: dict[str, list[str]] = field(default_factory=dict)  # parent label -> child labels

    def sizes(self) -> dict[str, dict[str, int]]:
        return {lvl: {k: len(c) for k, c in group.items()} for lvl, group in self.levels.items()}

    def circuit(self, label: str) -> Circuit:
        for group in self.levels.values():
            if label in group:
                return group[label]
        raise KeyError(label)

    def leaves(self, label: str) -> list[str]:
        kids = self.children.get(label)
        if not kids:
            return [label]
        return [leaf for k in kids for leaf in self.leaves(k)]


ROOT = "root"


def build_hierarchy(l3: Mapping[str, Circuit], K: int = 1000, mode: str = "intersection") -> Hierarchy:
    """Merge relation circuits up a dotted label taxonomy.

    An L2 node exists for a two-part prefix shared by at least two
    three-part labels; each L1 (first label part) merges its L2 nodes plus any
    relations not under an L2; the L0 root merges all L1 nodes.
    """
    if not l3:
        raise CircuitError("no relation circuits to merge")
    leaves = {lab: c.with_meta(level="L3", label=lab) for lab, c in sorted(l3.items())}
    _same_model(list(leaves.values()))
    children: dict[str, list[str]] = {}

    groups2: dict[str, list[str]] = {}
    for lab in leaves:
        parts = lab.split(".")
        if len(parts) >= 3:
            groups2.setdefault(".".join(parts[:2]), []).append(lab)
    l2 = {}
    for prefix, labs in sorted(groups2.items()):
        if len(labs) >= 2:
            l2[prefix] = merge([leaves[x] for x in labs], K, mode, level="L2", label=prefix)
            children[prefix] = labs
    under_l2 = {x for p in l2 for x in children[p]}

    groups1: dict[str, list[str]] = {}
    for lab in list(l2) + [x for x in leaves if x not in under_l2]:
        groups1.setdefault(lab.split(".")[0], []).append(lab)
    pool = {**leaves, **l2}
    l1 = {}
    for top, labs in sorted(groups1.items()):
        labs = sorted(labs)
        l1[top] = merge([pool[x] for x in labs], K, mode, level="L1", label=top)
        children[top] = labs
    l0 = merge([l1[x] for x in sorted(l1)], K, mode, level="L0", label=ROOT)
    children[ROOT] = sorted(l1)
    return Hierarchy(K, {"L3": leaves, "L2": l2, "L1": l1, "L0": {ROOT: l0}}, children)


def containment_violations(h: Hierarchy) -> list[str]:
    """Every edge of a merged node must lie in the top-K of each node below it (intersection merges)."""
    problems = []
    for parent, kids in h.children.items():
        pc = h.circuit(parent)
        for lab in kids + [leaf for leaf in h.leaves(parent) if leaf not in kids]:
            top = h.circuit(lab).head(h.K).edge_set
            missing = pc.edge_set - top
            if missing:
                problems.append(f"{parent}: {len(missing)} edge(s) outside top-{h.K} of {lab}")
    return problems


# --- statistics ------------------------------------------------------------


def overlap(a: Circuit, b: Circuit, k: int) -> int:
    """``|top_k(a) & top_k(b)|``."""
    _same_model([a, b])
    ka = _clamp(k, len(a), "circuit")
    kb = _clamp(k, len(b), "circuit")
    return len(a.head(ka).edge_set & b.head(kb).edge_set)


@dataclass
class OverlapMatrix:
    labels: list[str]
    counts: np.ndarray
    k: int

    def to_tsv(self) -> str:
        rows = ["\t".join(["k=" + str(self.k)] + self.labels)]
        for lab, row in zip(self.labels, self.counts):
            rows.append("\t".join([lab] + [str(int(v)) for v in row]))
        return "\n".join(rows) + "\n"


def overlap_matrix(circuits: Mapping[str, Circuit], k: int) -> OverlapMatrix:
    labels = list(circuits)
    cs = [circuits[x] for x in labels]
    _same_model(cs)
    n = len(cs)
    m = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i, n):
            m[i, j] = m[j, i] = overlap(cs[i], cs[j], k)
    return OverlapMatrix(labels, m, k)


_LAYERS_RE = re.compile(r"^L(\d+)-")


def circuit_n_layer(circuit: Circuit) -> int:
    if circuit.fingerprint is not None:
        m = _LAYERS_RE.match(circuit.fingerprint.config)
        if m:
            return int(m.group(1))
    layers = [n.layer for e in circuit for n in (e.src, e.dst) if n.kind not in (RESID_START, RESID_END)]
    return max(layers, default=-1) + 1


@dataclass
class LayerHistogram:
    """Counts of edges per (source layer, destination layer); layers run -1..n_layer."""

    counts: np.ndarray  # [n_layer + 2, n_layer + 2], index = layer + 1
    n_layer: int

    def __getitem__(self, cell: tuple[int, int]) -> int:
        s, d = cell
        return int(self.counts[s + 1, d + 1])

    @property
    def layers(self) -> list[int]:
        return list(range(-1, self.n_layer + 1))

    def total(self) -> int:
        return int(self.counts.sum())


def layer_histogram(circuit: Circuit, k: int | None = None, n_layer: int | None = None) -> LayerHistogram:
    n_layer = circuit_n_layer(circuit) if n_layer is None else n_layer
    sub = circuit if k is None else circuit.head(min(k, len(circuit)))
    counts = np.zeros((n_layer + 2, n_layer + 2), dtype=np.int64)
    for e in sub:
        counts[node_layer(e.src, n_layer) + 1, node_layer(e.dst, n_layer) + 1] += 1
    return LayerHistogram(counts, n_layer)


# --- DOT export ------------------------------------------------------------


def _node_label(n: NodeId) -> str:
    if n.kind == ATTN:
        return f"attn L{n.layer} H{n.head}"
    if n.kind == RESID_START:
        return "resid start"
    if n.kind == RESID_END:
        return "resid end"
    return f"mlp L{n.layer}"


def to_dot(circuit: Circuit, k: int | None = None, name: str = "circuit") -> str:
    """Left-to-right digraph, one rank per layer, edges weighted by |score|."""
    sub = circuit if k is None else circuit.head(min(k, len(circuit)))
    n_layer = circuit_n_layer(circuit)
    nodes = sorted({n for e in sub for n in (e.src, e.dst)}, key=lambda n: n.sort_key)
    top = float(np.max(np.abs(sub.scores))) if len(sub) else 1.0
    top = top or 1.0
    lines = [f'digraph "{name}" {{', "  rankdir=LR;", '  node [shape=box, fontname="Helvetica"];']
    by_layer: dict[int, list[NodeId]] = {}
    for n in nodes:
        by_layer.setdefault(node_layer(n, n_layer), []).append(n)
    for layer in sorted(by_layer):
        members = "; ".join(f'"{n}"' for n in by_layer[layer])
        lines.append(f"  {{ rank=same; {members}; }}")
    for n in nodes:
        lines.append(f'  "{n}" [label="{_node_label(n)}"];')
    for e, s in sub.items():
        w = abs(s)
        lines.append(
            f'  "{e.src}" -> "{e.dst}" [label="{e.channel}", weight="{w:.6g}", penwidth="{1 + 4 * w / top:.3f}"];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- files -----------------------------------------------------------------


def _digest(lines: Sequence[str]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def dumps(circuit: Circuit) -> str:
    header = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"fingerprint: {circuit.fingerprint if circuit.fingerprint is not None else 'none'}",
        f"convention: {circuit.convention}",
        f"level: {circuit.level}",
        f"provenance: {json.dumps(circuit.provenance, sort_keys=True)}",
        f"edges: {len(circuit)}",
    ]
    body = [f"{e.src} {e.dst} {e.channel} {s!r}" for e, s in circuit.items()]
    return "\n".join(header + [f"checksum: {_digest(header + body)}"] + body) + "\n"


def save(circuit: Circuit, path: str | os.PathLike) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(dumps(circuit))
    os.replace(tmp, path)


def loads(text: str, source: str = "<string>") -> Circuit:
    lines = text.splitlines()
    if len(lines) < 7 or not lines[0].startswith(MAGIC + " "):
        raise CircuitFileError(f"{source}: not a circuit file")
    version = lines[0][len(MAGIC) + 1 :].strip()
    if version != str(FORMAT_VERSION):
        raise CircuitFileError(f"{source}: unsupported circuit file version {version!r}")
    fields = {}
    for line in lines[1:7]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise CircuitFileError(f"{source}: malformed header line {line!r}")
        fields[key] = value
    needed = {"fingerprint", "convention", "level", "provenance", "edges", "checksum"}
    if set(fields) != needed:
        raise CircuitFileError(f"{source}: header fields {sorted(fields)} != {sorted(needed)}")
    header = lines[:6]
    body = lines[7:]
    if _digest(header + body) != fields["checksum"]:
        raise CircuitFileError(f"{source}: checksum mismatch (file corrupted or edited)")
    try:
        fp = None if fields["fingerprint"] == "none" else ModelFingerprint.parse(fields["fingerprint"])
        n = int(fields["edges"])
        provenance = json.loads(fields["provenance"])
    except ValueError as exc:
        raise CircuitFileError(f"{source}: bad header: {exc}") from None
    if n != len(body):
        raise CircuitFileError(f"{source}: header says {n} edges, found {len(body)}")
    edges, scores = [], []
    for i, line in enumerate(body, 8):
        parts = line.split(" ")
        if len(parts) != 4:
            raise CircuitFileError(f"{source}:{i}: expected 'src dst channel score'")
        try:
            edges.append(EdgeId(NodeId.parse(parts[0]), NodeId.parse(parts[1]), parts[2]))
            scores.append(float(parts[3]))
        except ValueError as exc:
            raise CircuitFileError(f"{source}:{i}: {exc}") from None
    try:
        return Circuit(edges, scores, fp, fields["convention"], fields["level"], provenance)
    except CircuitError as exc:
        raise CircuitFileError(f"{source}: {exc}") from None


def load(path: str | os.PathLike) -> Circuit:
    with open(path, encoding="utf-8") as f:
        return loads(f.read(), os.fspath(path))
