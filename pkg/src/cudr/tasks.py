"""Contrastive prompt pairs: CuDR records, IOI, linguistic-feature templates, toy CuDR.

Also defines the logit-difference metric used for attribution and evaluation.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

FRAMEWORKS = ("PDTB", "GDTB", "RST", "SDRT")
RECORD_FIELDS = ("arg1", "arg2", "arg2_cf", "conn", "conn_cf", "relation", "relation_cf", "framework", "source_id")
TOKEN_FIELDS = ("tokens_clean", "tokens_corrupt", "tokens_arg2", "tokens_arg2_cf")
INSTRUCTION = "Please finish the discourse by choosing one of the two options:"

# older PDTB-3 spellings used by the framework mapping tables
RELATION_ALIASES = {
    "Contingency.Cause.Reason": "Contingency.Reason",
    "Contingency.Cause.Result": "Contingency.Result",
}


class TaskError(ValueError):
    pass


class ParseError(TaskError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class PairRejected(TaskError):
    pass


class Tokenizer(Protocol):
    eot_id: int | None

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids) -> str: ...


# --- taxonomy tables -------------------------------------------------------


def _read_table(name: str) -> list[list[str]]:
    text = resources.files("cudr").joinpath("data", name).read_text(encoding="utf-8")
    return [line.split("\t") for line in text.splitlines() if line and not line.startswith("#")]


@lru_cache(maxsize=None)
def connective_table() -> dict[str, tuple[str, tuple[str, ...]]]:
    """PDTB relation -> (original connective, five counterfactual connectives)."""
    return {rel: (ori, tuple(cf.split(","))) for rel, ori, cf in _read_table("connectives.tsv")}


@lru_cache(maxsize=None)
def framework_mapping(framework: str) -> dict[str, str]:
    """Framework label -> PDTB label (identity for PDTB and GDTB)."""
    if framework in ("PDTB", "GDTB"):
        return {r: r for r in connective_table()}
    fname = {"RST": "rst_to_pdtb.tsv", "SDRT": "sdrt_to_pdtb.tsv"}.get(framework)
    if fname is None:
        raise TaskError(f"unknown framework {framework!r}")
    return {k: canonical_pdtb(v) for k, v in _read_table(fname)}


def canonical_pdtb(label: str) -> str:
    return RELATION_ALIASES.get(label, label)


def _pdtb_prefixes() -> set[str]:
    out = set()
    for rel in connective_table():
        parts = rel.split(".")
        out.update(".".join(parts[: i + 1]) for i in range(len(parts)))
    return out


def in_taxonomy(label: str, framework: str) -> bool:
    if canonical_pdtb(label) in _pdtb_prefixes():
        return True
    if framework in ("RST", "SDRT"):
        table = framework_mapping(framework)
        return label in table or any(label + suffix in table for suffix in ("_r", "_m"))
    return False


def pdtb_relation(label: str, framework: str) -> str:
    """PDTB label a record's relation is grouped under for cross-framework evaluation."""
    canon = canonical_pdtb(label)
    if canon in _pdtb_prefixes():
        return canon
    table = framework_mapping(framework)
    for key in (label, label + "_r", label + "_m"):
        if key in table:
            return table[key]
    raise TaskError(f"relation {label!r} has no PDTB mapping in {framework}")


# --- CuDR records ----------------------------------------------------------


@dataclass(frozen=True)
class CudrRecord:
    arg1: str
    arg2: str
    arg2_cf: str
    conn: str
    conn_cf: str
    relation: str
    relation_cf: str
    framework: str
    source_id: str
    tokens_clean: tuple[int, ...] | None = None
    tokens_corrupt: tuple[int, ...] | None = None
    tokens_arg2: tuple[int, ...] | None = None
    tokens_arg2_cf: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.conn == self.conn_cf:
            raise TaskError(f"record {self.source_id}: conn and conn_cf are both {self.conn!r}")
        if self.relation == self.relation_cf:
            raise TaskError(f"record {self.source_id}: relation and relation_cf are both {self.relation!r}")
        if self.arg2 == self.arg2_cf:
            raise TaskError(f"record {self.source_id}: arg2 and arg2_cf are identical")
        if self.framework not in FRAMEWORKS:
            raise TaskError(f"record {self.source_id}: unknown framework {self.framework!r}")

    @property
    def pretokenized(self) -> bool:
        return all(getattr(self, f) is not None for f in TOKEN_FIELDS)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in RECORD_FIELDS}
        for k in TOKEN_FIELDS:
            v = getattr(self, k)
            if v is not None:
                d[k] = list(v)
        return d


def _record_from_obj(obj: dict, path, lineno: int) -> CudrRecord:
    if not isinstance(obj, dict):
        raise ParseError(path, lineno, "record is not a key/value object")
    missing = [k for k in RECORD_FIELDS if k not in obj]
    if missing:
        raise ParseError(path, lineno, f"missing field(s) {', '.join(missing)}")
    unknown = set(obj) - set(RECORD_FIELDS) - set(TOKEN_FIELDS)
    if unknown:
        raise ParseError(path, lineno, f"unknown field(s) {', '.join(sorted(unknown))}")
    for k in RECORD_FIELDS:
        if not isinstance(obj[k], str):
            raise ParseError(path, lineno, f"field {k!r} must be a string")
    kwargs = {k: obj[k] for k in RECORD_FIELDS}
    for k in TOKEN_FIELDS:
        if k in obj:
            v = obj[k]
            if not isinstance(v, list) or not all(isinstance(i, int) and i >= 0 for i in v):
                raise ParseError(path, lineno, f"field {k!r} must be a list of non-negative integers")
            kwargs[k] = tuple(v)
    for k in ("relation", "relation_cf"):
        if not in_taxonomy(obj[k], obj["framework"]):
            raise ParseError(path, lineno, f"{k} {obj[k]!r} is not in the {obj['framework']} taxonomy")
    try:
        return CudrRecord(**kwargs)
    except TaskError as exc:
        raise ParseError(path, lineno, str(exc)) from None


def ingest_cudr(path: str | os.PathLike) -> list[CudrRecord]:
    """Read a CuDR file: one JSON object per line, optional ``cudr_header`` first line.

    When the header carries per-relation ``counts`` they are checked against
    the records.
    """
    records: list[CudrRecord] = []
    header = None
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if isinstance(obj, dict) and "cudr_header" in obj:
                if records or header is not None:
                    raise ParseError(path, lineno, "header must be the first record")
                header = obj["cudr_header"]
                continue
            rec = _record_from_obj(obj, path, lineno)
            if rec.source_id in seen:
                raise ParseError(path, lineno, f"duplicate source_id {rec.source_id!r} (first at line {seen[rec.source_id]})")
            seen[rec.source_id] = lineno
            records.append(rec)
    counts = relation_counts(records)
    if header and "counts" in header and dict(header["counts"]) != counts:
        raise ParseError(path, 1, f"header counts {header['counts']} do not match records {counts}")
    log.info("ingested %d records from %s: %s", len(records), path, counts)
    return records


def relation_counts(records: Iterable[CudrRecord]) -> dict[str, int]:
    return dict(sorted(Counter(r.relation for r in records).items()))


def write_cudr(path: str | os.PathLike, records: Sequence[CudrRecord], header: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(json.dumps({"cudr_header": {"version": 1, "counts": relation_counts(records)}}) + "\n")
        for r in records:
            f.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


# --- prompts and pairs -----------------------------------------------------


def render_prompt(record: CudrRecord, direction: str = "original", style: str = "minimal") -> tuple[str, str, str]:
    """Return ``(prompt, answer, distractor)`` for one direction of a record."""
    if direction == "original":
        conn, answer, distractor = record.conn, record.arg2, record.arg2_cf
    elif direction == "counterfactual":
        conn, answer, distractor = record.conn_cf, record.arg2_cf, record.arg2
    else:
        raise TaskError(f"unknown direction {direction!r}")
    return _prompt_prefix(record, style) + " " + conn, answer, distractor


def _prompt_prefix(record: CudrRecord, style: str) -> str:
    if style == "minimal":
        return record.arg1
    if style == "full":
        return f'{INSTRUCTION} "{record.arg2}" or "{record.arg2_cf}"\nTo complete: {record.arg1}'
    raise TaskError(f"unknown prompt style {style!r}")


@dataclass(frozen=True)
class ContrastivePair:
    clean: tuple[int, ...]
    corrupt: tuple[int, ...]
    answer: int
    distractor: int
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(self.clean) != len(self.corrupt):
            raise PairRejected(f"clean/corrupt lengths differ: {len(self.clean)} vs {len(self.corrupt)}")
        if self.answer == self.distractor:
            raise PairRejected(f"answer and distractor share token {self.answer}")


def first_token(tokenizer: Tokenizer, text: str) -> int:
    ids = tokenizer.encode(" " + text.lstrip())
    if not ids:
        raise PairRejected(f"completion {text!r} encodes to no tokens")
    return ids[0]


def to_pair(
    record: CudrRecord,
    tokenizer: Tokenizer | None = None,
    direction: str = "original",
    style: str = "minimal",
) -> ContrastivePair:
    """Clean run uses ``direction``'s connective, corrupt run the other one.

    Unequal connective lengths are padded with end-of-text tokens inserted
    just before the shorter connective, so the shared prefix (instruction and
    Arg1) keeps identical positions and both prompts end on their connective.
    """
    if direction not in ("original", "counterfactual"):
        raise TaskError(f"unknown direction {direction!r}")
    swap = direction == "counterfactual"
    meta = {
        "source_id": record.source_id,
        "relation": record.relation_cf if swap else record.relation,
        "relation_cf": record.relation if swap else record.relation_cf,
        "framework": record.framework,
        "direction": direction,
        "padded": 0,
    }
    if tokenizer is None:
        if not record.pretokenized:
            raise TaskError(f"record {record.source_id} needs a tokenizer (no token fields)")
        clean, corrupt = list(record.tokens_clean), list(record.tokens_corrupt)
        ans, dis = record.tokens_arg2[0], record.tokens_arg2_cf[0]
        if swap:
            clean, corrupt, ans, dis = corrupt, clean, dis, ans
        if len(clean) != len(corrupt):
            raise PairRejected(f"record {record.source_id}: pre-tokenized prompts differ in length")
    else:
        prefix = tokenizer.encode(_prompt_prefix(record, style))
        c_ori = tokenizer.encode(" " + record.conn)
        c_cf = tokenizer.encode(" " + record.conn_cf)
        c_clean, c_corrupt = (c_cf, c_ori) if swap else (c_ori, c_cf)
        pad = tokenizer.eot_id
        diff = len(c_clean) - len(c_corrupt)
        if diff and pad is None:
            raise PairRejected("connectives differ in token length and the tokenizer has no end-of-text token")
        if diff > 0:
            c_corrupt = [pad] * diff + c_corrupt
        elif diff < 0:
            c_clean = [pad] * (-diff) + c_clean
        meta["padded"] = abs(diff)
        clean, corrupt = prefix + c_clean, prefix + c_corrupt
        a_text, d_text = (record.arg2_cf, record.arg2) if swap else (record.arg2, record.arg2_cf)
        ans, dis = first_token(tokenizer, a_text), first_token(tokenizer, d_text)
    if ans == dis:
        raise PairRejected(f"record {record.source_id}: Arg2 and Arg2' share their first token {ans}")
    return ContrastivePair(tuple(clean), tuple(corrupt), int(ans), int(dis), meta)


def pairs_from_records(
    records: Iterable[CudrRecord],
    tokenizer: Tokenizer | None = None,
    direction: str = "original",
    style: str = "minimal",
) -> tuple[list[ContrastivePair], int]:
    """Convert records, skipping (and counting) rejected pairs."""
    pairs, rejected = [], 0
    for r in records:
        try:
            pairs.append(to_pair(r, tokenizer, direction, style))
        except PairRejected as exc:
            rejected += 1
            log.warning("rejected pair: %s", exc)
    return pairs, rejected


@dataclass
class TaskBatch:
    pairs: list[ContrastivePair]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pairs:
            raise TaskError("a task batch needs at least one pair")
        lengths = {len(p.clean) for p in self.pairs}
        if len(lengths) != 1:
            raise TaskError(f"non-uniform sequence lengths in batch: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def seq_len(self) -> int:
        return len(self.pairs[0].clean)

    @property
    def clean(self) -> np.ndarray:
        return np.array([p.clean for p in self.pairs], dtype=np.int64)

    @property
    def corrupt(self) -> np.ndarray:
        return np.array([p.corrupt for p in self.pairs], dtype=np.int64)

    @property
    def answers(self) -> np.ndarray:
        return np.array([p.answer for p in self.pairs], dtype=np.int64)

    @property
    def distractors(self) -> np.ndarray:
        return np.array([p.distractor for p in self.pairs], dtype=np.int64)

    def metric(self, scale: float = 1.0) -> "LogitDiff":
        return LogitDiff(self.answers, self.distractors, scale)

    def subset(self, idx) -> "TaskBatch":
        return TaskBatch([self.pairs[i] for i in idx], dict(self.provenance))

    def sample(self, rng: np.random.Generator, n: int) -> "TaskBatch":
        """``n`` pairs drawn without replacement (with replacement if n exceeds the pool)."""
        replace = n > len(self.pairs)
        idx = rng.choice(len(self.pairs), size=n, replace=replace)
        out = self.subset(idx)
        out.provenance["sample"] = {"n": n, "replace": bool(replace)}
        return out

    def where(self, **meta) -> "TaskBatch":
        keep = [p for p in self.pairs if all(p.meta.get(k) == v for k, v in meta.items())]
        return TaskBatch(keep, dict(self.provenance, filter=meta))

    def swapped(self) -> "TaskBatch":
        """Reverse the patching direction (noising instead of denoising)."""
        pairs = [ContrastivePair(p.corrupt, p.clean, p.distractor, p.answer, dict(p.meta)) for p in self.pairs]
        return TaskBatch(pairs, dict(self.provenance, swapped=True))


def make_batch(pairs: Sequence[ContrastivePair], pad_id: int, provenance: dict | None = None) -> TaskBatch:
    """Left-pad every pair to the longest sequence so the batch is uniform."""
    width = max(len(p.clean) for p in pairs)
    out = []
    for p in pairs:
        n = width - len(p.clean)
        if n:
            meta = dict(p.meta, padded=p.meta.get("padded", 0) + n)
            p = ContrastivePair((pad_id,) * n + p.clean, (pad_id,) * n + p.corrupt, p.answer, p.distractor, meta)
        out.append(p)
    return TaskBatch(out, provenance or {})


# --- metric ----------------------------------------------------------------


@dataclass
class LogitDiff:
    """Per-sample ``scale * (logit[final, answer] - logit[final, distractor])``."""

    answers: np.ndarray
    distractors: np.ndarray
    scale: float = 1.0

    def __call__(self, logits: Tensor) -> Tensor:
        rows = np.arange(len(self.answers))
        a = T.getitem(logits, (rows, -1, self.answers))
        d = T.getitem(logits, (rows, -1, self.distractors))
        diff = T.sub(a, d)
        return diff if self.scale == 1.0 else T.mul(diff, self.scale)

    def value(self, logits: np.ndarray) -> np.ndarray:
        rows = np.arange(len(self.answers))
        final = logits[:, -1, :].astype(np.float64)
        return self.scale * (final[rows, self.answers] - final[rows, self.distractors])

    def scaled(self, c: float) -> "LogitDiff":
        return LogitDiff(self.answers, self.distractors, self.scale * c)


def logit_diff_metric(logits: np.ndarray, pair: ContrastivePair | TaskBatch) -> np.ndarray:
    if isinstance(pair, ContrastivePair):
        pair = TaskBatch([pair])
    logits = np.asarray(logits)
    if logits.ndim == 2:
        logits = logits[None]
    return pair.metric().value(logits)


# --- text-level generators -------------------------------------------------


@dataclass(frozen=True)
class PromptPair:
    clean: str
    corrupt: str
    answer: str
    distractor: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)


def encode_prompt_pairs(prompts: Sequence[PromptPair], tokenizer: Tokenizer, provenance: dict | None = None) -> TaskBatch:
    pairs = []
    for p in prompts:
        clean, corrupt = tokenizer.encode(p.clean), tokenizer.encode(p.corrupt)
        n = len(clean) - len(corrupt)
        if n > 0:
            corrupt = [tokenizer.eot_id] * n + corrupt
        elif n < 0:
            clean = [tokenizer.eot_id] * (-n) + clean
        pairs.append(
            ContrastivePair(
                tuple(clean), tuple(corrupt), first_token(tokenizer, p.answer), first_token(tokenizer, p.distractor),
                dict(p.meta),
            )
        )
    return make_batch(pairs, tokenizer.eot_id, provenance)


IOI_NAMES = ("John", "Mary", "Tom", "James", "Dan", "Sarah", "Paul", "Mike", "Anna", "Kate")
IOI_PLACES = ("bar", "store", "park", "school", "beach", "house")
IOI_OBJECTS = ("beer", "drink", "book", "gift", "ball", "ring")
IOI_TEMPLATES = (
    "{a} and {b} went to a {place}. {b} gave a {obj} to",
    "{a} and {b} went to a {place}. {b} handed a {obj} to",
    "{a} and {b} went to a {place}. {b} passed a {obj} to",
)


def ioi_prompts(rng: np.random.Generator, n: int) -> list[PromptPair]:
    """IOI prompts; the clean answer is the indirect object, corrupt repeats the other name.

    Answers are balanced: every name is the answer floor(n/10) or ceil(n/10) times.
    """
    if n < 1:
        raise TaskError("n must be >= 1")
    names = list(IOI_NAMES)
    answers = names * (n // len(names)) + list(rng.choice(names, size=n % len(names), replace=False))
    rng.shuffle(answers)
    out = []
    for a in answers:
        b = str(rng.choice([x for x in names if x != a]))
        tmpl = IOI_TEMPLATES[int(rng.integers(len(IOI_TEMPLATES)))]
        place = str(rng.choice(IOI_PLACES))
        obj = str(rng.choice(IOI_OBJECTS))
        clean = tmpl.format(a=a, b=b, place=place, obj=obj)
        corrupt = tmpl.format(a=a, b=b, place=place, obj=obj).rsplit(f". {b} ", 1)
        corrupt = f"{corrupt[0]}. {a} {corrupt[1]}"
        out.append(PromptPair(clean, corrupt, str(a), b, {"task": "ioi", "answer": str(a)}))
    return out


def gen_ioi(rng: np.random.Generator, n: int, tokenizer: Tokenizer) -> TaskBatch:
    return encode_prompt_pairs(ioi_prompts(rng, n), tokenizer, {"generator": "ioi", "n": n})


def ioi_vocabulary() -> list[str]:
    words = set(IOI_NAMES) | set(IOI_PLACES) | set(IOI_OBJECTS)
    for t in IOI_TEMPLATES:
        words.update(w for w in t.replace("{", " {").split() if not w.startswith("{"))
    words.update(f"{p}." for p in IOI_PLACES)
    return sorted(words)


FEATURES = ("antonymy", "synonymy", "negation", "modality", "coreference")

_ANTONYMS = (("bright", "dark"), ("clear", "confusing"), ("hot", "cold"), ("happy", "sad"),
             ("full", "empty"), ("early", "late"), ("strong", "weak"), ("rich", "poor"))
_ANTONYM_FRAMES = ("The {noun} was {adj}, far from", "The {noun} was {adj}, unlike")
_ANTONYM_NOUNS = ("sky", "room", "day", "story", "answer")
_SYNONYMS = (("narrow", "slim"), ("big", "large"), ("quick", "fast"), ("small", "tiny"),
             ("smart", "clever"), ("tune", "melody"))
_SYNONYM_FRAMES = ("The road was {adj}, and the alley even",)
_NEGATION_ADJS = ("easy", "simple", "quick", "short", "calm")
_NEGATION_FRAME = "He expected an {adj} task, {conn} it was"
_SHOULD = ("To stay healthy and fit, you", "To pass the exam, you", "To catch the early train, you")
_COULD = ("With enough practice and support, they eventually", "With more time and help, they eventually")
_COREF = (("Lisa", "She"), ("John", "He"), ("Anna", "She"), ("Tom", "He"), ("Mary", "She"), ("Paul", "He"))
_COREF_FRAMES = ("{name} loves painting, and", "{name} went to the store because")


def feature_prompts(feature: str, rng: np.random.Generator, n: int) -> list[PromptPair]:
    """Template instances for one linguistic feature.

    The corrupt prompt changes the anchor word (the cue that determines the
    target), so clean and corrupt targets differ.  Modality has no single
    anchor word; its corrupt prompt uses a context from the other modal family.
    """
    if feature not in FEATURES:
        raise TaskError(f"unknown feature {feature!r}; expected one of {FEATURES}")
    if n < 1:
        raise TaskError("n must be >= 1")
    out = []
    for _ in range(n):
        if feature == "antonymy":
            a, b = _ANTONYMS[int(rng.integers(len(_ANTONYMS)))]
            frame = _ANTONYM_FRAMES[int(rng.integers(len(_ANTONYM_FRAMES)))]
            noun = str(rng.choice(_ANTONYM_NOUNS))
            out.append(PromptPair(frame.format(noun=noun, adj=a), frame.format(noun=noun, adj=b), b, a))
        elif feature == "synonymy":
            i = int(rng.integers(len(_SYNONYMS)))
            j = (i + 1 + int(rng.integers(len(_SYNONYMS) - 1))) % len(_SYNONYMS)
            (a, sa), (b, sb) = _SYNONYMS[i], _SYNONYMS[j]
            frame = _SYNONYM_FRAMES[0]
            out.append(PromptPair(frame.format(adj=a), frame.format(adj=b), sa, sb))
        elif feature == "negation":
            adj = str(rng.choice(_NEGATION_ADJS))
            out.append(PromptPair(_NEGATION_FRAME.format(adj=adj, conn="but"), _NEGATION_FRAME.format(adj=adj, conn="and"), "not", adj))
        elif feature == "modality":
            if rng.random() < 0.5:
                out.append(PromptPair(str(rng.choice(_SHOULD)), str(rng.choice(_COULD)), "should", "could"))
            else:
                out.append(PromptPair(str(rng.choice(_COULD)), str(rng.choice(_SHOULD)), "could", "should"))
        else:
            i = int(rng.integers(len(_COREF)))
            name, pron = _COREF[i]
            others = [c for c in _COREF if c[1] != pron]
            other, other_pron = others[int(rng.integers(len(others)))]
            frame = _COREF_FRAMES[int(rng.integers(len(_COREF_FRAMES)))]
            out.append(PromptPair(frame.format(name=name), frame.format(name=other), pron, other_pron))
    return [PromptPair(p.clean, p.corrupt, p.answer, p.distractor, {"task": feature}) for p in out]


def gen_feature_task(feature: str, rng: np.random.Generator, n: int, tokenizer: Tokenizer) -> TaskBatch:
    return encode_prompt_pairs(feature_prompts(feature, rng, n), tokenizer, {"generator": feature, "n": n})


# --- toy CuDR --------------------------------------------------------------


@dataclass(frozen=True)
class ToyRelation:
    label: str
    conn: str
    conn_cf: str


@dataclass(frozen=True)
class ToyCudrSpec:
    """A formal mini-language ``BOS S P CONN -> rule[CONN][P]``.

    ``rules`` maps each connective to the answer index chosen for every
    predicate; answers are the tokens ``A0..A{n_answers-1}``.
    """

    n_subjects: int
    n_predicates: int
    rules: dict[str, tuple[int, ...]]
    relations: tuple[ToyRelation, ...]
    n_answers: int | None = None

    def __post_init__(self):
        n_ans = self.n_answers or self.n_predicates
        object.__setattr__(self, "n_answers", n_ans)
        if self.n_subjects < 1 or self.n_predicates < 1:
            raise TaskError("toy spec needs at least one subject and one predicate")
        for conn, rule in self.rules.items():
            if len(rule) != self.n_predicates:
                raise TaskError(f"rule for {conn!r} covers {len(rule)} predicates, expected {self.n_predicates}")
            if any(not 0 <= a < n_ans for a in rule):
                raise TaskError(f"rule for {conn!r} uses an answer index outside [0, {n_ans})")
            if len(set(rule)) != len(rule):
                raise TaskError(f"rule for {conn!r} is not injective over predicates")
        for rel in self.relations:
            for c in (rel.conn, rel.conn_cf):
                if c not in self.rules:
                    raise TaskError(f"relation {rel.label!r} uses unknown connective {c!r}")
            clash = [p for p in range(self.n_predicates) if self.rules[rel.conn][p] == self.rules[rel.conn_cf][p]]
            if clash:
                raise TaskError(f"relation {rel.label!r}: {rel.conn!r} and {rel.conn_cf!r} agree on predicates {clash}")

    @classmethod
    def from_shifts(cls, n_subjects: int, n_predicates: int, shifts: dict[str, int], relations) -> "ToyCudrSpec":
        rules = {c: tuple((p + s) % n_predicates for p in range(n_predicates)) for c, s in shifts.items()}
        return cls(n_subjects, n_predicates, rules, tuple(ToyRelation(*r) for r in relations))

    def vocabulary(self) -> list[str]:
        return (
            ["<|endoftext|>", "<bos>"]
            + [f"S{i}" for i in range(self.n_subjects)]
            + [f"P{i}" for i in range(self.n_predicates)]
            + [f"<{c}>" for c in self.rules]
            + [f"A{i}" for i in range(self.n_answers)]
        )

    def token_ids(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.vocabulary())}

    def prompt(self, s: int, p: int, conn: str) -> tuple[int, ...]:
        ids = self.token_ids()
        return (ids["<bos>"], ids[f"S{s}"], ids[f"P{p}"], ids[f"<{conn}>"])

    def answer(self, p: int, conn: str) -> int:
        return self.token_ids()[f"A{self.rules[conn][p]}"]

    def all_prompts(self, conn: str) -> list[tuple[int, ...]]:
        return [self.prompt(s, p, conn) for s in range(self.n_subjects) for p in range(self.n_predicates)]

    def training_set(self) -> tuple[np.ndarray, np.ndarray]:
        """Every (prompt, correct answer) over all subjects, predicates and connectives."""
        xs, ys = [], []
        for conn in self.rules:
            for s in range(self.n_subjects):
                for p in range(self.n_predicates):
                    xs.append(self.prompt(s, p, conn))
                    ys.append(self.answer(p, conn))
        return np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_predicates": self.n_predicates,
            "n_answers": self.n_answers,
            "rules": {k: list(v) for k, v in self.rules.items()},
            "relations": [asdict(r) for r in self.relations],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToyCudrSpec":
        return cls(
            obj["n_subjects"], obj["n_predicates"], {k: tuple(v) for k, v in obj["rules"].items()},
            tuple(ToyRelation(**r) for r in obj["relations"]), obj.get("n_answers"),
        )


def default_toy_spec() -> ToyCudrSpec:
    """Two connectives, one relation: ``so`` vs ``but``."""
    return ToyCudrSpec.from_shifts(8, 8, {"so": 0, "but": 3}, [("Contingency.Result", "so", "but")])


def hierarchy_toy_spec() -> ToyCudrSpec:
    """Six relations over seven connectives, mirroring part of the PDTB connective table."""
    shifts = {"however": 0, "because": 1, "by_comparison": 2, "specifically": 3, "so": 4, "then": 5, "previously": 6}
    relations = [
        ("Comparison.Concession.Arg2-as-denier", "however", "because"),
        ("Comparison.Contrast", "by_comparison", "specifically"),
        ("Contingency.Reason", "because", "so"),
        ("Contingency.Result", "so", "because"),
        ("Temporal.Asynchronous.Precedence", "then", "previously"),
        ("Temporal.Asynchronous.Succession", "previously", "then"),
    ]
    return ToyCudrSpec.from_shifts(8, 8, shifts, relations)


def gen_toy_cudr(
    rng: np.random.Generator, spec: ToyCudrSpec, n: int | None = None, relation: str | None = None
) -> tuple[TaskBatch, list[str]]:
    """Toy CuDR pairs: clean and corrupt differ only in the connective token.

    With ``n=None`` every (subject, predicate, relation) combination appears
    once, in order; otherwise ``n`` are drawn uniformly.
    """
    rels = [r for r in spec.relations if relation is None or r.label == relation]
    if not rels:
        raise TaskError(f"relation {relation!r} not in toy spec")
    combos = [(r, s, p) for r in rels for s in range(spec.n_subjects) for p in range(spec.n_predicates)]
    if n is not None:
        if n < 1:
            raise TaskError("n must be >= 1")
        combos = [combos[i] for i in rng.integers(len(combos), size=n)]
    pairs = [
        ContrastivePair(
            spec.prompt(s, p, r.conn), spec.prompt(s, p, r.conn_cf), spec.answer(p, r.conn), spec.answer(p, r.conn_cf),
            {"relation": r.label, "subject": s, "predicate": p},
        )
        for r, s, p in combos
    ]
    prov = {"generator": "toy-cudr", "n": len(pairs), "relation": relation}
    return TaskBatch(pairs, prov), spec.vocabulary()


# --- pre-tokenized pair files ----------------------------------------------


def write_pairs(path: str | os.PathLike, batch: TaskBatch, vocab: Sequence[str] | None = None, extra: dict | None = None) -> None:
    header = {"cudr_pairs": 1, "provenance": batch.provenance}
    if vocab is not None:
        header["vocab"] = list(vocab)
    if extra:
        header.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for p in batch.pairs:
            row = {"clean": list(p.clean), "corrupt": list(p.corrupt), "answer": p.answer, "distractor": p.distractor, "meta": p.meta}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_pairs(path: str | os.PathLike) -> tuple[TaskBatch, dict]:
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ParseError(path, 1, "empty pair file")
    header = json.loads(lines[0])
    if not isinstance(header, dict) or "cudr_pairs" not in header:
        raise ParseError(path, 1, "missing cudr_pairs header")
    pairs = []
    for lineno, line in enumerate(lines[1:], 2):
        try:
            row = json.loads(line)
            pairs.append(ContrastivePair(tuple(row["clean"]), tuple(row["corrupt"]), row["answer"], row["distractor"], row.get("meta", {})))
        except (KeyError, json.JSONDecodeError, TaskError) as exc:
            raise ParseError(path, lineno, f"bad pair: {exc}") from None
    return TaskBatch(pairs, header.get("provenance", {})), header
