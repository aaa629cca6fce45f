"""Byte-level BPE (GPT-2 convention) and a whitespace tokenizer for toy vocabularies."""

from __future__ import annotations

import json
import os
from functools import lru_cache

import regex

from . import kernels

# contractions, letter runs, digit runs, other runs, trailing/other whitespace
GPT2_PATTERN = regex.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")

EOT = "<|endoftext|>"


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable unicode mapping used by GPT-2 vocabularies."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


class BPETokenizer:
    """GPT-2 byte-level BPE.

    ``vocab`` maps token strings (in byte-to-unicode space) to ids, which must
    be dense in ``[0, len(vocab))``.  ``merges`` is the ranked list of symbol
    pairs, rank = list position.
    """

    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]], eot_token: str = EOT):
        ids = sorted(vocab.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense from 0")
        self.encoder = dict(vocab)
        self.decoder = {i: t for t, i in vocab.items()}
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        missing = [c for c in self.byte_encoder.values() if c not in self.encoder]
        # symbols produced by merges but absent from the vocab get ids past the vocab
        self._symbols = dict(self.encoder)
        for c in missing:
            self._symbols[c] = len(self._symbols)
        self._merges: dict[int, int] = {}
        for rank, (a, b) in enumerate(merges):
            for s in (a, b, a + b):
                if s not in self._symbols:
                    self._symbols[s] = len(self._symbols)
            key = (self._symbols[a] << 32) | self._symbols[b]
            if key not in self._merges:
                self._merges[key] = (rank << 32) | self._symbols[a + b]
        self._symbol_names = {i: s for s, i in self._symbols.items()}
        self._cache: dict[str, tuple[int, ...]] = {}
        self.eot_id = self.encoder.get(eot_token)

    @classmethod
    def from_files(cls, vocab_path: str | os.PathLike, merges_path: str | os.PathLike) -> "BPETokenizer":
        with open(vocab_path, encoding="utf-8") as f:
            vocab = json.load(f)
        merges = []
        with open(merges_path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.rstrip("\n")
                if (i == 0 and line.startswith("#")) or not line.strip():
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise ValueError(f"{merges_path}:{i + 1}: expected two space-separated symbols")
                merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def _bpe(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        merged = kernels.bpe_merge([self._symbols[ch] for ch in word], self._merges)
        out = []
        for sym in merged:
            if sym >= len(self.encoder):
                raise KeyError(f"BPE produced symbol {self._symbol_names[sym]!r} missing from the vocabulary")
            out.append(sym)
        result = tuple(out)
        if len(self._cache) < 100_000:
            self._cache[word] = result
        return result

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in GPT2_PATTERN.findall(text):
            word = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            ids.extend(self._bpe(word))
        return ids

    def decode(self, ids) -> str:
        text = "".join(self.decoder[int(i)] for i in ids)
        return bytes(self.byte_decoder[c] for c in text).decode("utf-8", errors="replace")

    def token_str(self, i: int) -> str:
        return self.decode([i])


class WordTokenizer:
    """Whitespace tokenizer over a closed vocabulary; words carry a leading space after the first."""

    def __init__(self, words: list[str], eot_token: str = EOT):
        seen: dict[str, int] = {}
        for w in [eot_token] + list(words):
            if w not in seen:
                seen[w] = len(seen)
        self.encoder = seen
        self.decoder = {i: w for w, i in seen.items()}
        self.eot_id = seen[eot_token]

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def encode(self, text: str) -> list[int]:
        out = []
        for w in text.split():
            if w not in self.encoder:
                raise KeyError(f"word {w!r} is not in the vocabulary")
            out.append(self.encoder[w])
        return out

    def decode(self, ids) -> str:
        return " ".join(self.decoder[int(i)] for i in ids)

    def token_str(self, i: int) -> str:
        return self.decoder[int(i)]
