"""GPT-2 byte-level BPE reading the standard ``vocab.json`` / ``merges.txt``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import regex

GPT2_SPLIT_PATTERN = r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
_SPLIT = regex.compile(GPT2_SPLIT_PATTERN)

END_OF_TEXT = "<|endoftext|>"


class VocabError(ValueError):
    pass


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict:
    """The 256-entry byte -> printable unicode character table used by GPT-2."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) \
        + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _no_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise VocabError(f"duplicate token {k!r} in vocab")
        out[k] = v
    return out


@dataclass
class BpeVocab:
    encoder: dict
    merges: list
    byte_encoder: dict = field(default_factory=bytes_to_unicode)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.decoder = {v: k for k, v in self.encoder.items()}
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return len(self.encoder)

    @property
    def eos_id(self):
        return self.encoder.get(END_OF_TEXT)

    def _bpe(self, word: str) -> list:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        parts = list(word)
        ranks = self.ranks
        while len(parts) > 1:
            best = None
            best_rank = None
            for pair in zip(parts, parts[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == best[0] and parts[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        self._cache[word] = parts
        return parts

    def encode(self, text: str) -> list:
        ids = []
        be = self.byte_encoder
        for piece in _SPLIT.findall(text):
            word = "".join(be[b] for b in piece.encode("utf-8"))
            ids.extend(self.encoder[tok] for tok in self._bpe(word))
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i not in self.decoder:
                raise IndexError(f"token id {i} out of range [0, {self.size})")
            out.append(self.decoder[i])
        data = bytes(self.byte_decoder[c] for c in "".join(out))
        return data.decode("utf-8", errors="replace")


def parse_merges(lines) -> list:
    merges = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line or (lineno == 1 and line.startswith("#")):
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            raise VocabError(f"merges line {lineno}: expected two symbols, got {line!r}")
        merges.append((parts[0], parts[1]))
    return merges


def build_vocab(encoder: dict, merges: list) -> BpeVocab:
    """Validate a token->id map and merge list into a :class:`BpeVocab`."""
    ids = list(encoder.values())
    if any(not isinstance(i, int) or isinstance(i, bool) for i in ids):
        raise VocabError("vocab ids must be integers")
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for tok, i in encoder.items():
            if i in seen:
                dup = (tok, i)
                break
            seen.add(i)
        raise VocabError(f"duplicate id {dup[1]} (token {dup[0]!r})")
    if set(ids) != set(range(len(ids))):
        raise VocabError("vocab ids are not a contiguous range starting at 0")
    missing = [c for c in bytes_to_unicode().values() if c not in encoder]
    if missing:
        raise VocabError(f"vocab lacks {len(missing)} byte-level base symbols")
    for n, (a, b) in enumerate(merges, 1):
        for sym in (a, b, a + b):
            if sym not in encoder:
                raise VocabError(f"merge {n} ({a!r} {b!r}) references unknown symbol {sym!r}")
    return BpeVocab(encoder=dict(encoder), merges=list(merges))


def load_vocab(vocab_file, merges_file) -> BpeVocab:
    try:
        encoder = json.loads(Path(vocab_file).read_text(encoding="utf-8"),
                             object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise VocabError(f"{vocab_file}: malformed JSON: {exc}") from None
    if not isinstance(encoder, dict):
        raise VocabError(f"{vocab_file}: expected a JSON object")
    with open(merges_file, encoding="utf-8") as fh:
        merges = parse_merges(fh)
    return build_vocab(encoder, merges)


def byte_level_vocab() -> BpeVocab:
    """256-symbol vocabulary with no merges (every byte is a token)."""
    table = bytes_to_unicode()
    encoder = {table[b]: b for b in range(256)}
    return build_vocab(encoder, [])
