"""Byte-level BPE tokenizer trained from scratch.

The base alphabet is the 256 byte values, so decode(encode(s)) == s for any
byte string. Merge training is greedy most-frequent-pair with lexicographic
tie-breaking, counted within entity tokens so a merge never crosses an
entity boundary. A tokenizer that leaves ordinary request words as short
fragmented pieces can make normal traffic look irregular downstream, so
recurring entities should collapse into whole-word symbols.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from pathlib import Path

from ..errors import UnknownId, VocabTooSmall
from ..ingest import RequestCorpus, tokenize_entities

PAD, UNK, CLS, SEP, MASK, IGN = "<PAD>", "<UNK>", "<CLS>", "<SEP>", "<MASK>", "<IGN>"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, IGN)
N_SPECIALS = len(SPECIAL_TOKENS)
BYTE_OFFSET = N_SPECIALS
MIN_VOCAB = 256 + N_SPECIALS

_CHUNK_RE = re.compile(rb" ?[A-Za-z0-9]+| ?[^\sA-Za-z0-9]+|\s+")


@lru_cache()
def _byte_to_unicode() -> dict[int, str]:
    """Map every byte to a printable unicode char for text-file vocab storage."""
    visible = (list(range(ord("!"), ord("~") + 1))
               + list(range(ord("\xa1"), ord("\xac") + 1))
               + list(range(ord("\xae"), ord("\xff") + 1)))
    chars = visible[:]
    n = 0
    for b in range(256):
        if b not in visible:
            visible.append(b)
            chars.append(256 + n)
            n += 1
    return dict(zip(visible, (chr(c) for c in chars)))


def _symbol_repr(symbol: bytes) -> str:
    table = _byte_to_unicode()
    return "".join(table[b] for b in symbol)


def _symbol_from_repr(text: str) -> bytes:
    inverse = {c: b for b, c in _byte_to_unicode().items()}
    return bytes(inverse[ch] for ch in text)


class BbpeTokenizer:
    """Byte alphabet + ordered merges + special ids."""

    def __init__(self, merges: list[tuple[bytes, bytes]]):
        self.merges = list(merges)
        self.merge_rank = {pair: i for i, pair in enumerate(self.merges)}
        self.specials = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        self.symbol_to_id: dict[bytes, int] = {
            bytes([b]): BYTE_OFFSET + b for b in range(256)}
        for left, right in self.merges:
            joined = left + right
            if joined not in self.symbol_to_id:
                self.symbol_to_id[joined] = N_SPECIALS + len(self.symbol_to_id)
        self.id_to_symbol = {i: s for s, i in self.symbol_to_id.items()}
        self._chunk_cache: dict[bytes, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + len(self.symbol_to_id)

    @property
    def pad_id(self) -> int:
        return self.specials[PAD]

    @property
    def cls_id(self) -> int:
        return self.specials[CLS]

    @property
    def sep_id(self) -> int:
        return self.specials[SEP]

    @property
    def mask_id(self) -> int:
        return self.specials[MASK]

    def is_special(self, token_id: int) -> bool:
        return token_id < N_SPECIALS

    def _bpe(self, chunk: bytes) -> list[bytes]:
        parts = [bytes([b]) for b in chunk]
        while len(parts) > 1:
            best_rank, best_idx = None, -1
            for i in range(len(parts) - 1):
                rank = self.merge_rank.get((parts[i], parts[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_idx = rank, i
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            merged: list[bytes] = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == left and parts[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def encode_bytes(self, data: bytes) -> list[int]:
        ids: list[int] = []
        for m in _CHUNK_RE.finditer(data):
            chunk = m.group(0)
            cached = self._chunk_cache.get(chunk)
            if cached is None:
                cached = [self.symbol_to_id[s] for s in self._bpe(chunk)]
                if len(self._chunk_cache) < 1 << 16:
                    self._chunk_cache[chunk] = cached
            ids.extend(cached)
        return ids

    def decode_bytes(self, ids: list[int]) -> bytes:
        out = bytearray()
        for i in ids:
            symbol = self.id_to_symbol.get(i)
            if symbol is None:
                if 0 <= i < N_SPECIALS:
                    continue  # specials carry no bytes
                raise UnknownId(f"id {i} not in vocabulary")
            out.extend(symbol)
        return bytes(out)

    def encode(self, text: str) -> list[int]:
        return self.encode_bytes(text.encode("utf-8"))

    def decode(self, ids: list[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def id_text(self, token_id: int) -> str:
        """Decoded surface text of one learned symbol ('' for specials)."""
        if self.is_special(token_id):
            return ""
        return self.decode([token_id])


def train_bbpe(corpus: RequestCorpus, vocab_size: int, seed: int = 0) -> BbpeTokenizer:
    """Greedy most-frequent-pair merging until vocab_size or no pair repeats.

    Ties break on the lexicographically smallest pair; the procedure is
    deterministic, the seed is accepted for interface symmetry with the
    other trainers.
    """
    del seed
    if vocab_size < MIN_VOCAB:
        raise VocabTooSmall(f"vocab_size {vocab_size} < {MIN_VOCAB}")

    chunk_freq: dict[bytes, int] = {}
    for record in corpus:
        for token in tokenize_entities(record.raw):
            chunk = token.text.encode("utf-8")
            chunk_freq[chunk] = chunk_freq.get(chunk, 0) + 1

    sequences = {chunk: [bytes([b]) for b in chunk] for chunk in chunk_freq}
    merges: list[tuple[bytes, bytes]] = []
    budget = vocab_size - MIN_VOCAB

    while len(merges) < budget:
        pair_counts: dict[tuple[bytes, bytes], int] = {}
        for chunk, parts in sequences.items():
            freq = chunk_freq[chunk]
            for i in range(len(parts) - 1):
                pair = (parts[i], parts[i + 1])
                pair_counts[pair] = pair_counts.get(pair, 0) + freq
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        if pair_counts[best] < 2:
            break
        merges.append(best)
        left, right = best
        joined = left + right
        for chunk, parts in sequences.items():
            if len(parts) < 2:
                continue
            out: list[bytes] = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == left and parts[i + 1] == right:
                    out.append(joined)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            sequences[chunk] = out

    return BbpeTokenizer(merges)


def save_tokenizer(tokenizer: BbpeTokenizer, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab = {"specials": tokenizer.specials,
             "symbols": {_symbol_repr(s): i for s, i in tokenizer.symbol_to_id.items()}}
    (directory / "vocab.json").write_text(
        json.dumps(vocab, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    lines = [f"{_symbol_repr(l)} {_symbol_repr(r)}" for l, r in tokenizer.merges]
    (directory / "merges.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tokenizer(directory: str | Path) -> BbpeTokenizer:
    directory = Path(directory)
    merges = []
    for line in (directory / "merges.txt").read_text(encoding="utf-8").split("\n"):
        if line:
            left, right = line.split(" ")
            merges.append((_symbol_from_repr(left), _symbol_from_repr(right)))
    tokenizer = BbpeTokenizer(merges)
    vocab = json.loads((directory / "vocab.json").read_text(encoding="utf-8"))
    expected = {_symbol_from_repr(s): i for s, i in vocab["symbols"].items()}
    if expected != tokenizer.symbol_to_id:
        raise ValueError(f"vocab in {directory} does not match its merges")
    return tokenizer
