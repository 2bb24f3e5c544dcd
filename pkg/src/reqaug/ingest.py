"""Corpus loading, request normalization, entity tokenization, and splits.

A request flows through the pipeline as a single lowercase line: method,
path, decoded query, and (when present) selected headers and body, joined
by single spaces. Entity tokens are maximal alphanumeric runs plus one
token per punctuation character.
"""

from __future__ import annotations

import csv
import json
import math
import random
import re
from dataclasses import dataclass, replace
from pathlib import Path
from urllib.parse import unquote, unquote_plus

from .errors import (
    DegenerateSplit,
    EmptyCorpus,
    EmptyRequest,
    UnknownFormat,
    UnreadablePath,
)

NORMAL = "normal"
ABNORMAL = "abnormal"
LABELS = (NORMAL, ABNORMAL)

WORD = "word"
NUMBER = "number"
PUNCTUATION = "punctuation"

_REQUEST_LINE_RE = re.compile(r"^[A-Za-z]+\s+\S+(\s+HTTP/[\d.]+)?\s*$")


@dataclass(frozen=True)
class EntityToken:
    """One entity of a normalized request: a word, a number, or one punctuation char."""

    text: str
    position: int
    kind: str


@dataclass(frozen=True)
class RawRequestRecord:
    """One labeled API request, the unit flowing through every stage."""

    id: str
    raw: str
    label: str
    source_dataset: str
    attack_type: str | None = None
    split: str | None = None

    def __post_init__(self):
        if not self.raw:
            raise EmptyRequest(f"record {self.id!r} has empty raw text")
        if self.label not in LABELS:
            raise ValueError(f"record {self.id!r} has unknown label {self.label!r}")


@dataclass
class RequestCorpus:
    """An ordered collection of records with per-label counts."""

    records: list[RawRequestRecord]
    skipped: int = 0

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValueError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def label_counts(self) -> dict[str, int]:
        counts = {NORMAL: 0, ABNORMAL: 0}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def subset(self, label: str) -> "RequestCorpus":
        return RequestCorpus([r for r in self.records if r.label == label])


@dataclass
class CorpusSplit:
    train: RequestCorpus
    test: RequestCorpus
    train_fraction: float
    seed: int


def normalize_request(raw_http: str, include_headers: bool = False) -> str:
    """Collapse a (possibly multi-line) HTTP request into one canonical line.

    Lowercases everything, drops the protocol version, splits the target into
    path and query, percent-decodes path/query/body exactly once ('+' in
    query and body means space), and joins the parts with single spaces.
    Header lines are appended verbatim-lowercased when include_headers is set;
    attacks in some corpora live in header values.
    """
    lines = [ln.rstrip("\r") for ln in raw_http.split("\n")]
    while lines and not lines[0].strip():
        lines.pop(0)
    if not lines or not lines[0].strip():
        raise EmptyRequest("no request line present")

    parts = lines[0].split()
    method = parts[0]
    rest = parts[1:]
    if rest and rest[-1].lower().startswith("http/"):
        rest = rest[:-1]
    if not rest:
        raise EmptyRequest(f"request line {lines[0]!r} has no target")

    target = rest[0]
    trailing = rest[1:]  # already-normalized lines carry query text here
    if "?" in target:
        path, query = target.split("?", 1)
    else:
        path, query = target, ""

    pieces = [method, unquote(path)]
    if query:
        pieces.append(unquote_plus(query))
    pieces.extend(trailing)

    header_lines: list[str] = []
    body_lines: list[str] = []
    in_body = False
    for ln in lines[1:]:
        if in_body:
            body_lines.append(ln)
        elif not ln.strip():
            in_body = True
        else:
            header_lines.append(ln)

    if include_headers:
        pieces.extend(h.strip() for h in header_lines if h.strip())

    body = "\n".join(body_lines).strip()
    if body:
        pieces.append(unquote_plus(body))

    joined = " ".join(p for p in pieces if p)
    return re.sub(r"\s+", " ", joined).strip().lower()


def tokenize_with_separators(normalized: str) -> tuple[list[EntityToken], list[str]]:
    """Split a string into entity tokens plus the whitespace runs around them.

    separators[i] precedes tokens[i]; separators[-1] trails the last token, so
    detokenize() reconstructs the input exactly.
    """
    tokens: list[EntityToken] = []
    seps: list[str] = []
    buf: list[str] = []  # current alphanumeric run
    sep_buf: list[str] = []

    def flush_word():
        if buf:
            text = "".join(buf)
            kind = NUMBER if text.isascii() and text.isdigit() else WORD
            tokens.append(EntityToken(text, len(tokens), kind))
            buf.clear()

    for ch in normalized:
        if ch.isspace():
            flush_word()
            sep_buf.append(ch)
            continue
        is_plain = ch.isascii() and ch.isalnum()
        if is_plain or not ch.isascii():
            if not buf:
                seps.append("".join(sep_buf))
                sep_buf.clear()
            buf.append(ch)
        else:
            flush_word()
            seps.append("".join(sep_buf))
            sep_buf.clear()
            tokens.append(EntityToken(ch, len(tokens), PUNCTUATION))
    flush_word()
    seps.append("".join(sep_buf))
    return tokens, seps


def tokenize_entities(normalized: str) -> list[EntityToken]:
    """Entity tokens of a normalized request (whitespace emits no token)."""
    return tokenize_with_separators(normalized)[0]


def detokenize(tokens: list[EntityToken], separators: list[str]) -> str:
    if len(separators) != len(tokens) + 1:
        raise ValueError("need len(tokens) + 1 separators")
    out = []
    for sep, tok in zip(separators, tokens):
        out.append(sep)
        out.append(tok.text)
    out.append(separators[-1])
    return "".join(out)


def render_with_substitution(raw: str, position: int, new_text: str) -> str:
    """Re-render raw with the entity at `position` replaced, keeping separators."""
    tokens, seps = tokenize_with_separators(raw)
    texts = [t.text for t in tokens]
    texts[position] = new_text
    out = []
    for sep, text in zip(seps, texts):
        out.append(sep)
        out.append(text)
    out.append(seps[-1])
    return "".join(out)


# --- corpus I/O ---------------------------------------------------------------

CANONICAL = "canonical"
CSIC_RAW = "csic-raw"
ATRDF = "atrdf"
FORMATS = (CANONICAL, CSIC_RAW, ATRDF)


def record_to_json(record: RawRequestRecord, extra: dict | None = None) -> str:
    doc = {"id": record.id, "raw": record.raw, "label": record.label,
           "source_dataset": record.source_dataset}
    if record.attack_type is not None:
        doc["attack_type"] = record.attack_type
    if record.split is not None:
        doc["split"] = record.split
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def record_from_json(doc: dict) -> RawRequestRecord:
    return RawRequestRecord(
        id=str(doc["id"]),
        raw=doc["raw"],
        label=doc["label"],
        source_dataset=doc.get("source_dataset", "unknown"),
        attack_type=doc.get("attack_type"),
        split=doc.get("split"),
    )


def write_canonical(corpus: RequestCorpus, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(record_to_json(r) + "\n")


def _load_canonical(path: Path) -> RequestCorpus:
    # Canonical raw text is already normalized; re-normalizing would
    # percent-decode a second time and corrupt encoded payloads.
    records, skipped = [], 0
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(record_from_json(doc))
            except (json.JSONDecodeError, KeyError, ValueError, EmptyRequest):
                skipped += 1
    return RequestCorpus(records, skipped=skipped)


def _label_from_filename(name: str) -> str | None:
    low = name.lower()
    if "anom" in low or "attack" in low or "abnormal" in low:
        return ABNORMAL
    if "norm" in low:
        return NORMAL
    return None


def _split_http_blocks(text: str) -> list[str]:
    """Split a plain-text dump into one block per request line."""
    blocks: list[list[str]] = []
    for line in text.split("\n"):
        if _REQUEST_LINE_RE.match(line.strip()) and line.strip().lower().split()[0] in (
            "get", "post", "put", "delete", "head", "options", "patch", "trace", "connect",
        ):
            blocks.append([line])
        elif blocks:
            blocks[-1].append(line)
    return ["\n".join(b) for b in blocks]


def _load_csic_file(path: Path, label: str, records: list, counter: list) -> None:
    text = path.read_text(encoding="utf-8", errors="replace")
    for block in _split_http_blocks(text):
        try:
            raw = normalize_request(block)
            records.append(RawRequestRecord(
                id=f"{path.stem}-{len(records):06d}",
                raw=raw, label=label, source_dataset="csic2010"))
        except EmptyRequest:
            counter[0] += 1


def _load_csic(path: Path, label: str | None) -> RequestCorpus:
    records: list[RawRequestRecord] = []
    skipped = [0]
    if path.is_dir():
        for f in sorted(path.glob("*.txt")):
            file_label = _label_from_filename(f.name) or label
            if file_label is None:
                skipped[0] += 1
                continue
            _load_csic_file(f, file_label, records, skipped)
    else:
        file_label = label or _label_from_filename(path.name)
        if file_label is None:
            raise UnknownFormat(
                f"cannot infer label from {path.name!r}; pass label= explicitly")
        _load_csic_file(path, file_label, records, skipped)
    return RequestCorpus(records, skipped=skipped[0])


_ATRDF_REQUEST_COLS = ("request", "req", "http_request", "request_raw")
_ATRDF_LABEL_COLS = ("attack_type", "label", "classification", "class", "attack")
_ATRDF_NORMAL_VALUES = ("", "benign", "normal", "valid", "none", "legitimate")


def _load_atrdf(path: Path, label: str | None) -> RequestCorpus:
    """Delimited request/response pairs with attack-type labels.

    Headers stay in the normalized text for this format: several of its
    attack classes (cookie injection, log4j) carry the payload in a header.
    """
    records: list[RawRequestRecord] = []
    skipped = 0
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    for f in files:
        with f.open("r", encoding="utf-8", errors="replace", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                continue
            cols = {c.strip().lower(): c for c in reader.fieldnames}
            req_col = next((cols[c] for c in _ATRDF_REQUEST_COLS if c in cols), None)
            label_col = next((cols[c] for c in _ATRDF_LABEL_COLS if c in cols), None)
            if req_col is None:
                raise UnknownFormat(f"{f} has no request column (saw {reader.fieldnames})")
            for i, row in enumerate(reader):
                raw_req = (row.get(req_col) or "").strip()
                if not raw_req:
                    skipped += 1
                    continue
                attack = (row.get(label_col) or "").strip() if label_col else ""
                if label is not None:
                    rec_label, attack_type = label, attack or None
                elif attack.lower() in _ATRDF_NORMAL_VALUES:
                    rec_label, attack_type = NORMAL, None
                else:
                    rec_label, attack_type = ABNORMAL, attack
                try:
                    raw = normalize_request(raw_req, include_headers=True)
                    records.append(RawRequestRecord(
                        id=f"{f.stem}-{i:06d}", raw=raw, label=rec_label,
                        source_dataset="atrdf2023", attack_type=attack_type))
                except EmptyRequest:
                    skipped += 1
    return RequestCorpus(records, skipped=skipped)


def load_corpus(path: str | Path, format: str, label: str | None = None) -> RequestCorpus:
    """Load a corpus file or directory in one of the supported formats."""
    path = Path(path)
    if not path.exists():
        raise UnreadablePath(str(path))
    if format == CANONICAL:
        corpus = _load_canonical(path)
    elif format == CSIC_RAW:
        corpus = _load_csic(path, label)
    elif format == ATRDF:
        corpus = _load_atrdf(path, label)
    else:
        raise UnknownFormat(format)
    if not corpus.records:
        raise EmptyCorpus(f"no records parsed from {path}")
    return corpus


# --- splitting ------------------------------------------------------------------

def split_corpus(corpus: RequestCorpus, train_fraction: float, seed: int) -> CorpusSplit:
    """Stratified-by-label shuffle split, deterministic for a fixed seed.

    Per-label train counts follow largest-remainder allocation, so each label's
    train share matches train_fraction within one record. A label with two or
    more records must land on both sides; a singleton label may fall on either.
    """
    if not (0.0 < train_fraction < 1.0):
        raise DegenerateSplit(f"train_fraction {train_fraction} outside (0, 1)")

    by_label: dict[str, list[RawRequestRecord]] = {}
    for r in corpus.records:
        by_label.setdefault(r.label, []).append(r)

    total_train = round(train_fraction * len(corpus.records))
    shares = {lbl: train_fraction * len(recs) for lbl, recs in by_label.items()}
    alloc = {lbl: math.floor(s) for lbl, s in shares.items()}
    leftover = total_train - sum(alloc.values())
    order = sorted(by_label, key=lambda l: (-(shares[l] - alloc[l]), l))
    for lbl in order[:max(leftover, 0)]:
        alloc[lbl] += 1

    for lbl, recs in by_label.items():
        n_train = alloc[lbl]
        if len(recs) >= 2 and (n_train == 0 or n_train == len(recs)):
            raise DegenerateSplit(
                f"label {lbl!r} would put all {len(recs)} records on one side")

    rng = random.Random(seed)
    train: list[RawRequestRecord] = []
    test: list[RawRequestRecord] = []
    for lbl in sorted(by_label):
        recs = list(by_label[lbl])
        rng.shuffle(recs)
        n_train = alloc[lbl]
        train.extend(replace(r, split="train") for r in recs[:n_train])
        test.extend(replace(r, split="test") for r in recs[n_train:])

    train.sort(key=lambda r: r.id)
    test.sort(key=lambda r: r.id)
    if not train or not test:
        raise DegenerateSplit("one side of the split is empty")
    return CorpusSplit(RequestCorpus(train), RequestCorpus(test), train_fraction, seed)
