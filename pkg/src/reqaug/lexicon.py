"""Token frequency statistics and the reserved-token set excluded from masking.

High-frequency structural tokens (methods, delimiters) are fenced off behind
the threshold T = mean + z * std, computed over the vector of distinct-token
counts with the population standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

from .errors import EmptyCorpus, OutOfRange
from .ingest import RequestCorpus, tokenize_entities

IGNORE_MARKER = "<IGN>"


@dataclass(frozen=True)
class TokenFrequencyTable:
    """Occurrence counts of entity tokens over a training corpus."""

    counts: dict[str, int]
    total: int
    mean: float
    std: float

    def merged(self, other: "TokenFrequencyTable") -> "TokenFrequencyTable":
        counts = dict(self.counts)
        for tok, n in other.counts.items():
            counts[tok] = counts.get(tok, 0) + n
        return table_from_counts(counts)


@dataclass(frozen=True)
class ReservedTokenSet:
    """Tokens whose count strictly exceeds the threshold; never masked."""

    tokens: frozenset[str]
    threshold: float
    z: float
    confidence: float | None
    marker: str = IGNORE_MARKER

    def __contains__(self, text: str) -> bool:
        return text in self.tokens


def table_from_counts(counts: dict[str, int]) -> TokenFrequencyTable:
    if not counts:
        raise EmptyCorpus("no tokens counted")
    values = list(counts.values())
    total = sum(values)
    mean = total / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return TokenFrequencyTable(counts=dict(counts), total=total, mean=mean,
                               std=math.sqrt(var))


def build_frequency_table(corpus: RequestCorpus) -> TokenFrequencyTable:
    """Count every entity-token occurrence across the corpus."""
    if not len(corpus):
        raise EmptyCorpus("corpus has no records")
    counts: dict[str, int] = {}
    for record in corpus:
        for token in tokenize_entities(record.raw):
            counts[token.text] = counts.get(token.text, 0) + 1
    return table_from_counts(counts)


def z_from_confidence(confidence: float, override: float | None = None) -> float:
    """One-sided standard-normal inverse CDF at the confidence level.

    An explicit override bypasses the computation and is returned verbatim;
    it exists because a deployment may pin a z value that no standard
    quantile reproduces.
    """
    if override is not None:
        return override
    if not (0.0 < confidence < 1.0):
        raise OutOfRange(f"confidence {confidence} outside (0, 1)")
    return NormalDist().inv_cdf(confidence)


def frequency_threshold(table: TokenFrequencyTable, z: float) -> float:
    """T = mean + z * std over the distinct-token count vector."""
    return table.mean + z * table.std


def reserved_tokens(table: TokenFrequencyTable, threshold: float,
                    z: float = 0.0, confidence: float | None = None) -> ReservedTokenSet:
    """Exactly the tokens whose count strictly exceeds the threshold."""
    members = frozenset(t for t, n in table.counts.items() if n > threshold)
    return ReservedTokenSet(tokens=members, threshold=threshold, z=z,
                            confidence=confidence)


def build_reserved(corpus: RequestCorpus, confidence: float = 0.9999,
                   z_override: float | None = None) -> tuple[TokenFrequencyTable, ReservedTokenSet]:
    """Frequency table plus reserved set in one pass, as the pipeline uses them."""
    table = build_frequency_table(corpus)
    z = z_from_confidence(confidence, override=z_override)
    threshold = frequency_threshold(table, z)
    return table, reserved_tokens(table, threshold, z=z, confidence=confidence)


def save_reserved(reserved: ReservedTokenSet, path: str | Path) -> None:
    """Manifest line (JSON) followed by the member tokens, one per line, sorted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"threshold": reserved.threshold, "z": reserved.z,
                "confidence": reserved.confidence, "marker": reserved.marker}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True) + "\n")
        for tok in sorted(reserved.tokens):
            fh.write(tok + "\n")


def load_reserved(path: str | Path) -> ReservedTokenSet:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    manifest = json.loads(lines[0])
    tokens = frozenset(t for t in lines[1:] if t)
    return ReservedTokenSet(tokens=tokens, threshold=manifest["threshold"],
                            z=manifest["z"], confidence=manifest["confidence"],
                            marker=manifest.get("marker", IGNORE_MARKER))
