import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reqaug.errors import EmptyCorpus, OutOfRange
from reqaug.ingest import RawRequestRecord, RequestCorpus
from reqaug.lexicon import (
    build_frequency_table,
    frequency_threshold,
    load_reserved,
    reserved_tokens,
    save_reserved,
    table_from_counts,
    z_from_confidence,
)


def corpus_of(*raws):
    return RequestCorpus([
        RawRequestRecord(id=f"r{i}", raw=raw, label="normal", source_dataset="t")
        for i, raw in enumerate(raws)])


def inv_cdf_by_bisection(confidence):
    """Independent inverse-normal oracle: bisect Phi(x) = confidence on erf."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < confidence:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


class TestFrequencyTable:
    def test_hand_count(self):
        table = build_frequency_table(corpus_of("a a b"))
        assert table.counts == {"a": 2, "b": 1}
        assert table.total == 3
        assert table.mean == pytest.approx(1.5)

    def test_single_token(self):
        table = build_frequency_table(corpus_of("a"))
        assert table.mean == 1 and table.total == 1 and table.std == 0

    def test_additivity(self):
        t1 = build_frequency_table(corpus_of("a a b"))
        t2 = build_frequency_table(corpus_of("b c"))
        merged = t1.merged(t2)
        assert merged.counts == {"a": 2, "b": 2, "c": 1}
        both = build_frequency_table(corpus_of("a a b", "b c"))
        assert merged.counts == both.counts

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            build_frequency_table(RequestCorpus([]))


class TestZFromConfidence:
    def test_median_is_zero(self):
        assert z_from_confidence(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_high_confidence_against_bisection_oracle(self):
        assert z_from_confidence(0.9999) == pytest.approx(
            inv_cdf_by_bisection(0.9999), abs=1e-6)
        assert z_from_confidence(0.9999) == pytest.approx(3.719, abs=1e-3)

    def test_override_returned_verbatim(self):
        assert z_from_confidence(0.9999, override=5.73) == 5.73

    def test_out_of_range(self):
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(OutOfRange):
                z_from_confidence(bad)

    def test_strictly_increasing(self):
        values = [z_from_confidence(c) for c in (0.2, 0.4, 0.6, 0.9, 0.99)]
        assert all(a < b for a, b in zip(values, values[1:]))


class TestThreshold:
    def test_hand_case(self):
        table = table_from_counts({c: n for c, n in zip("abcde", [1, 1, 1, 1, 10])})
        assert table.mean == pytest.approx(2.8)
        assert table.std == pytest.approx(3.6)
        assert frequency_threshold(table, 1.0) == pytest.approx(6.4)

    def test_zero_z_gives_mean(self):
        table = table_from_counts({"a": 3, "b": 7})
        assert frequency_threshold(table, 0.0) == table.mean

    def test_against_brute_force_oracle(self):
        rng = random.Random(123)
        for _ in range(50):
            counts = {f"t{i}": rng.randint(1, 5000)
                      for i in range(rng.randint(2, 60))}
            z = rng.uniform(-1.0, 6.0)
            values = list(counts.values())
            mean = math.fsum(values) / len(values)
            std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))
            expected = mean + z * std
            assert frequency_threshold(table_from_counts(counts), z) == \
                pytest.approx(expected, abs=1e-9)


class TestReservedTokens:
    def test_hand_case(self):
        table = table_from_counts({c: n for c, n in zip("abcde", [1, 1, 1, 1, 10])})
        assert reserved_tokens(table, 6.4).tokens == {"e"}

    def test_above_max_is_empty(self):
        table = table_from_counts({"a": 3, "b": 7})
        assert reserved_tokens(table, 7.5).tokens == frozenset()

    def test_matches_set_comprehension(self):
        rng = random.Random(7)
        for _ in range(50):
            counts = {f"t{i}": rng.randint(1, 100) for i in range(30)}
            threshold = rng.uniform(0, 110)
            table = table_from_counts(counts)
            assert reserved_tokens(table, threshold).tokens == \
                frozenset(t for t, n in counts.items() if n > threshold)

    def test_strict_inequality_at_boundary(self):
        table = table_from_counts({"a": 5, "b": 6})
        assert reserved_tokens(table, 5.0).tokens == {"b"}

    @given(st.dictionaries(st.text(st.characters(min_codepoint=97, max_codepoint=122),
                                   min_size=1, max_size=4),
                           st.integers(1, 500), min_size=1, max_size=30),
           st.floats(0, 400), st.floats(0, 400))
    @settings(max_examples=100, deadline=None)
    def test_monotonic_in_threshold(self, counts, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        table = table_from_counts(counts)
        assert reserved_tokens(table, hi).tokens <= reserved_tokens(table, lo).tokens

    @given(st.dictionaries(st.text(st.characters(min_codepoint=97, max_codepoint=122),
                                   min_size=1, max_size=4),
                           st.integers(1, 500), min_size=2, max_size=30),
           st.integers(2, 9), st.floats(0.1, 4.0))
    @settings(max_examples=60, deadline=None)
    def test_scaling(self, counts, k, z):
        table = table_from_counts(counts)
        scaled = table_from_counts({t: n * k for t, n in counts.items()})
        assert scaled.mean == pytest.approx(k * table.mean)
        assert scaled.std == pytest.approx(k * table.std)
        t_base = frequency_threshold(table, z)
        t_scaled = frequency_threshold(scaled, z)
        assert t_scaled == pytest.approx(k * t_base, rel=1e-9)
        assert reserved_tokens(scaled, t_scaled).tokens == \
            reserved_tokens(table, t_base).tokens


def test_save_load_round_trip(tmp_path):
    table = table_from_counts({"get": 40, "/": 41, "q": 3})
    reserved = reserved_tokens(table, 20.0, z=5.73, confidence=0.9999)
    path = tmp_path / "reserved.txt"
    save_reserved(reserved, path)
    loaded = load_reserved(path)
    assert loaded.tokens == reserved.tokens
    assert loaded.threshold == reserved.threshold
    assert loaded.z == 5.73 and loaded.confidence == 0.9999
    assert loaded.marker == "<IGN>"
    lines = path.read_text().strip().split("\n")
    assert lines[1:] == sorted(reserved.tokens)
