import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reqaug.errors import (
    DegenerateSplit,
    EmptyCorpus,
    EmptyRequest,
    UnknownFormat,
    UnreadablePath,
)
from reqaug.ingest import (
    ABNORMAL,
    NORMAL,
    PUNCTUATION,
    RawRequestRecord,
    RequestCorpus,
    detokenize,
    load_corpus,
    normalize_request,
    render_with_substitution,
    split_corpus,
    tokenize_entities,
    tokenize_with_separators,
    write_canonical,
)


def rec(i, label=NORMAL, raw="get /a"):
    return RawRequestRecord(id=f"r{i}", raw=raw, label=label, source_dataset="t")


class TestNormalize:
    def test_request_line_with_query(self):
        assert normalize_request("GET /pagar.jsp?modo=insertar HTTP/1.1") == \
            "get /pagar.jsp modo=insertar"

    def test_already_normalized(self):
        assert normalize_request("get /a") == "get /a"

    def test_percent_decoded_exactly_once(self):
        assert normalize_request("GET /x?q=a%27") == "get /x q=a'"
        # a double-encoded payload survives one decode
        assert normalize_request("GET /x?q=a%2527") == "get /x q=a%27"

    def test_plus_means_space_in_query(self):
        assert normalize_request("GET /x?q=a+b") == "get /x q=a b"

    def test_body_and_headers(self):
        raw = "POST /login HTTP/1.1\r\nHost: x\r\n\r\nuser=ana%27"
        assert normalize_request(raw) == "post /login user=ana'"
        assert normalize_request(raw, include_headers=True) == \
            "post /login host: x user=ana'"

    def test_empty_raises(self):
        with pytest.raises(EmptyRequest):
            normalize_request("")
        with pytest.raises(EmptyRequest):
            normalize_request("\r\n\r\n")


class TestTokenize:
    def test_request_example(self):
        texts = [t.text for t in tokenize_entities("get /pagar.jsp modo=insertar")]
        assert texts == ["get", "/", "pagar", ".", "jsp", "modo", "=", "insertar"]

    def test_query_pairs(self):
        assert [t.text for t in tokenize_entities("a=1&b=2")] == \
            ["a", "=", "1", "&", "b", "=", "2"]

    def test_empty(self):
        assert tokenize_entities("") == []

    def test_kinds_and_positions(self):
        tokens = tokenize_entities("id=23 x")
        assert [t.kind for t in tokens] == ["word", PUNCTUATION, "number", "word"]
        assert [t.position for t in tokens] == [0, 1, 2, 3]

    @given(st.text(alphabet=st.characters(max_codepoint=127), max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_ascii(self, s):
        tokens, seps = tokenize_with_separators(s)
        assert detokenize(tokens, seps) == s

    @given(st.binary(max_size=80))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_all_bytes(self, raw):
        s = raw.decode("latin-1")
        tokens, seps = tokenize_with_separators(s)
        assert detokenize(tokens, seps) == s

    @given(st.text(alphabet=st.characters(max_codepoint=127), max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_no_mixed_tokens(self, s):
        for t in tokenize_entities(s):
            if t.kind == PUNCTUATION:
                assert len(t.text) == 1
            else:
                assert all(c.isalnum() or not c.isascii() for c in t.text)

    def test_substitution_rendering(self):
        raw = "get /pagar.jsp modo=insertar"
        assert render_with_substitution(raw, 7, "anadir") == "get /pagar.jsp modo=anadir"
        assert render_with_substitution(raw, 0, "post") == "post /pagar.jsp modo=insertar"


class TestLoadCorpus:
    def test_canonical_counts(self, tmp_path):
        path = tmp_path / "c.jsonl"
        corpus = RequestCorpus([rec(1), rec(2, ABNORMAL, "get /b q=1"), rec(3)])
        write_canonical(corpus, path)
        loaded = load_corpus(path, "canonical")
        assert len(loaded) == 3
        assert loaded.label_counts() == {NORMAL: 2, ABNORMAL: 1}

    def test_canonical_does_not_redecode(self, tmp_path):
        path = tmp_path / "c.jsonl"
        corpus = RequestCorpus([rec(1, raw="get /x q=a%27")])
        write_canonical(corpus, path)
        assert load_corpus(path, "canonical").records[0].raw == "get /x q=a%27"

    def test_canonical_skips_malformed(self, tmp_path):
        path = tmp_path / "c.jsonl"
        good = json.dumps({"id": "a", "raw": "get /a", "label": "normal",
                           "source_dataset": "t"})
        path.write_text(good + "\nnot json\n" + good.replace('"a"', '"b"') + "\n")
        loaded = load_corpus(path, "canonical")
        assert len(loaded) == 2
        assert loaded.skipped == 1

    def test_csic_raw(self, tmp_path):
        normal = tmp_path / "normalTraffic.txt"
        normal.write_text(
            "GET /tienda1/index.jsp HTTP/1.1\nHost: localhost\n\n\n"
            "POST /tienda1/pagar.jsp HTTP/1.1\nHost: localhost\n"
            "Content-Length: 9\n\nmodo=insertar\n\n")
        anomalous = tmp_path / "anomalousTraffic.txt"
        anomalous.write_text("GET /tienda1/x.jsp?id=%27 HTTP/1.1\nHost: l\n\n")
        loaded = load_corpus(tmp_path, "csic-raw")
        assert loaded.label_counts() == {NORMAL: 2, ABNORMAL: 1}
        abnormal = [r for r in loaded if r.label == ABNORMAL][0]
        assert abnormal.raw == "get /tienda1/x.jsp id='"

    def test_atrdf_csv(self, tmp_path):
        path = tmp_path / "traffic.csv"
        path.write_text(
            "request,response,attack_type\n"
            '"GET /orders/check?val=1 HTTP/1.1\nHost: api\n",200 OK,benign\n'
            '"GET /orders/get?c=%27;SELECT%20*%20-- HTTP/1.1\nHost: api\n",500,SQLi\n')
        loaded = load_corpus(path, "atrdf")
        assert loaded.label_counts() == {NORMAL: 1, ABNORMAL: 1}
        attack = [r for r in loaded if r.label == ABNORMAL][0]
        assert attack.attack_type == "SQLi"
        assert "host: api" in attack.raw  # headers kept for this format
        assert "'" in attack.raw

    def test_errors(self, tmp_path):
        with pytest.raises(UnreadablePath):
            load_corpus(tmp_path / "missing", "canonical")
        path = tmp_path / "c.jsonl"
        path.write_text("")
        with pytest.raises(UnknownFormat):
            load_corpus(path, "parquet")
        with pytest.raises(EmptyCorpus):
            load_corpus(path, "canonical")


class TestSplit:
    def corpus(self, n_normal, n_abnormal):
        records = [rec(i) for i in range(n_normal)]
        records += [rec(100 + i, ABNORMAL, "get /b q=x") for i in range(n_abnormal)]
        return RequestCorpus(records)

    def test_stratified_counts(self):
        split = split_corpus(self.corpus(5, 5), 0.7, seed=0)
        assert len(split.train) == 7 and len(split.test) == 3
        for count in split.train.label_counts().values():
            assert count in (3, 4)

    def test_two_records_one_per_label(self):
        split = split_corpus(self.corpus(1, 1), 0.5, seed=0)
        assert len(split.train) == 1 and len(split.test) == 1
        labels = {split.train.records[0].label, split.test.records[0].label}
        assert labels == {NORMAL, ABNORMAL}

    def test_same_seed_identical(self):
        corpus = self.corpus(20, 10)
        a = split_corpus(corpus, 0.7, seed=42)
        b = split_corpus(corpus, 0.7, seed=42)
        assert [r.id for r in a.train] == [r.id for r in b.train]
        assert [r.id for r in a.test] == [r.id for r in b.test]

    def test_partition(self):
        rng = random.Random(0)
        for _ in range(20):
            corpus = self.corpus(rng.randint(3, 30), rng.randint(3, 30))
            split = split_corpus(corpus, rng.choice([0.5, 0.6, 0.7, 0.8]), rng.randint(0, 99))
            train_ids = {r.id for r in split.train}
            test_ids = {r.id for r in split.test}
            assert not (train_ids & test_ids)
            assert len(train_ids) + len(test_ids) == len(corpus)

    def test_proportions_within_one_record(self):
        split = split_corpus(self.corpus(30, 10), 0.7, seed=1)
        counts = split.train.label_counts()
        assert abs(counts[NORMAL] - 0.7 * 30) <= 1
        assert abs(counts[ABNORMAL] - 0.7 * 10) <= 1

    def test_degenerate(self):
        with pytest.raises(DegenerateSplit):
            split_corpus(self.corpus(2, 50), 0.1, seed=0)
        with pytest.raises(DegenerateSplit):
            split_corpus(self.corpus(5, 5), 1.5, seed=0)

    def test_split_field_set(self):
        split = split_corpus(self.corpus(5, 5), 0.7, seed=0)
        assert all(r.split == "train" for r in split.train)
        assert all(r.split == "test" for r in split.test)


def test_canonical_determinism(tmp_path):
    corpus = RequestCorpus([rec(i, raw=f"get /p id={i}") for i in range(10)])
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_canonical(corpus, a)
    write_canonical(load_corpus(a, "canonical"), b)
    assert a.read_bytes() == b.read_bytes()


def test_corpus_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        RequestCorpus([rec(1), rec(1)])
