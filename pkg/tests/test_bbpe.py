import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reqaug.errors import UnknownId, VocabTooSmall
from reqaug.ingest import RawRequestRecord, RequestCorpus
from reqaug.lm.bbpe import (
    MIN_VOCAB,
    N_SPECIALS,
    SPECIAL_TOKENS,
    load_tokenizer,
    save_tokenizer,
    train_bbpe,
)


def corpus_of(*raws):
    return RequestCorpus([
        RawRequestRecord(id=f"r{i}", raw=raw, label="normal", source_dataset="t")
        for i, raw in enumerate(raws)])


@pytest.fixture(scope="module")
def trained():
    return train_bbpe(corpus_of("get /pagar.jsp modo=insertar",
                                "get /pagar.jsp modo=consultar",
                                "post /entrar.jsp usuario=ana"), 400)


def test_identity_tokenizer_has_no_merges():
    tok = train_bbpe(corpus_of("abc def"), MIN_VOCAB)
    assert tok.merges == []
    assert tok.vocab_size == MIN_VOCAB
    assert tok.encode("ab") == [tok.symbol_to_id[b"a"], tok.symbol_to_id[b"b"]]


def test_first_merge_is_most_frequent_pair():
    tok = train_bbpe(corpus_of("aaaa", "aaaa"), MIN_VOCAB + 1)
    assert tok.merges == [(b"a", b"a")]


def test_merge_makes_single_id():
    tok = train_bbpe(corpus_of("gege", "gege"), MIN_VOCAB + 1)
    assert tok.merges[0] == (b"g", b"e")
    assert len(tok.encode("ge")) == 1


def test_tie_broken_lexicographically():
    # "ba" and "ab" pairs both occur twice inside "abab"; ("a","b") sorts first
    tok = train_bbpe(corpus_of("abab", "abab"), MIN_VOCAB + 1)
    assert tok.merges[0] == (b"a", b"b")


def test_no_single_occurrence_merges():
    tok = train_bbpe(corpus_of("abcdef"), 2048)
    assert tok.merges == []


def test_vocab_too_small():
    with pytest.raises(VocabTooSmall):
        train_bbpe(corpus_of("a"), MIN_VOCAB - 1)


def test_specials_have_fixed_low_ids(trained):
    assert [trained.specials[t] for t in SPECIAL_TOKENS] == list(range(N_SPECIALS))
    assert min(trained.symbol_to_id.values()) == N_SPECIALS


def test_encode_decode_trivials(trained):
    assert trained.encode("") == []
    assert trained.decode(trained.encode("get /a")) == "get /a"


def test_decode_unknown_id(trained):
    with pytest.raises(UnknownId):
        trained.decode_bytes([trained.vocab_size + 5])


def test_decode_skips_specials(trained):
    ids = [trained.cls_id] + trained.encode("x") + [trained.sep_id]
    assert trained.decode(ids) == "x"


@given(st.binary(max_size=256))
@settings(max_examples=300, deadline=None)
def test_round_trip_bytes(raw):
    tok = _ROUND_TRIP_TOK
    assert tok.decode_bytes(tok.encode_bytes(raw)) == raw


_ROUND_TRIP_TOK = train_bbpe(corpus_of("get /pagar.jsp modo=insertar",
                                       "get /pagar.jsp modo=consultar"), 500)


def test_training_is_deterministic():
    corpus = corpus_of("get /pagar.jsp modo=insertar", "get /carrito.jsp id=23",
                       "post /entrar.jsp usuario=ana")
    a = train_bbpe(corpus, 500, seed=1)
    b = train_bbpe(corpus, 500, seed=2)  # seed is interface-only
    assert a.merges == b.merges


def test_save_load_round_trip(tmp_path, trained):
    save_tokenizer(trained, tmp_path)
    loaded = load_tokenizer(tmp_path)
    assert loaded.merges == trained.merges
    assert loaded.symbol_to_id == trained.symbol_to_id
    text = "get /pagar.jsp modo=insertar"
    assert loaded.encode(text) == trained.encode(text)


def test_recurring_entities_become_single_symbols(trained):
    for text in ("get", "pagar", "jsp", "modo", "/", "="):
        assert len(trained.encode(text)) == 1, text
