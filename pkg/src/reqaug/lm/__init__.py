from .bbpe import (
    BbpeTokenizer,
    MASK,
    N_SPECIALS,
    SPECIAL_TOKENS,
    load_tokenizer,
    save_tokenizer,
    train_bbpe,
)
from .mlm import (
    LanguageModel,
    LmConfig,
    MASK_TEXT,
    encode_words,
    fill_mask,
    load_model,
    paper_lm_config,
    save_model,
    sentence_embedding,
    token_nll,
    train_mlm,
    word_embeddings,
    word_piece_ids,
)

__all__ = [
    "BbpeTokenizer", "MASK", "N_SPECIALS", "SPECIAL_TOKENS", "load_tokenizer",
    "save_tokenizer", "train_bbpe", "LanguageModel", "LmConfig", "MASK_TEXT",
    "encode_words", "fill_mask", "load_model", "paper_lm_config", "save_model",
    "sentence_embedding", "token_nll", "train_mlm", "word_embeddings",
    "word_piece_ids",
]
