"""Small transformer encoder with a masked-language-model head.

Trained from scratch with whole-word masking: when an entity word is picked,
every BPE piece of it is replaced together. Exposes contextual word and
sentence embeddings, single-position fill-mask prediction, and per-entity
negative log-likelihoods.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
from torch import nn

from ..errors import (
    EmptyCorpus,
    MultipleMaskTokens,
    NoMaskToken,
    NonFiniteLoss,
    SequenceTooLong,
)
from ..ingest import RawRequestRecord, RequestCorpus, tokenize_entities
from .bbpe import MASK, N_SPECIALS, BbpeTokenizer

if TYPE_CHECKING:
    from ..augment import MaskedRequest
    from ..lexicon import ReservedTokenSet

MASK_TEXT = MASK


@dataclass
class LmConfig:
    """Architecture and training hyperparameters.

    Defaults are the desk-scale setup; paper_lm_config() gives the
    full-scale variant (6 layers, hidden 768, vocab 52k).
    """

    layers: int = 2
    heads: int = 4
    hidden: int = 128
    vocab_size: int = 2048
    block_size: int = 128
    max_seq_len: int = 512
    epochs: int = 30
    batch_size: int = 32
    warmup_fraction: float = 0.05
    learning_rate: float = 5e-4
    mask_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must be in [0, 1)")
        if not (0.0 < self.mask_rate < 1.0):
            raise ValueError("mask_rate must be in (0, 1)")


def paper_lm_config(seed: int = 0, **overrides) -> LmConfig:
    base = dict(layers=6, heads=12, hidden=768, vocab_size=52_000, block_size=128,
                max_seq_len=512, epochs=20, batch_size=32, seed=seed)
    base.update(overrides)
    return LmConfig(**base)


class _EncoderLayer(nn.Module):
    """Pre-layer-norm self-attention block with a GELU MLP of width 4*hidden."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.ln_attn = nn.LayerNorm(hidden)
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.ln_mlp = nn.LayerNorm(hidden)
        self.mlp_in = nn.Linear(hidden, 4 * hidden)
        self.mlp_out = nn.Linear(4 * hidden, hidden)

    def forward(self, x: torch.Tensor, key_pad: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln_attn(x)

        def split(m):
            return m.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(ctx)

        h = self.ln_mlp(x)
        x = x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(h)))
        return x


class LanguageModel(nn.Module):
    """Encoder + output projection over the tokenizer's learned vocabulary."""

    def __init__(self, config: LmConfig, tokenizer: BbpeTokenizer,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        self.vocab = tokenizer.vocab_size
        self.tok_emb = nn.Embedding(self.vocab, config.hidden)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.hidden)
        self.blocks = nn.ModuleList(
            _EncoderLayer(config.hidden, config.heads) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.hidden)
        self.lm_head = nn.Linear(config.hidden, self.vocab)
        self.epoch_losses: list[float] = []
        self.to(dtype)
        self._init_weights(config.seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2 or "emb" in name:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                            .to(p.dtype) * 0.02)
                elif "weight" in name:  # layer norm scales
                    p.fill_(1.0)
                else:
                    p.zero_()

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """Final-layer hidden states; pad_mask is True at real positions."""
        t = ids.shape[1]
        pos = torch.arange(t, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None, :, :]
        key_pad = ~pad_mask
        for block in self.blocks:
            x = block(x, key_pad)
        return self.ln_f(x)

    def logits(self, hidden_states: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden_states)


# --- sequence assembly -------------------------------------------------------


def word_piece_ids(tokenizer: BbpeTokenizer, texts: list[str]) -> list[list[int]]:
    """BPE piece ids per entity word (entities encode bare, merges never cross them)."""
    return [tokenizer.encode(text) for text in texts]


def encode_words(tokenizer: BbpeTokenizer, texts: list[str],
                 limit: int | None = None) -> tuple[list[int], list[tuple[int, int]]]:
    """[CLS] + pieces + [SEP] with per-word (start, end) spans.

    With a limit, trailing words that do not fit whole are dropped so masking
    never sees a fragmented word.
    """
    ids = [tokenizer.cls_id]
    spans: list[tuple[int, int]] = []
    for pieces in word_piece_ids(tokenizer, texts):
        if limit is not None and len(ids) + len(pieces) + 1 > limit:
            break
        spans.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
    ids.append(tokenizer.sep_id)
    return ids, spans


def _encoded_record(model: LanguageModel, record: RawRequestRecord):
    texts = [t.text for t in tokenize_entities(record.raw)]
    ids, spans = encode_words(model.tokenizer, texts)
    if len(ids) > model.config.max_seq_len:
        raise SequenceTooLong(
            f"record {record.id!r}: {len(ids)} pieces > {model.config.max_seq_len}")
    return texts, ids, spans


def _forward_batch(model: LanguageModel, batch_ids: list[list[int]]) -> torch.Tensor:
    width = max(len(s) for s in batch_ids)
    pad = model.tokenizer.pad_id
    ids = torch.full((len(batch_ids), width), pad, dtype=torch.long)
    mask = torch.zeros((len(batch_ids), width), dtype=torch.bool)
    for i, seq in enumerate(batch_ids):
        ids[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, :len(seq)] = True
    return model(ids, mask)


# --- training -----------------------------------------------------------------


def _mask_sequence(ids: list[int], spans: list[tuple[int, int]], config: LmConfig,
                   vocab: int, rng: random.Random) -> tuple[list[int], list[int]] | None:
    n_select = round(config.mask_rate * len(spans))
    if n_select == 0:
        return None
    chosen = rng.sample(range(len(spans)), n_select)
    inputs = list(ids)
    labels = [-100] * len(ids)
    for w in sorted(chosen):
        start, end = spans[w]
        u = rng.random()
        for pos in range(start, end):
            labels[pos] = ids[pos]
            if u < 0.8:
                inputs[pos] = -1  # stands for <MASK>, substituted at batch build
            elif u < 0.9:
                inputs[pos] = rng.randrange(N_SPECIALS, vocab)
    return inputs, labels


def train_mlm(tokenizer: BbpeTokenizer, corpus: RequestCorpus,
              config: LmConfig) -> LanguageModel:
    """Whole-word-masked cross-entropy training with linear warmup then decay."""
    if not len(corpus):
        raise EmptyCorpus("cannot train on an empty corpus")
    torch.set_num_threads(1)
    model = LanguageModel(config, tokenizer)

    limit = min(config.block_size, config.max_seq_len)
    sequences = []
    for record in corpus:
        texts = [t.text for t in tokenize_entities(record.raw)]
        ids, spans = encode_words(tokenizer, texts, limit=limit)
        if spans:
            sequences.append((ids, spans))
    if not sequences:
        raise EmptyCorpus("no encodable sequences in corpus")

    steps_per_epoch = math.ceil(len(sequences) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    warmup = int(round(config.warmup_fraction * total_steps))

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=0.01)

    def lr_scale(step: int) -> float:
        if step < warmup:
            return (step + 1) / max(1, warmup)
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_scale)
    mask_id = tokenizer.mask_id

    model.train()
    for epoch in range(config.epochs):
        rng = random.Random(config.seed * 1_000_003 + epoch)
        order = list(range(len(sequences)))
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch_inputs, batch_labels = [], []
            for idx in order[start:start + config.batch_size]:
                ids, spans = sequences[idx]
                masked = _mask_sequence(ids, spans, config, model.vocab, rng)
                if masked is None:
                    continue
                inputs, labels = masked
                batch_inputs.append([mask_id if t == -1 else t for t in inputs])
                batch_labels.append(labels)
            if not batch_inputs:
                continue
            width = max(len(s) for s in batch_inputs)
            labels_t = torch.full((len(batch_labels), width), -100, dtype=torch.long)
            for i, lab in enumerate(batch_labels):
                labels_t[i, :len(lab)] = torch.tensor(lab, dtype=torch.long)
            if not (labels_t != -100).any():
                continue
            hidden_states = _forward_batch(model, batch_inputs)
            logits = model.logits(hidden_states)
            loss = torch.nn.functional.cross_entropy(
                logits.view(-1, model.vocab), labels_t.view(-1), ignore_index=-100)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"epoch {epoch} step {start // config.batch_size}: "
                    f"loss={loss.item()} lr={scheduler.get_last_lr()[0]:.2e} "
                    f"batch={len(batch_inputs)} width={width}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(loss.item())
        model.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    model.eval()
    return model


# --- inference ----------------------------------------------------------------


@torch.no_grad()
def word_embeddings(model: LanguageModel, request: RawRequestRecord) -> np.ndarray:
    """One vector per entity token: mean of final hidden states over its pieces."""
    _, ids, spans = _encoded_record(model, request)
    hidden_states = _forward_batch(model, [ids])[0]
    out = np.stack([hidden_states[s:e].mean(dim=0).numpy() for s, e in spans])
    return out.astype(np.float64)


@torch.no_grad()
def sentence_embedding(model: LanguageModel, request: RawRequestRecord) -> np.ndarray:
    """Mean-pool of final hidden states over all non-special positions."""
    _, ids, spans = _encoded_record(model, request)
    hidden_states = _forward_batch(model, [ids])[0]
    return hidden_states[1:len(ids) - 1].mean(dim=0).numpy().astype(np.float64)


def _candidate_table(tokenizer: BbpeTokenizer) -> dict[int, str]:
    """id -> surface text for ids that realize exactly one entity token."""
    cache = getattr(tokenizer, "_fill_candidates", None)
    if cache is not None:
        return cache
    table: dict[int, str] = {}
    for token_id in range(tokenizer.vocab_size):
        if tokenizer.is_special(token_id):
            continue
        text = tokenizer.id_text(token_id)
        if text.startswith(" "):
            text = text[1:]
        if not text:
            continue
        entities = tokenize_entities(text)
        if len(entities) == 1 and entities[0].text == text:
            table[token_id] = text
    tokenizer._fill_candidates = table
    return table


@torch.no_grad()
def fill_mask(model: LanguageModel, masked: "MaskedRequest", k: int,
              reserved: "ReservedTokenSet | None" = None) -> list[tuple[str, float]]:
    """Top-k fills for the single masked position, by softmax probability.

    Probabilities are taken over the full vocabulary before any exclusion;
    special tokens, reserved tokens, and pieces that do not form a single
    entity token are excluded from the candidate list.
    """
    texts = [t.text for t in masked.tokens]
    mask_positions = [i for i, t in enumerate(texts) if t == MASK_TEXT]
    if not mask_positions:
        raise NoMaskToken("request has no masked position")
    if len(mask_positions) > 1:
        raise MultipleMaskTokens(f"{len(mask_positions)} masked positions")
    word_index = mask_positions[0]

    ids = [model.tokenizer.cls_id]
    mask_piece_pos = None
    for i, text in enumerate(texts):
        if i == word_index:
            mask_piece_pos = len(ids)
            ids.append(model.tokenizer.mask_id)
        else:
            ids.extend(model.tokenizer.encode(text))
    ids.append(model.tokenizer.sep_id)
    if len(ids) > model.config.max_seq_len:
        raise SequenceTooLong(f"{len(ids)} pieces > {model.config.max_seq_len}")

    hidden_states = _forward_batch(model, [ids])[0]
    logits = model.logits(hidden_states[mask_piece_pos:mask_piece_pos + 1])[0]
    probs = torch.softmax(logits.to(torch.float64), dim=-1).numpy()

    table = _candidate_table(model.tokenizer)
    ranked = sorted(table.items(), key=lambda item: (-probs[item[0]], item[0]))
    results: list[tuple[str, float]] = []
    seen: set[str] = set()
    for token_id, text in ranked:
        if text in seen or (reserved is not None and text in reserved):
            continue
        seen.add(text)
        results.append((text, float(probs[token_id])))
        if len(results) >= k:
            break
    return results


@torch.no_grad()
def token_nll(model: LanguageModel, request: RawRequestRecord,
              batch_size: int = 64) -> list[float]:
    """Per-entity negative log-likelihood under whole-word masking.

    Each entity word is masked (every piece at once) and scored as the mean
    of -log p(original piece) over its pieces.
    """
    _, ids, spans = _encoded_record(model, request)
    mask_id = model.tokenizer.mask_id
    variants = []
    for start, end in spans:
        seq = list(ids)
        for pos in range(start, end):
            seq[pos] = mask_id
        variants.append(seq)

    nlls: list[float] = []
    for chunk_start in range(0, len(variants), batch_size):
        chunk = variants[chunk_start:chunk_start + batch_size]
        hidden_states = _forward_batch(model, chunk)
        logits = model.logits(hidden_states)
        logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
        for row, (start, end) in enumerate(
                spans[chunk_start:chunk_start + len(chunk)]):
            vals = [-logp[row, pos, ids[pos]].item() for pos in range(start, end)]
            nlls.append(float(np.mean(vals)))
    return nlls


# --- persistence ----------------------------------------------------------------


def write_tensors(path: Path, named: list[tuple[str, np.ndarray]]) -> None:
    """Little-endian float32 flat file with a JSON index line up front."""
    index = []
    offset = 0
    blobs = []
    for name, arr in named:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(arr32.shape), "offset": offset})
        offset += arr32.size
        blobs.append(arr32.tobytes())
    header = json.dumps({"dtype": "<f4", "tensors": index}, sort_keys=True)
    with path.open("wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_tensors(path: Path) -> dict[str, np.ndarray]:
    with path.open("rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f4")
    out = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = data[entry["offset"]:entry["offset"] + size]
        out[entry["name"]] = chunk.reshape(entry["shape"]).copy()
    return out


def save_model(model: LanguageModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(model.config), "vocab": model.vocab,
                "epoch_losses": model.epoch_losses}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True), encoding="utf-8")
    named = [(name, p.detach().numpy()) for name, p in model.named_parameters()]
    write_tensors(directory / "weights.bin", named)


def load_model(directory: str | Path, tokenizer: BbpeTokenizer) -> LanguageModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    config = LmConfig(**manifest["config"])
    model = LanguageModel(config, tokenizer)
    if model.vocab != manifest["vocab"]:
        raise ValueError(
            f"tokenizer vocab {model.vocab} != saved vocab {manifest['vocab']}")
    tensors = read_tensors(directory / "weights.bin")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[name]).to(p.dtype))
    model.epoch_losses = list(manifest.get("epoch_losses", []))
    model.eval()
    return model
