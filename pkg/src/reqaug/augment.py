"""Datastore generator: mask each request's least-contextual token, fill it
with the language model, and keep the fills a discriminator scores as real.

One candidate is attempted per training record, so the augmented datastore
at most doubles the training data. Synthetic records inherit the source
label and differ from their source in exactly one entity token.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    DimensionMismatch,
    EmptyInput,
    IndexOutOfRange,
    NoMaskableToken,
    NotADistribution,
    NoViableCandidate,
    ReservedPosition,
    SequenceTooLong,
    ZeroVector,
)
from .ingest import (
    EntityToken,
    RawRequestRecord,
    RequestCorpus,
    record_from_json,
    record_to_json,
    render_with_substitution,
    tokenize_entities,
)
from .lexicon import ReservedTokenSet
from .lm.bbpe import BbpeTokenizer
from .lm.mlm import (
    MASK_TEXT,
    LanguageModel,
    LmConfig,
    _forward_batch,
    encode_words,
    fill_mask,
    sentence_embedding,
    word_embeddings,
)

CLASS_REAL = 0
CLASS_SYNTHETIC = 1


@dataclass
class MaskedRequest:
    """Entity tokens with exactly one position replaced by the mask marker."""

    tokens: list[EntityToken]
    masked_index: int
    original_token: str
    source: RawRequestRecord

    @property
    def source_id(self) -> str:
        return self.source.id

    def rendered(self) -> str:
        return " ".join(t.text for t in self.tokens)


@dataclass
class CandidateSample:
    """A synthetic request produced by one single-token substitution."""

    filled_request: RawRequestRecord
    filled_token: str
    generator_probability: float
    source_id: str
    confidence: float | None = None


@dataclass(frozen=True)
class Top1Novel:
    """Deterministic strategy: highest-probability fill that differs from the original."""

    name: str = "top1-novel"


@dataclass(frozen=True)
class SampleTopK:
    """Sample from the renormalized top-k distribution, original excluded."""

    k: int = 10
    temperature: float = 1.0
    seed: int = 0
    name: str = "sample-topk"


@dataclass
class DiscriminatorConfig:
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 5e-4
    tau_uncertainty: float = 0.3
    tau_accept: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_uncertainty", "tau_accept"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass
class AugmentedDatastore:
    originals: RequestCorpus
    synthetics: list[CandidateSample]
    provenance: dict[str, str]
    stats: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.synthetics) > len(self.originals):
            raise ValueError("more synthetics than originals")
        for sample in self.synthetics:
            if sample.filled_request.id not in self.provenance:
                raise ValueError(f"synthetic {sample.filled_request.id!r} lacks provenance")

    def all_records(self) -> list[RawRequestRecord]:
        return list(self.originals.records) + [s.filled_request for s in self.synthetics]


# --- geometry -----------------------------------------------------------------


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"{u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def find_outlier_token(model: LanguageModel, request: RawRequestRecord,
                       reserved: ReservedTokenSet) -> int:
    """Index of the non-reserved token least aligned with the whole request.

    Argmin of cosine(word embedding, sentence embedding); ties go to the
    lowest index.
    """
    tokens = tokenize_entities(request.raw)
    eligible = [i for i, t in enumerate(tokens) if t.text not in reserved]
    if not eligible:
        raise NoMaskableToken(f"every token of {request.id!r} is reserved")
    words = word_embeddings(model, request)
    sentence = sentence_embedding(model, request)
    best_index, best_sim = -1, math.inf
    for i in eligible:
        sim = cosine_similarity(words[i], sentence)
        if sim < best_sim:
            best_index, best_sim = i, sim
    return best_index


def mask_at(request: RawRequestRecord, index: int,
            reserved: ReservedTokenSet) -> MaskedRequest:
    tokens = tokenize_entities(request.raw)
    if not (0 <= index < len(tokens)):
        raise IndexOutOfRange(f"index {index} outside [0, {len(tokens)})")
    original = tokens[index]
    if original.text in reserved:
        raise ReservedPosition(f"token {original.text!r} at {index} is reserved")
    masked = list(tokens)
    masked[index] = EntityToken(MASK_TEXT, index, original.kind)
    return MaskedRequest(tokens=masked, masked_index=index,
                         original_token=original.text, source=request)


def _single_edit_render(masked: MaskedRequest, fill: str) -> str | None:
    """Re-render with the fill; None unless exactly the masked entity changed."""
    rendered = render_with_substitution(masked.source.raw, masked.masked_index, fill)
    new_tokens = tokenize_entities(rendered)
    if len(new_tokens) != len(masked.tokens):
        return None
    for i, tok in enumerate(new_tokens):
        if i == masked.masked_index:
            if tok.text != fill:
                return None
        elif tok.text != masked.tokens[i].text:
            return None
    return rendered


def generate_candidate(model: LanguageModel, masked: MaskedRequest,
                       strategy: Top1Novel | SampleTopK = Top1Novel(),
                       reserved: ReservedTokenSet | None = None) -> CandidateSample:
    """Fill the masked position with a token that differs from the original.

    Fills that would disturb any other entity (for example a word dropped
    between two punctuation-free neighbors) are skipped so every candidate
    is a strict single-token edit.
    """
    depth = 25 if isinstance(strategy, Top1Novel) else strategy.k + 1
    fills = fill_mask(model, masked, k=depth, reserved=reserved)
    viable = [(text, p) for text, p in fills if text != masked.original_token]
    if not viable:
        raise NoViableCandidate(f"no fill differs from {masked.original_token!r}")

    if isinstance(strategy, SampleTopK):
        rng = random.Random(f"{strategy.seed}:{masked.source_id}")
        weights = [p ** (1.0 / max(strategy.temperature, 1e-9)) for _, p in viable]
        pick = rng.random() * sum(weights)
        chosen = len(viable) - 1
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if pick <= acc:
                chosen = i
                break
        # try the sampled fill first, then the rest in rank order
        viable = [viable[chosen]] + viable[:chosen] + viable[chosen + 1:]

    source = masked.source
    for text, prob in viable:
        rendered = _single_edit_render(masked, text)
        if rendered is None:
            continue
        filled = RawRequestRecord(
            id=f"{source.id}::aug",
            raw=rendered,
            label=source.label,
            source_dataset=source.source_dataset,
            attack_type=source.attack_type,
            split=source.split,
        )
        return CandidateSample(filled_request=filled, filled_token=text,
                               generator_probability=prob,
                               source_id=source.id)
    raise NoViableCandidate(
        f"no fill keeps {masked.source_id!r} a single-token edit")


# --- discriminator --------------------------------------------------------------


def uncertainty(prob_vector) -> float:
    """Normalized entropy of a class distribution, in [0, 1]."""
    p = np.asarray(prob_vector, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise NotADistribution("need a flat vector of at least two classes")
    if (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-6:
        raise NotADistribution(f"probabilities invalid: {p}")
    nonzero = p[p > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum())
    return entropy / math.log(p.size)


class Discriminator:
    """Two-class head over the encoder's <CLS> state: real vs synthetic."""

    def __init__(self, encoder: LanguageModel, head: nn.Linear,
                 tau_uncertainty: float, tau_accept: float):
        self.encoder = encoder
        self.head = head
        self.tau_uncertainty = tau_uncertainty
        self.tau_accept = tau_accept
        self.last_pseudo_labels: list[int] = []

    def _sequences(self, records: list[RawRequestRecord],
                   limit: int | None = None) -> list[list[int]]:
        out = []
        for record in records:
            texts = [t.text for t in tokenize_entities(record.raw)]
            ids, _ = encode_words(self.encoder.tokenizer, texts, limit=limit)
            if limit is None and len(ids) > self.encoder.config.max_seq_len:
                raise SequenceTooLong(f"record {record.id!r}")
            out.append(ids)
        return out

    @torch.no_grad()
    def probabilities_batch(self, records: list[RawRequestRecord],
                            batch_size: int = 64) -> np.ndarray:
        seqs = self._sequences(records)
        probs = []
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            hidden_states = _forward_batch(self.encoder, chunk)
            logits = self.head(hidden_states[:, 0, :])
            probs.append(torch.softmax(logits.to(torch.float64), dim=-1).numpy())
        return np.concatenate(probs, axis=0)

    def class_probabilities(self, record: RawRequestRecord) -> np.ndarray:
        return self.probabilities_batch([record])[0]


def train_discriminator(encoder_config: LmConfig, tokenizer: BbpeTokenizer,
                        originals: RequestCorpus,
                        candidates: list[CandidateSample],
                        config: DiscriminatorConfig) -> Discriminator:
    """Self-supervised real/synthetic training with pseudo-label refresh.

    Epoch one uses hard labels (originals real, candidates synthetic). Before
    each later epoch every candidate is re-labeled with the model's argmax
    class when its normalized entropy is at most tau_uncertainty, otherwise
    it stays synthetic.
    """
    if not len(originals) or not candidates:
        raise EmptyInput("need both originals and candidates")
    torch.set_num_threads(1)

    encoder = LanguageModel(encoder_config, tokenizer)
    head = nn.Linear(encoder_config.hidden, 2)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen,
                                      dtype=torch.float64).to(head.weight.dtype) * 0.02)
        head.bias.zero_()
    disc = Discriminator(encoder, head, config.tau_uncertainty, config.tau_accept)

    limit = min(encoder_config.block_size, encoder_config.max_seq_len)
    real_records = list(originals.records)
    syn_records = [c.filled_request for c in candidates]
    real_seqs = disc._sequences(real_records, limit=limit)
    syn_seqs = disc._sequences(syn_records, limit=limit)
    syn_labels = [CLASS_SYNTHETIC] * len(syn_seqs)

    params = list(encoder.parameters()) + list(head.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=0.01)
    steps_per_epoch = math.ceil((len(real_seqs) + len(syn_seqs)) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    warmup = int(round(encoder_config.warmup_fraction * total_steps))

    def lr_scale(step: int) -> float:
        if step < warmup:
            return (step + 1) / max(1, warmup)
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_scale)

    for epoch in range(config.epochs):
        if epoch > 0:
            encoder.eval()
            probs = disc.probabilities_batch(syn_records)
            for j, p in enumerate(probs):
                if uncertainty(p) <= config.tau_uncertainty:
                    syn_labels[j] = int(np.argmax(p))
                else:
                    syn_labels[j] = CLASS_SYNTHETIC
        encoder.train()
        examples = ([(s, CLASS_REAL) for s in real_seqs]
                    + [(s, lab) for s, lab in zip(syn_seqs, syn_labels)])
        rng = random.Random(config.seed * 1_000_003 + epoch)
        rng.shuffle(examples)
        for start in range(0, len(examples), config.batch_size):
            batch = examples[start:start + config.batch_size]
            hidden_states = _forward_batch(encoder, [s for s, _ in batch])
            logits = head(hidden_states[:, 0, :])
            target = torch.tensor([lab for _, lab in batch], dtype=torch.long)
            loss = torch.nn.functional.cross_entropy(logits, target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
    encoder.eval()
    disc.last_pseudo_labels = list(syn_labels)
    return disc


def validate_candidate(disc: Discriminator,
                       candidate: CandidateSample) -> tuple[bool, float]:
    """Accept a candidate the discriminator confidently calls real.

    Confidence is one minus normalized entropy. tau_accept == 0 disables the
    filter entirely (every candidate passes), which realizes the
    one-sample-per-request doubling protocol.
    """
    p = disc.class_probabilities(candidate.filled_request)
    confidence = 1.0 - uncertainty(p)
    if disc.tau_accept <= 0.0:
        return True, confidence
    accepted = int(np.argmax(p)) == CLASS_REAL and confidence >= disc.tau_accept
    return accepted, confidence


def generate_candidates(train: RequestCorpus, model: LanguageModel,
                        reserved: ReservedTokenSet,
                        strategy: Top1Novel | SampleTopK = Top1Novel(),
                        ) -> tuple[list[CandidateSample], dict[str, int]]:
    """One candidate attempt per training record, in source-id order."""
    candidates: list[CandidateSample] = []
    stats = {"attempted": 0, "no_maskable": 0, "no_viable": 0}
    for record in sorted(train.records, key=lambda r: r.id):
        stats["attempted"] += 1
        try:
            index = find_outlier_token(model, record, reserved)
            masked = mask_at(record, index, reserved)
            candidates.append(generate_candidate(model, masked, strategy,
                                                 reserved=reserved))
        except NoMaskableToken:
            stats["no_maskable"] += 1
        except NoViableCandidate:
            stats["no_viable"] += 1
    return candidates, stats


def build_datastore(train: RequestCorpus, model: LanguageModel, disc: Discriminator,
                    reserved: ReservedTokenSet,
                    strategy: Top1Novel | SampleTopK = Top1Novel(),
                    precomputed: tuple[list[CandidateSample], dict] | None = None,
                    ) -> AugmentedDatastore:
    """Attempt exactly one validated single-token edit per training record.

    precomputed lets the caller reuse the candidate list the discriminator
    was trained on instead of regenerating it.
    """
    if precomputed is None:
        candidates, stats = generate_candidates(train, model, reserved, strategy)
    else:
        candidates, stats = precomputed
    stats = dict(stats, accepted=0, rejected=0)
    synthetics: list[CandidateSample] = []
    provenance: dict[str, str] = {}
    for candidate in candidates:
        accepted, confidence = validate_candidate(disc, candidate)
        if accepted:
            candidate.confidence = confidence
            synthetics.append(candidate)
            provenance[candidate.filled_request.id] = candidate.source_id
            stats["accepted"] += 1
        else:
            stats["rejected"] += 1
    return AugmentedDatastore(originals=train, synthetics=synthetics,
                              provenance=provenance, stats=stats)


# --- persistence -----------------------------------------------------------------


def save_datastore(datastore: AugmentedDatastore, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in datastore.originals.records:
            fh.write(record_to_json(record) + "\n")
        for sample in datastore.synthetics:
            extra = {"source_id": sample.source_id,
                     "confidence": sample.confidence,
                     "generator_probability": sample.generator_probability}
            fh.write(record_to_json(sample.filled_request, extra=extra) + "\n")


def load_datastore(path: str | Path) -> AugmentedDatastore:
    originals: list[RawRequestRecord] = []
    synthetics: list[CandidateSample] = []
    provenance: dict[str, str] = {}
    raw_by_id: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            record = record_from_json(doc)
            if "source_id" in doc:
                source_raw = raw_by_id.get(doc["source_id"], "")
                synthetics.append(CandidateSample(
                    filled_request=record,
                    filled_token=_diff_token(source_raw, record.raw),
                    generator_probability=doc.get("generator_probability", 0.0),
                    source_id=doc["source_id"],
                    confidence=doc.get("confidence")))
                provenance[record.id] = doc["source_id"]
            else:
                originals.append(record)
                raw_by_id[record.id] = record.raw
    return AugmentedDatastore(originals=RequestCorpus(originals),
                              synthetics=synthetics, provenance=provenance)


def _diff_token(source_raw: str, filled_raw: str) -> str:
    if not source_raw:
        return ""
    src = [t.text for t in tokenize_entities(source_raw)]
    out = [t.text for t in tokenize_entities(filled_raw)]
    for a, b in zip(src, out):
        if a != b:
            return b
    return ""
