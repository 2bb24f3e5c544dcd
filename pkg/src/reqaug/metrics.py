"""Text-similarity and classification metrics for evaluating the pipeline.

Positive class is abnormal throughout. Degenerate confusion matrices (any
zero denominator) score 0 and are flagged rather than raised, so evaluation
sweeps never abort on an edge case.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .augment import cosine_similarity
from .detect import Verdict
from .errors import (
    EmptyCandidate,
    EmptyRequest,
    LengthMismatch,
    NegativeCost,
    WeightMismatch,
)
from .ingest import ABNORMAL, RawRequestRecord, RequestCorpus, tokenize_entities
from .lm.mlm import LanguageModel, word_embeddings


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    mcc: float
    degenerate: list[str] = field(default_factory=list)


@dataclass
class SimilarityReport:
    bleu: float
    bert_p: float
    bert_r: float
    bert_f1: float
    mover: float


def confusion(predictions: list[Verdict], labels: list[str]) -> ConfusionMatrix:
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    tp = fp = tn = fn = 0
    for verdict, label in zip(predictions, labels):
        predicted_abnormal = verdict.flagged == ABNORMAL
        actually_abnormal = label == ABNORMAL
        if predicted_abnormal and actually_abnormal:
            tp += 1
        elif predicted_abnormal:
            fp += 1
        elif actually_abnormal:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    return cm.tp / denom if denom else 0.0


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    return cm.tp / denom if denom else 0.0


def f1(cm: ConfusionMatrix) -> float:
    p, r = precision(cm), recall(cm)
    return 2 * p * r / (p + r) if (p + r) else 0.0


def mcc(cm: ConfusionMatrix) -> float:
    denom = ((cm.tp + cm.fp) * (cm.tp + cm.fn)
             * (cm.tn + cm.fp) * (cm.tn + cm.fn))
    if denom == 0:
        return 0.0
    return (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(denom)


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    degenerate = []
    if cm.tp + cm.fp == 0:
        degenerate.append("precision")
    if cm.tp + cm.fn == 0:
        degenerate.append("recall")
    if precision(cm) + recall(cm) == 0:
        degenerate.append("f1")
    if ((cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)) == 0:
        degenerate.append("mcc")
    return ClassificationReport(precision=precision(cm), recall=recall(cm),
                                f1=f1(cm), mcc=mcc(cm), degenerate=degenerate)


# --- BLEU ------------------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: list[str], reference: list[str], max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions with a brevity penalty.

    Zero higher-order precisions get add-one smoothing; a zero unigram
    precision forces the score to 0. Orders longer than the candidate are
    skipped.
    """
    if max_n < 1:
        raise ValueError("max_n must be at least 1")
    if not candidate:
        raise EmptyCandidate("candidate token list is empty")

    log_sum, orders = 0.0, 0
    for n in range(1, max_n + 1):
        cand_counts = _ngrams(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            continue
        ref_counts = _ngrams(reference, n)
        matched = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if matched == 0:
            if n == 1:
                return 0.0
            matched, total = matched + 1, total + 1
        log_sum += math.log(matched / total)
        orders += 1
    if orders == 0:
        return 0.0

    c, r = len(candidate), len(reference)
    brevity = math.exp(1.0 - r / c) if c < r else 1.0
    return brevity * math.exp(log_sum / orders)


def corpus_bleu(pairs: list[tuple[list[str], list[str]]], max_n: int = 4) -> float:
    """Mean of per-pair scores."""
    if not pairs:
        raise EmptyCandidate("no pairs to score")
    return float(np.mean([bleu(c, r, max_n) for c, r in pairs]))


# --- embedding similarity -----------------------------------------------------------


def bert_score(model: LanguageModel, candidate: RawRequestRecord,
               reference: RawRequestRecord) -> tuple[float, float, float]:
    """Greedy-matched cosine similarity over contextual word embeddings."""
    cand_tokens = tokenize_entities(candidate.raw)
    ref_tokens = tokenize_entities(reference.raw)
    if not cand_tokens or not ref_tokens:
        raise EmptyRequest("both requests need at least one entity token")
    cand_emb = word_embeddings(model, candidate)
    ref_emb = word_embeddings(model, reference)

    sims = np.zeros((len(ref_emb), len(cand_emb)))
    for i, re_vec in enumerate(ref_emb):
        for j, ca_vec in enumerate(cand_emb):
            sims[i, j] = cosine_similarity(re_vec, ca_vec)
    r = float(sims.max(axis=1).mean())
    p = float(sims.max(axis=0).mean())
    f = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f


def emd(supply_weights, demand_weights, cost_matrix) -> float:
    """Exact optimal transport cost for small instances (linear program)."""
    a = np.asarray(supply_weights, dtype=np.float64)
    b = np.asarray(demand_weights, dtype=np.float64)
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.shape != (len(a), len(b)):
        raise WeightMismatch(f"cost shape {cost.shape} vs ({len(a)}, {len(b)})")
    if (a < 0).any() or (b < 0).any():
        raise WeightMismatch("weights must be non-negative")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise WeightMismatch("each weight vector must sum to 1")
    if (cost < 0).any():
        raise NegativeCost("cost matrix has negative entries")

    m, n = cost.shape
    # flow variables f[i, j] flattened row-major; row sums = a, column sums = b
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    result = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=np.concatenate([a, b]),
                     bounds=(0, None), method="highs")
    if not result.success:
        raise WeightMismatch(f"transport program infeasible: {result.message}")
    return float(result.fun)


def compute_idf(corpus: RequestCorpus) -> dict[str, float]:
    """Smoothed inverse document frequency over entity tokens."""
    df: Counter = Counter()
    for record in corpus:
        for text in {t.text for t in tokenize_entities(record.raw)}:
            df[text] += 1
    n = len(corpus)
    return {text: math.log((n + 1) / (count + 1)) + 1.0 for text, count in df.items()}


def _idf_weights(texts: list[str], idf_table: dict[str, float],
                 default: float) -> np.ndarray:
    w = np.array([idf_table.get(t, default) for t in texts], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        w = np.ones(len(texts))
        total = w.sum()
    return w / total


def mover_score(model: LanguageModel, candidate: RawRequestRecord,
                reference: RawRequestRecord, idf_table: dict[str, float]) -> float:
    """1 - earth mover's distance over unigram embeddings, idf-weighted."""
    cand_texts = [t.text for t in tokenize_entities(candidate.raw)]
    ref_texts = [t.text for t in tokenize_entities(reference.raw)]
    if not cand_texts or not ref_texts:
        raise EmptyRequest("both requests need at least one entity token")
    cand_emb = word_embeddings(model, candidate)
    ref_emb = word_embeddings(model, reference)

    default = math.log(len(idf_table) + 1) + 1.0 if idf_table else 1.0
    supply = _idf_weights(cand_texts, idf_table, default)
    demand = _idf_weights(ref_texts, idf_table, default)

    cost = np.zeros((len(cand_emb), len(ref_emb)))
    for i, u in enumerate(cand_emb):
        for j, v in enumerate(ref_emb):
            cost[i, j] = max(0.0, 1.0 - cosine_similarity(u, v))
    return float(np.clip(1.0 - emd(supply, demand, cost), 0.0, 1.0))


def similarity_report(model: LanguageModel,
                      pairs: list[tuple[RawRequestRecord, RawRequestRecord]],
                      idf_table: dict[str, float],
                      max_n: int = 4) -> SimilarityReport:
    """Corpus-averaged similarity between candidate/reference record pairs."""
    if not pairs:
        raise EmptyCandidate("no pairs to evaluate")
    bleus, ps, rs, fs, movers = [], [], [], [], []
    for cand, ref in pairs:
        cand_tokens = [t.text for t in tokenize_entities(cand.raw)]
        ref_tokens = [t.text for t in tokenize_entities(ref.raw)]
        bleus.append(bleu(cand_tokens, ref_tokens, max_n))
        p, r, f = bert_score(model, cand, ref)
        ps.append(p)
        rs.append(r)
        fs.append(f)
        movers.append(mover_score(model, cand, ref, idf_table))
    return SimilarityReport(bleu=float(np.mean(bleus)), bert_p=float(np.mean(ps)),
                            bert_r=float(np.mean(rs)), bert_f1=float(np.mean(fs)),
                            mover=float(np.mean(movers)))
