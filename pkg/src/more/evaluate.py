"""Ranking metrics, zero-shot scoring, retrieval and fused inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .dataset import FUSED_MAX_GAP_DAYS, Tokenizer, join_reports, pad_batch
from .formats import write_tsv

DEFAULT_TEMPLATES = ("Finding of {d}",)
NEGATIVE_TEMPLATE = "No finding of {d}"


class MetricError(ValueError):
    """The metric is undefined for the given labels."""


class UnmatchedPairError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    ids: Optional[List[str]] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if len(self.scores) != len(self.labels):
            raise ValueError("scores and labels differ in length")
        if self.ids is not None and len(self.ids) != len(self.scores):
            raise ValueError("ids and scores differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def _as_set(scores, labels=None) -> ScoredSet:
    return scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)


def auroc(scores, labels=None) -> float:
    """P(random positive outscores random negative), ties counted as one half.

    Counts are kept as integers so the result is the exact pairwise fraction.
    """
    s = _as_set(scores, labels)
    y = s.labels.astype(bool)
    pos, neg = s.scores[y], np.sort(s.scores[~y])
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    lo = np.searchsorted(neg, pos, side="left")
    hi = np.searchsorted(neg, pos, side="right")
    twice = 2 * int(lo.sum()) + int((hi - lo).sum())
    return twice / (2 * len(pos) * len(neg))


def auprc(scores, labels=None) -> float:
    """Average precision: sum over distinct descending thresholds of ``(R_i - R_{i-1}) * P_i``."""
    s = _as_set(scores, labels)
    y = s.labels.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    sc, yy = s.scores[order], y[order]
    tp = np.cumsum(yy)
    # last index of each run of equal scores is where that threshold's counts are read
    last = np.r_[np.nonzero(np.diff(sc))[0], len(sc) - 1]
    tp_t = tp[last]
    precision = tp_t / (last + 1)
    recall = tp_t / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def _unit_rows(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding")
    return x / n


def ranking(queries, corpus) -> Tuple[np.ndarray, np.ndarray]:
    """Cosine similarities and per-query corpus order (descending, ties by corpus index)."""
    sim = _unit_rows(queries) @ _unit_rows(corpus).T
    return sim, np.argsort(-sim, axis=1, kind="stable")


def precision_at_k_from_similarity(sim, query_labels, corpus_labels, k: int) -> float:
    """Precision@k from a precomputed ``(queries, corpus)`` similarity matrix."""
    sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
    if k <= 0:
        raise ValueError("k must be positive")
    if k > sim.shape[1]:
        raise ValueError("k exceeds corpus size")
    order = np.argsort(-sim, axis=1, kind="stable")
    hits = np.asarray(corpus_labels)[order[:, :k]] == np.asarray(query_labels)[:, None]
    return float(hits.mean(axis=1).mean())


def precision_at_k(queries, corpus, query_labels, corpus_labels, k: int) -> float:
    """Mean over queries of the same-class fraction among the ``k`` nearest corpus items (cosine)."""
    if k <= 0:
        raise ValueError("k must be positive")
    sim, _ = ranking(queries, corpus)
    return precision_at_k_from_similarity(sim, query_labels, corpus_labels, k)


def retrieve(query, corpus, top_k: int, ids: Optional[Sequence[str]] = None) -> List[Tuple[str, float]]:
    corpus = np.atleast_2d(corpus)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(corpus))]
    sim, order = ranking(query, corpus)
    return [(ids[j], float(sim[0, j])) for j in order[0, : min(top_k, len(corpus))]]


# -- zero-shot ------------------------------------------------------------------------------
@dataclass
class PromptBank:
    classes: List[str]
    prompts: Dict[str, List[str]]
    embeddings: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("empty prompt bank")
        for c in self.classes:
            if not self.prompts.get(c):
                raise ValueError(f"class {c!r} has no prompt")
            if c in self.embeddings:
                e = np.atleast_2d(self.embeddings[c])
                if not np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9):
                    raise ValueError("prompt embeddings must be unit-norm")
                self.embeddings[c] = e


def embed_texts(model, tokenizer: Tokenizer, notes: Sequence[Tuple[str, str]], batch_size: int = 64) -> np.ndarray:
    """Project ``(xray_note, ecg_note)`` pairs through the text branch in eval mode."""
    model.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(notes), batch_size):
            ids, valid = pad_batch([join_reports(a, b, tokenizer) for a, b in notes[s : s + batch_size]])
            out.append(model.embed_text(ids, valid)[0].data)
    return np.concatenate(out)


def embed_images(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    with T.no_grad():
        return np.concatenate([model.embed_image(images[s : s + batch_size])[0].data for s in range(0, len(images), batch_size)])


def embed_ecgs(model, ecgs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    with T.no_grad():
        return np.concatenate([model.embed_ecg(ecgs[s : s + batch_size])[0].data for s in range(0, len(ecgs), batch_size)])


def build_prompt_bank(model, tokenizer: Tokenizer, classes: Sequence[str], templates: Sequence[str] = DEFAULT_TEMPLATES) -> PromptBank:
    prompts = {c: [t.format(d=c) for t in templates] for c in classes}
    flat = [(p, "") for c in classes for p in prompts[c]]
    emb = embed_texts(model, tokenizer, flat)
    out, i = {}, 0
    for c in classes:
        out[c] = emb[i : i + len(prompts[c])]
        i += len(prompts[c])
    return PromptBank(list(classes), prompts, out)


def zero_shot_classify(items, bank: PromptBank) -> np.ndarray:
    """``(N, C)`` raw scores: per class, the best cosine over its prompts."""
    if not bank.classes or not bank.embeddings:
        raise ValueError("empty prompt bank")
    z = _unit_rows(items)
    return np.stack([(z @ _unit_rows(bank.embeddings[c]).T).max(axis=1) for c in bank.classes], axis=1)


def fused_inference(xray_scores, ecg_scores, weight: float = 0.5, gap_days=None, max_gap_days: int = FUSED_MAX_GAP_DAYS) -> np.ndarray:
    """Convex combination ``w * xray + (1 - w) * ecg`` for studies no more than ``max_gap_days`` apart."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    xs, es = np.asarray(xray_scores, dtype=np.float64), np.asarray(ecg_scores, dtype=np.float64)
    if xs.shape != es.shape:
        raise UnmatchedPairError("score arrays differ in shape")
    if gap_days is not None and np.any(np.abs(np.asarray(gap_days)) > max_gap_days):
        raise UnmatchedPairError(f"pair more than {max_gap_days} days apart")
    return weight * xs + (1.0 - weight) * es


# -- output ---------------------------------------------------------------------------------
def write_metrics_tsv(path, rows: Sequence[Tuple[str, str, float]]) -> None:
    write_tsv(path, ["metric", "class", "value"], [(m, c, float(v)) for m, c, v in rows])


def write_retrieval_tsv(path, rows: Sequence[Tuple[str, int, str, float, bool]]) -> None:
    write_tsv(
        path,
        ["query_id", "rank", "corpus_id", "similarity", "label_match"],
        [(q, r, cid, float(sim), int(bool(m))) for q, r, cid, sim, m in rows],
    )


def per_class_auroc(scores: np.ndarray, labels: np.ndarray, classes: Sequence[str]) -> Dict[str, float]:
    """One-vs-rest AUROC for each column of ``scores`` against integer class ids."""
    labels = np.asarray(labels)
    return {c: auroc(scores[:, j], labels == j) for j, c in enumerate(classes)}
