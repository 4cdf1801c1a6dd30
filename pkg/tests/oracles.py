"""Brute-force reference implementations shared by the unit and acceptance tests."""

import math
from fractions import Fraction

import numpy as np


def auroc_pairwise(scores, labels):
    """Exact fraction of (positive, negative) pairs ordered correctly, ties as one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


def auprc_thresholds(scores, labels):
    """Sweep every distinct score as a threshold, highest first."""
    n_pos = sum(1 for y in labels if y)
    ap, prev_recall = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(1 for y in picked if y)
        recall = Fraction(tp, n_pos)
        ap += (recall - prev_recall) * Fraction(tp, len(picked))
        prev_recall = recall
    return float(ap)


def _cos(a, b):
    dot = math.fsum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))


def precision_at_k_sorted(queries, corpus, qlab, clab, k):
    """Per query: sort the corpus by cosine (descending, index breaks ties) and count label matches."""
    per_query = []
    for q, lq in zip(queries, qlab):
        sims = [(-_cos(q, c), j) for j, c in enumerate(corpus)]
        top = [j for _, j in sorted(sims)[:k]]
        per_query.append(Fraction(sum(1 for j in top if clab[j] == lq), k))
    return float(sum(per_query) / len(per_query))


def rollout_hand(attentions, gradients):
    """Explicit per-layer expansion with plain loops, first layer first."""
    n = attentions[0].shape[-1]
    R = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for A, G in zip(attentions, gradients):
        h = A.shape[0]
        C = [[sum(max(G[m, i, j] * A[m, i, j], 0.0) for m in range(h)) / h for j in range(n)] for i in range(n)]
        M = [[(1.0 if i == j else 0.0) + C[i][j] for j in range(n)] for i in range(n)]
        R = [[sum(M[i][t] * R[t][j] for t in range(n)) for j in range(n)] for i in range(n)]
        R = [[v / sum(row) for v in row] for row in R]
    return np.array(R)


def random_fixture(rng, n=None, ties=False):
    n = n or int(rng.integers(4, 40))
    scores = rng.integers(0, 5, n).astype(float) if ties else rng.normal(size=n)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    return scores, labels
