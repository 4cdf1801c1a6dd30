"""Gradient-weighted attention rollout and its rendering onto images and ECG traces.

Full layer-wise relevance propagation through MLPs and norms is reduced to the
rollout core: per layer ``C = mean_heads(max(grad * A, 0))``, ``R <- (I + C) R``
with rows renormalised, and token relevance read from the CLS row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .encoders import AttentionTrace
from .formats import write_pgm, write_tsv
from .preprocess import bilinear_resize
from .tensor import Tensor


class TraceError(ValueError):
    pass


@dataclass
class RelevanceMap:
    scores: np.ndarray  # length T, CLS first
    modality: str
    grid: Optional[Tuple[int, int]] = None  # image patch grid
    spans: Optional[List[Tuple[int, int]]] = None  # ECG token sample spans

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(self.scores < 0):
            raise ValueError("relevance scores must be non-negative")

    @property
    def tokens(self) -> np.ndarray:
        """Relevance of the non-CLS tokens."""
        return self.scores[1:]


def rollout_matrix(attentions: Sequence[np.ndarray], gradients: Sequence[np.ndarray]) -> np.ndarray:
    """``R`` after all layers; each input is ``(heads, T, T)`` for one sample, first layer first."""
    if len(attentions) != len(gradients) or not attentions:
        raise TraceError("need one gradient per attention layer")
    n = attentions[0].shape[-1]
    eye = np.eye(n)
    R = eye.copy()
    for A, G in zip(attentions, gradients):
        if G is None:
            raise TraceError("trace has no gradients; run backward from the class score first")
        C = np.maximum(np.asarray(G) * np.asarray(A), 0.0).mean(axis=0)
        R = (eye + C) @ R
        R = R / R.sum(axis=1, keepdims=True)
    return R


def relevance_rollout(trace, index: int = 0, modality: str = "image", grid=None, spans=None) -> RelevanceMap:
    """Relevance of sample ``index`` in a gradient-carrying :class:`AttentionTrace`.

    ``trace`` may also be a list of ``(attention, gradient)`` pairs with
    ``(heads, T, T)`` arrays.
    """
    if isinstance(trace, AttentionTrace):
        if not trace.attentions:
            raise TraceError("empty trace")
        if any(a.grad is None for a in trace.attentions):
            raise TraceError("trace has no gradients; run backward from the class score first")
        attns = [a.data[index] for a in trace.attentions]
        grads = [a.grad[index] for a in trace.attentions]
    else:
        attns = [np.asarray(a) for a, _ in trace]
        grads = [None if g is None else np.asarray(g) for _, g in trace]
    R = rollout_matrix(attns, grads)
    rel = R[0].copy()
    rel[0] -= 1.0
    return RelevanceMap(np.maximum(rel, 0.0), modality, grid, spans)


def explain(encode: Callable[[bool], Tuple[Tensor, AttentionTrace]], target: Callable[[Tensor], Tensor]) -> AttentionTrace:
    """Run ``encode(trace=True)``, back-propagate ``target(embedding)`` and return the trace."""
    emb, trace = encode(True)
    score = target(emb)
    if score.size != 1:
        raise ValueError("target must reduce to a scalar")
    T.tsum(score).backward()
    return trace


def explain_image(model, image: np.ndarray, direction: np.ndarray) -> RelevanceMap:
    """Relevance for the cosine between the projected image and a unit ``direction`` (e.g. a prompt)."""
    model.eval()
    d = np.asarray(direction, dtype=np.float64).reshape(1, -1)
    tr = explain(lambda t: model.embed_image(image[None], trace=t), lambda z: T.tsum(z * d))
    g = model.image_encoder.embed.grid
    return relevance_rollout(tr, 0, "image", grid=(g, g))


def explain_ecg(model, ecg: np.ndarray, direction: np.ndarray) -> RelevanceMap:
    model.eval()
    d = np.asarray(direction, dtype=np.float64).reshape(1, -1)
    tr = explain(lambda t: model.embed_ecg(ecg[None], trace=t), lambda z: T.tsum(z * d))
    return relevance_rollout(tr, 0, "ecg", spans=model.ecg_encoder.receptive_fields())


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def render_image_heatmap(rmap: RelevanceMap, shape: Tuple[int, int]) -> np.ndarray:
    """Min-max normalised patch relevance, bilinearly upsampled to ``shape``.

    A constant map (min == max) renders as all ones.
    """
    if rmap.grid is None:
        raise ValueError("relevance map has no patch grid")
    gh, gw = rmap.grid
    if rmap.tokens.size != gh * gw:
        raise ValueError(f"{rmap.tokens.size} patch scores do not fill a {gh}x{gw} grid")
    grid = _minmax(rmap.tokens.reshape(gh, gw))
    return np.clip(bilinear_resize(grid, shape[0], shape[1]), 0.0, 1.0)


def render_ecg_relevance(rmap: RelevanceMap, length: int = 1000) -> np.ndarray:
    """Spread each token's relevance evenly over its receptive field, sum, then min-max normalise.

    Samples past the last receptive field receive nothing, so the tail tapers to zero.
    """
    if rmap.spans is None:
        raise ValueError("relevance map has no token spans")
    if len(rmap.spans) != rmap.tokens.size:
        raise ValueError("span count does not match token count")
    out = np.zeros(length)
    for r, (a, b) in zip(rmap.tokens, rmap.spans):
        b = min(b, length)
        if b > a:
            out[a:b] += r / (b - a)
    return _minmax(out)


def hot_patch(rmap: RelevanceMap) -> Tuple[int, int]:
    """``(row, col)`` of the most relevant patch (first on ties)."""
    gh, gw = rmap.grid
    idx = int(np.argmax(rmap.tokens))
    return divmod(idx, gw)


def patch_overlaps(mask: np.ndarray, patch: Tuple[int, int], patch_size: int) -> bool:
    r, c = patch
    return bool(mask[r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size].any())


def write_heatmap_pgm(path, overlay: np.ndarray) -> None:
    write_pgm(path, overlay)


def write_ecg_relevance_tsv(path, relevance: np.ndarray, rate_hz: float = 100.0) -> None:
    write_tsv(path, ["time_s", "relevance"], [(i / rate_hz, float(v)) for i, v in enumerate(relevance)])


def write_token_tsv(path, tokens: Sequence[str], scores: Sequence[float]) -> None:
    write_tsv(path, ["token", "relevance"], [(t, float(s)) for t, s in zip(tokens, scores)])
