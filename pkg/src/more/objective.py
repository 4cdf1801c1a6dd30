"""Projection heads, learnable temperature and the symmetric tri-modal InfoNCE loss."""

from __future__ import annotations

from typing import Union

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Linear, Module, Parameter
from .tensor import DimensionError, Tensor

TAU_INIT = 0.1
TAU_MIN, TAU_MAX = 1e-3, 10.0


class ParameterError(ValueError):
    pass


class ProjectionHead(Module):
    """Bias-free linear -> batch norm -> ReLU -> linear with bias."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_in, hidden, bias=False, rng=rng)
        self.bn = BatchNorm(hidden, channel_axis=-1)
        self.fc2 = Linear(hidden, d_out, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.bn(self.fc1(x))))


class Temperature(Module):
    """tau stored as its logarithm; ``clamp_`` keeps it inside ``[TAU_MIN, TAU_MAX]``."""

    def __init__(self, init: float = TAU_INIT):
        super().__init__()
        self.log_tau = Parameter(np.array(np.log(init)))

    def forward(self) -> Tensor:
        return T.exp(self.log_tau)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp_(self) -> None:
        self.log_tau.data = np.clip(self.log_tau.data, np.log(TAU_MIN), np.log(TAU_MAX))


def project(head: ProjectionHead, embedding: Tensor) -> Tensor:
    """Apply the head and L2-normalise each row."""
    h = head(embedding)
    norms = np.linalg.norm(h.data, axis=-1)
    if np.any(norms == 0):
        raise FloatingPointError("projection produced a zero vector; direction undefined")
    return T.l2_normalize(h, axis=-1)


def cosine_sim_matrix(za: Tensor, zb: Tensor) -> Tensor:
    """``S[i, j] = <za_i, zb_j>`` for unit rows.

    Computed as an elementwise product summed over the feature axis, so
    ``cosine_sim_matrix(b, a)`` is bitwise the transpose of ``cosine_sim_matrix(a, b)``.
    """
    za, zb = T.as_tensor(za), T.as_tensor(zb)
    if za.ndim != 2 or zb.ndim != 2 or za.shape[1] != zb.shape[1]:
        raise DimensionError(f"embedding shapes {za.shape} and {zb.shape} are incompatible")
    return T.tsum(za.reshape(za.shape[0], 1, za.shape[1]) * zb.reshape(1, zb.shape[0], zb.shape[1]), axis=-1)


def _tau_tensor(tau) -> Tensor:
    tau = tau if isinstance(tau, Tensor) else T.as_tensor(tau)
    if not np.all(tau.data > 0):
        raise ParameterError("temperature must be positive")
    return tau


def info_nce_directional(S: Union[Tensor, np.ndarray], tau) -> Tensor:
    """Mean over rows ``i`` of ``-log softmax(S[i] / tau)[i]``; row ``i``'s positive is column ``i``."""
    S = T.as_tensor(S)
    tau = _tau_tensor(tau)
    n = S.shape[0]
    logp = T.log_softmax(S / tau, axis=1)
    idx = np.arange(n)
    return -T.mean(logp[idx, idx])


def symmetric_pair_loss(za: Tensor, zb: Tensor, tau) -> Tensor:
    """Average of the two directional losses on ``S = za zb^T`` and its transpose."""
    if za.shape[0] != zb.shape[0]:
        raise DimensionError("batches must have equal size")
    S = cosine_sim_matrix(za, zb)
    return (info_nce_directional(S, tau) + info_nce_directional(T.transpose(S), tau)) * 0.5


def total_loss(z_text: Tensor, z_xray: Tensor, z_ecg: Tensor, tau) -> Tensor:
    """Mean of the text-X-ray and text-ECG symmetric losses."""
    if not (z_text.shape[0] == z_xray.shape[0] == z_ecg.shape[0]):
        raise DimensionError("batches must have equal size")
    return (symmetric_pair_loss(z_text, z_xray, tau) + symmetric_pair_loss(z_text, z_ecg, tau)) * 0.5
