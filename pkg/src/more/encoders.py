"""Image, ECG and text encoders: ViT blocks with DropKey, conv patch embedding, LoRA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .nn import BatchNorm, LayerNorm, Linear, Mlp, Module, Parameter
from .tensor import DimensionError, Tensor

NEG_INF = -np.inf


class ParameterError(ValueError):
    pass


@dataclass
class VitConfig:
    depth: int = 4
    heads: int = 4
    dim: int = 128
    mlp_ratio: float = 4.0
    patch_size: int = 16
    qkv_bias: bool = False
    dropkey_rate_first: float = 0.1
    dropkey_rate_last: float = 0.0
    image_size: int = 64
    ecg_length: int = 1000
    ecg_leads: int = 12
    ecg_kernels: Tuple[int, int] = (15, 7)
    ecg_strides: Tuple[int, int] = (5, 4)
    pos_init_std: float = 1.0  # comparable to patch-token scale so location is visible from step 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError("dim must be divisible by heads")
        if not (0 <= self.dropkey_rate_last <= self.dropkey_rate_first <= 1):
            raise ParameterError("need 0 <= rate_last <= rate_first <= 1")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: Tuple[str, ...] = ("q", "k", "v")
    freeze_base: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError("LoRA rank must be >= 1")


@dataclass
class TextConfig:
    vocab_size: int = 64
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    max_len: int = 512
    lora: Optional[LoraConfig] = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.dim % self.heads:
            raise ParameterError("dim must be divisible by heads")


@dataclass
class AttentionTrace:
    """Per-layer attention probabilities ``(B, heads, T, T)``; their ``grad`` is kept on backward."""

    attentions: List[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.attentions)


# -- DropKey ------------------------------------------------------------------------------
def dropkey_schedule(layer_idx: int, depth: int, rate_first: float, rate_last: float) -> float:
    """Masking rate for ``layer_idx``: linear from ``rate_first`` (first layer) to ``rate_last``."""
    if not 0 <= layer_idx < depth:
        raise ParameterError("layer_idx out of range")
    if depth == 1:
        return rate_first
    return rate_first + (rate_last - rate_first) * layer_idx / (depth - 1)


def draw_key_mask(shape: tuple, rate: float, rng: np.random.Generator, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Bernoulli(rate) drop mask over (..., query, key); rows left without a valid key are redrawn."""
    drop = rng.random(shape) < rate
    if valid is None:
        valid = np.ones(shape, dtype=bool)
    else:
        valid = np.broadcast_to(valid, shape)
    while True:
        dead = ~np.any(valid & ~drop, axis=-1)
        if not dead.any():
            return drop
        idx = np.nonzero(dead)
        drop[idx] = rng.random((len(idx[0]), shape[-1])) < rate


def dropkey_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    rate: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    key_valid: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention whose key logits are randomly set to -inf before softmax.

    ``q, k, v`` are ``(..., T, d)``. ``key_valid`` (broadcastable to
    ``(..., T_q, T_k)``) marks keys that may be attended at all, e.g. to hide
    padding. No rescaling is applied, so eval mode and ``rate == 0`` are plain
    attention.
    """
    if rate >= 1:
        raise ParameterError("DropKey rate must be < 1")
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (q @ T.transpose(k, _swap_last(k.ndim))) * scale
    mask = None
    if key_valid is not None:
        mask = ~np.broadcast_to(key_valid, logits.shape)
    if training and rate > 0:
        rng = rng if rng is not None else np.random.default_rng()
        drop = draw_key_mask(logits.shape, rate, rng, key_valid)
        mask = drop if mask is None else (mask | drop)
    if mask is not None:
        logits = T.masked_fill(logits, mask, NEG_INF)
    attn = T.softmax(logits, axis=-1)
    return attn @ v, attn


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# -- LoRA ---------------------------------------------------------------------------------
class LoRALinear(Module):
    """Frozen-able base projection plus a trainable rank-``r`` update scaled by ``alpha / r``.

    Forward: ``x @ W + b + (alpha / r) * (x @ A) @ B`` with ``B`` zero at init.
    """

    def __init__(self, base: Linear, cfg: LoraConfig, rng: np.random.Generator):
        super().__init__()
        d_in, d_out = base.weight.shape
        if cfg.rank >= min(d_in, d_out):
            raise ParameterError(f"LoRA rank {cfg.rank} must be below min({d_in}, {d_out})")
        self.base = base
        self.lora_A = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, cfg.rank)))
        self.lora_B = Parameter(np.zeros((cfg.rank, d_out)))
        self.scaling = cfg.alpha / cfg.rank
        if cfg.freeze_base:
            base.freeze()

    @property
    def weight(self) -> Parameter:
        return self.base.weight

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + ((x @ self.lora_A) @ self.lora_B) * self.scaling


def lora_wrap(base: Linear, cfg: LoraConfig, rng: Optional[np.random.Generator] = None) -> LoRALinear:
    return LoRALinear(base, cfg, rng if rng is not None else np.random.default_rng(0))


# -- transformer ---------------------------------------------------------------------------
class Attention(Module):
    def __init__(self, dim: int, heads: int, qkv_bias: bool, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.q = Linear(dim, dim, bias=qkv_bias, rng=rng)
        self.k = Linear(dim, dim, bias=qkv_bias, rng=rng)
        self.v = Linear(dim, dim, bias=qkv_bias, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)

    def forward(self, x: Tensor, rate: float, rng, key_valid=None) -> Tuple[Tensor, Tensor]:
        B, n, D = x.shape
        H = self.heads

        def split(t):
            return T.transpose(t.reshape(B, n, H, D // H), (0, 2, 1, 3))

        out, attn = dropkey_attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), rate, self.training, rng, key_valid)
        out = T.transpose(out, (0, 2, 1, 3)).reshape(B, n, D)
        return self.proj(out), attn


class Block(Module):
    """Pre-norm residual block: attention then MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, qkv_bias: bool, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, qkv_bias, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor, rate: float, rng, key_valid=None) -> Tuple[Tensor, Tensor]:
        h, attn = self.attn(self.norm1(x), rate, rng, key_valid)
        x = x + h
        return x + self.mlp(self.norm2(x)), attn


class Transformer(Module):
    def __init__(self, dim, depth, heads, mlp_ratio, qkv_bias, rate_first, rate_last, rng):
        super().__init__()
        self.blocks = [Block(dim, heads, mlp_ratio, qkv_bias, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.rates = [dropkey_schedule(i, depth, rate_first, rate_last) for i in range(depth)]

    def forward(self, x: Tensor, rng=None, key_valid=None, trace: bool = False):
        tr = AttentionTrace()
        for blk, rate in zip(self.blocks, self.rates):
            x, attn = blk(x, rate, rng, key_valid)
            if trace:
                tr.attentions.append(attn.retain_grad())
        return self.norm(x), tr


def _pos_init(rng, n, dim, std=0.02):
    return rng.normal(0.0, std, (1, n, dim))


class ImagePatchEmbed(Module):
    """Non-overlapping ``p x p`` patches, flattened and linearly projected.

    Images whose sides are not multiples of ``p`` are zero-padded on the
    bottom and right.
    """

    def __init__(self, image_size: int, patch: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.patch = patch
        self.grid = -(-image_size // patch)
        self.proj = Linear(patch * patch, dim, rng=rng)

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def unfold(self, images: np.ndarray) -> np.ndarray:
        B, H, W = images.shape
        p = self.patch
        ph, pw = (-H) % p, (-W) % p
        if ph or pw:
            images = np.pad(images, ((0, 0), (0, ph), (0, pw)))
        gh, gw = images.shape[1] // p, images.shape[2] // p
        x = images.reshape(B, gh, p, gw, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(B, gh * gw, p * p)

    def forward(self, images) -> Tensor:
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if isinstance(images, Tensor) and images.requires_grad:
            B, H, W = images.shape
            p = self.patch
            if H % p or W % p:
                raise DimensionError("differentiable input must be patch-aligned")
            x = images.reshape(B, H // p, p, W // p, p)
            x = T.transpose(x, (0, 1, 3, 2, 4)).reshape(B, (H // p) * (W // p), p * p)
        else:
            x = Tensor(self.unfold(data))
        return self.proj(x)


class EcgPatchEmbed(Module):
    """Two strided 1-D convolutions, each followed by batch norm and ReLU."""

    def __init__(self, leads: int, dim: int, kernels, strides, rng: np.random.Generator):
        super().__init__()
        half = dim // 2
        k1, k2 = kernels
        self.strides = tuple(strides)
        self.kernels = tuple(kernels)
        self.conv1_w = Parameter(rng.normal(0, np.sqrt(2.0 / (leads * k1)), (half, leads, k1)))
        self.conv1_b = Parameter(np.zeros(half))
        self.bn1 = BatchNorm(half, channel_axis=1)
        self.conv2_w = Parameter(rng.normal(0, np.sqrt(2.0 / (half * k2)), (dim, half, k2)))
        self.conv2_b = Parameter(np.zeros(dim))
        self.bn2 = BatchNorm(dim, channel_axis=1)

    def n_tokens(self, length: int) -> int:
        (k1, k2), (s1, s2) = self.kernels, self.strides
        l1 = (length - k1) // s1 + 1
        return (l1 - k2) // s2 + 1

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        h = T.relu(self.bn1(T.conv1d(x, self.conv1_w, self.conv1_b, self.strides[0])))
        h = T.relu(self.bn2(T.conv1d(h, self.conv2_w, self.conv2_b, self.strides[1])))
        return T.transpose(h, (0, 2, 1))


class _VitBase(Module):
    def _init_common(self, n_tokens: int, cfg: VitConfig, rng):
        self.cls_token = Parameter(rng.normal(0, 0.02, (1, 1, cfg.dim)))
        self.pos_embed = Parameter(_pos_init(rng, n_tokens + 1, cfg.dim, cfg.pos_init_std))
        self.transformer = Transformer(
            cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio, cfg.qkv_bias,
            cfg.dropkey_rate_first, cfg.dropkey_rate_last, rng,
        )

    def tokens(self, x) -> Tensor:
        patches = self.embed(x)
        B = patches.shape[0]
        cls = self.cls_token * np.ones((B, 1, 1))
        return T.concat([cls, patches], axis=1) + self.pos_embed

    def forward(self, x, rng=None, trace: bool = False):
        """Return ``(cls_embedding [B, dim], AttentionTrace)``."""
        h, tr = self.transformer(self.tokens(x), rng=rng, trace=trace)
        return h[:, 0], tr


class ImageEncoder(_VitBase):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = ImagePatchEmbed(cfg.image_size, cfg.patch_size, cfg.dim, rng)
        self._init_common(self.embed.n_patches, cfg, rng)


class EcgEncoder(_VitBase):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = EcgPatchEmbed(cfg.ecg_leads, cfg.dim, cfg.ecg_kernels, cfg.ecg_strides, rng)
        n = self.embed.n_tokens(cfg.ecg_length)
        if n < 1:
            raise DimensionError("ECG length too short for the patch-embedding kernels")
        self._init_common(n, cfg, rng)

    def receptive_fields(self) -> List[Tuple[int, int]]:
        """Half-open sample span ``[start, stop)`` feeding each ECG token."""
        (k1, k2), (s1, s2) = self.embed.kernels, self.embed.strides
        n = self.embed.n_tokens(self.cfg.ecg_length)
        return [(t * s2 * s1, (t * s2 + k2 - 1) * s1 + k1) for t in range(n)]


class TextEncoder(Module):
    """Token + position embeddings into pre-norm transformer blocks; CLS output.

    With a LoRA config, the q/k/v projections are wrapped and every base weight
    is frozen, leaving only the low-rank factors trainable.
    """

    def __init__(self, cfg: TextConfig, rng: np.random.Generator, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        self.tok_embed = Parameter(rng.normal(0, 0.02, (cfg.vocab_size, cfg.dim)))
        self.pos_embed = Parameter(rng.normal(0, 0.02, (cfg.max_len, cfg.dim)))
        self.transformer = Transformer(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio, False, 0.0, 0.0, rng)
        if cfg.lora is not None:
            if cfg.lora.freeze_base:
                self.freeze()
            for blk in self.transformer.blocks:
                for name in cfg.lora.targets:
                    setattr(blk.attn, name, LoRALinear(getattr(blk.attn, name), cfg.lora, rng))

    def forward(self, ids, valid=None, trace: bool = False, rng=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise IndexError("token id out of vocabulary range")
        if ids.shape[1] > self.cfg.max_len:
            raise DimensionError("sequence longer than max_len")
        if valid is None:
            valid = ids != self.pad_id
        if not valid.any(axis=1).all():
            raise ValueError("every sequence needs at least one non-padding token")
        x = T.take_rows(self.tok_embed, ids) + self.pos_embed[: ids.shape[1]]
        key_valid = valid[:, None, None, :]
        h, tr = self.transformer(x, rng=rng, key_valid=key_valid, trace=trace)
        return h[:, 0], tr


def trainable_fraction(model: Module) -> float:
    params = model.parameters()
    total = sum(p.size for p in params)
    return sum(p.size for p in params if p.requires_grad) / total
