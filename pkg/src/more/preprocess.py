"""Seeded preprocessing and augmentation for ECG signals and chest X-ray images.

Every function is a pure function of ``(input, config, rng)``: calling it with
a generator seeded identically gives bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from . import _kernels
from .tensor import Tensor

N_LEADS = 12
TARGET_RATE = 100
TARGET_LENGTH = 1000


class ParameterError(ValueError):
    pass


@dataclass
class EcgRecord:
    leads: np.ndarray  # 12 x L
    rate_hz: float

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=np.float64)
        if self.leads.ndim != 2 or self.leads.shape[0] != N_LEADS:
            raise ParameterError(f"ECG must have {N_LEADS} leads, got shape {self.leads.shape}")
        if not self.rate_hz > 0:
            raise ParameterError("rate_hz must be positive")

    @property
    def length(self) -> int:
        return self.leads.shape[1]


@dataclass
class ImageRecord:
    pixels: np.ndarray  # H x W, values in [0, 1]
    mean: Optional[float] = None
    std: Optional[float] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 32:
            raise ParameterError(f"image must be 2-D with sides >= 32, got {self.pixels.shape}")


@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.6, 0.9)
    scale_prob: float = 0.8
    jitter_max: float = 0.4
    jitter_prob: float = 0.8
    blur_kernel_range: Tuple[int, int] = (7, 23)
    blur_prob: float = 0.5
    warp_segments: int = 4
    warp_factor: float = 0.25
    permute_segments: int = 4
    seed: int = 0

    def __post_init__(self):
        for p in (self.scale_prob, self.jitter_prob, self.blur_prob):
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"probability {p} outside [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ParameterError("scale_range must satisfy 0 < lo <= hi <= 1")
        klo, khi = self.blur_kernel_range
        if not 1 <= klo <= khi or not any(k % 2 for k in range(klo, khi + 1)):
            raise ParameterError("blur_kernel_range must be ordered and contain an odd size")


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for record ``index`` derived from a master seed."""
    return np.random.default_rng([int(seed), int(index)])


# -- resampling helpers ------------------------------------------------------------
def _resize_linear(v: np.ndarray, n: int) -> np.ndarray:
    """Endpoint-aligned linear resize of the last axis to ``n`` samples."""
    m = v.shape[-1]
    if n == m:
        return v.copy()
    if m == 1:
        return np.repeat(v, n, axis=-1)
    step = (m - 1) / (n - 1) if n > 1 else 0.0
    pos = np.arange(n) * step
    src = np.arange(m)
    return np.stack([np.interp(pos, src, row) for row in v.reshape(-1, m)]).reshape(v.shape[:-1] + (n,))


def ecg_resample(x: EcgRecord, target_hz: float = TARGET_RATE) -> EcgRecord:
    """Linear-interpolation resampling to ``target_hz``.

    Output sample ``j`` sits at input index ``j * rate / target``; samples past
    the last input sample hold its value.
    """
    if not target_hz > 0:
        raise ParameterError("target_hz must be positive")
    if target_hz == x.rate_hz:
        return EcgRecord(x.leads.copy(), x.rate_hz)
    n_out = int(round(x.length * target_hz / x.rate_hz))
    pos = np.arange(n_out) * (x.rate_hz / target_hz)
    src = np.arange(x.length)
    out = np.stack([np.interp(pos, src, lead) for lead in x.leads])
    return EcgRecord(out, target_hz)


def ecg_clean_nan(x: EcgRecord) -> EcgRecord:
    return EcgRecord(np.where(np.isfinite(x.leads), x.leads, 0.0), x.rate_hz)


def baseline_window(rate_hz: float, window_seconds: float) -> int:
    n = int(round(window_seconds * rate_hz))
    if n < 3:
        raise ParameterError(f"baseline window of {n} samples is below the 3-sample minimum")
    return n if n % 2 else n + 1


def ecg_remove_baseline_wander(x: EcgRecord, window_seconds: float = 0.6) -> EcgRecord:
    """Subtract a per-lead moving-median baseline (odd window, edge-replicated)."""
    w = baseline_window(x.rate_hz, window_seconds)
    base = _kernels.moving_median(x.leads, w)
    return EcgRecord(x.leads - base, x.rate_hz)


def ecg_minmax_per_lead(x: EcgRecord) -> EcgRecord:
    """Map each lead affinely onto [-1, 1]; a flat lead becomes all zeros."""
    lo = x.leads.min(axis=1, keepdims=True)
    hi = x.leads.max(axis=1, keepdims=True)
    rng = hi - lo
    flat = rng == 0
    safe = np.where(flat, 1.0, rng)
    out = (x.leads - lo) / safe * 2.0 - 1.0
    out = np.where(flat, 0.0, out)
    return EcgRecord(out, x.rate_hz)


def ecg_fit_length(x: EcgRecord, length: int = TARGET_LENGTH) -> EcgRecord:
    """Truncate the tail or zero-pad it so the record has exactly ``length`` samples."""
    if x.length >= length:
        return EcgRecord(x.leads[:, :length].copy(), x.rate_hz)
    out = np.zeros((N_LEADS, length))
    out[:, : x.length] = x.leads
    return EcgRecord(out, x.rate_hz)


def preprocess_ecg(x: EcgRecord, window_seconds: float = 0.6) -> EcgRecord:
    """Resample to 100 Hz, zero non-finite values, remove baseline wander, min-max per lead."""
    x = ecg_resample(x, TARGET_RATE)
    x = ecg_clean_nan(x)
    x = ecg_fit_length(x, TARGET_LENGTH)
    x = ecg_remove_baseline_wander(x, window_seconds)
    return ecg_minmax_per_lead(x)


def _segment_bounds(n: int, segments: int):
    size = n // segments
    starts = [i * size for i in range(segments)]
    ends = starts[1:] + [n]
    return list(zip(starts, ends))


def ecg_time_warp(x: EcgRecord, segments: int = 4, factor: float = 0.25, rng: Optional[np.random.Generator] = None) -> EcgRecord:
    """Stretch or compress each of ``segments`` contiguous pieces, then restore the length.

    One draw ``rng.integers(0, 2, segments)`` picks compress (0) or stretch (1)
    per segment, scaling its length by ``1 - factor`` or ``1 + factor``. The
    same warp is applied to every lead. The last segment absorbs the remainder.
    """
    if segments < 1:
        raise ParameterError("segments must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    n = x.length
    signs = rng.integers(0, 2, size=segments) * 2 - 1
    pieces = []
    for (a, b), s in zip(_segment_bounds(n, segments), signs):
        seg = x.leads[:, a:b]
        new_len = max(int(round((b - a) * (1.0 + factor * s))), 1)
        pieces.append(_resize_linear(seg, new_len))
    warped = np.concatenate(pieces, axis=1)
    return EcgRecord(_resize_linear(warped, n), x.rate_hz)


def ecg_random_permute(x: EcgRecord, segments: int = 4, rng: Optional[np.random.Generator] = None, order=None) -> EcgRecord:
    """Reorder ``segments`` contiguous pieces by one permutation shared by all leads."""
    if x.length < segments:
        raise ParameterError("record shorter than segment count")
    if order is None:
        rng = rng if rng is not None else np.random.default_rng()
        order = rng.permutation(segments)
    bounds = _segment_bounds(x.length, segments)
    out = np.concatenate([x.leads[:, bounds[i][0] : bounds[i][1]] for i in order], axis=1)
    return EcgRecord(out, x.rate_hz)


def augment_ecg(x: EcgRecord, cfg: AugmentConfig, rng: np.random.Generator) -> EcgRecord:
    x = ecg_time_warp(x, cfg.warp_segments, cfg.warp_factor, rng)
    return ecg_random_permute(x, cfg.permute_segments, rng)


# -- X-ray ----------------------------------------------------------------------------
def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def xray_adaptive_hist_eq(img: ImageRecord, tiles: Tuple[int, int] = (8, 8), clip: float = 2.0) -> ImageRecord:
    """Contrast-limited adaptive histogram equalisation on a 256-level grid.

    Tile histograms are clipped at ``clip`` times the mean bin height (at
    least one count), the excess is spread evenly with the remainder
    dealt out at a regular stride, and neighbouring tile mappings are blended
    bilinearly. Sides not divisible by the tile grid are padded by mirror
    reflection for the histograms only.
    """
    ty, tx = tiles
    u8 = to_uint8(img.pixels)
    H, W = u8.shape
    if H < ty or W < tx:
        raise ParameterError("image smaller than tile grid")
    pad_y = (-H) % ty
    pad_x = (-W) % tx
    src = np.pad(u8, ((0, pad_y), (0, pad_x)), mode="reflect") if (pad_y or pad_x) else u8
    th, tw = src.shape[0] // ty, src.shape[1] // tx
    limit = max(int(clip * th * tw / _kernels.HIST_BINS), 1) if clip > 0 else 0
    luts = _kernels.clahe_luts(src, ty, tx, limit)
    out = _kernels.clahe_interpolate(u8, luts, th, tw)
    return ImageRecord(out / 255.0, img.mean, img.std)


def dataset_mean_std(images) -> Tuple[float, float]:
    """Pixel mean and standard deviation over a collection of images."""
    stack = np.stack([im.pixels if isinstance(im, ImageRecord) else np.asarray(im) for im in images])
    return float(stack.mean()), float(stack.std())


def xray_normalize(img: ImageRecord, mean: float, std: float) -> Tensor:
    if std == 0:
        raise ParameterError("std must be nonzero")
    return Tensor((img.pixels - mean) / std)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    in_h, in_w = grid.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, wy = coords(out_h, in_h)
    x0, x1, wx = coords(out_w, in_w)
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bot = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def xray_random_resized_scale(img: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ImageRecord:
    """With probability ``scale_prob`` crop a square-aspect region and resize back."""
    if rng.random() >= cfg.scale_prob:
        return ImageRecord(img.pixels.copy(), img.mean, img.std)
    H, W = img.pixels.shape
    area = rng.uniform(*cfg.scale_range)
    side = np.sqrt(area)
    h = max(int(round(H * side)), 1)
    w = max(int(round(W * side)), 1)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    crop = img.pixels[top : top + h, left : left + w]
    return ImageRecord(np.clip(bilinear_resize(crop, H, W), 0.0, 1.0), img.mean, img.std)


def xray_color_jitter(img: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ImageRecord:
    """Brightness then contrast, each factor uniform in [1 - j, 1 + j]."""
    if rng.random() >= cfg.jitter_prob:
        return ImageRecord(img.pixels.copy(), img.mean, img.std)
    j = cfg.jitter_max
    b = rng.uniform(1 - j, 1 + j)
    c = rng.uniform(1 - j, 1 + j)
    x = np.clip(img.pixels * b, 0.0, 1.0)
    m = x.mean()
    x = np.clip((x - m) * c + m, 0.0, 1.0)
    return ImageRecord(x, img.mean, img.std)


def gaussian_kernel(k: int) -> np.ndarray:
    """Normalised 1-D Gaussian of odd size ``k`` with the size-derived sigma."""
    if k % 2 == 0:
        raise ParameterError("kernel size must be odd")
    sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8
    r = np.arange(k) - (k - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def draw_blur_kernel(cfg: AugmentConfig, rng: np.random.Generator) -> int:
    # even draws are rejected and redrawn
    lo, hi = cfg.blur_kernel_range
    while True:
        k = int(rng.integers(lo, hi + 1))
        if k % 2:
            return k


def gaussian_blur(pixels: np.ndarray, k: int) -> np.ndarray:
    g = gaussian_kernel(k)
    out = ndimage.correlate1d(pixels, g, axis=0, mode="reflect")
    return ndimage.correlate1d(out, g, axis=1, mode="reflect")


def xray_gaussian_blur(img: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ImageRecord:
    if rng.random() >= cfg.blur_prob:
        return ImageRecord(img.pixels.copy(), img.mean, img.std)
    k = draw_blur_kernel(cfg, rng)
    return ImageRecord(np.clip(gaussian_blur(img.pixels, k), 0.0, 1.0), img.mean, img.std)


def augment_xray(img: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ImageRecord:
    img = xray_random_resized_scale(img, cfg, rng)
    img = xray_color_jitter(img, cfg, rng)
    return xray_gaussian_blur(img, cfg, rng)
