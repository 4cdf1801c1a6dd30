"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``MORE_NUMBA`` is not
set to ``0``. Both paths produce identical results; tests compare them.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("MORE_NUMBA", "1") != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"

HIST_BINS = 256


# -- CLAHE: per-tile clipped-histogram lookup tables ------------------------------
def _clahe_luts_numpy(img, tiles_y, tiles_x, clip):
    th = img.shape[0] // tiles_y
    tw = img.shape[1] // tiles_x
    scale = np.float32(HIST_BINS - 1) / np.float32(th * tw)
    luts = np.empty((tiles_y, tiles_x, HIST_BINS), dtype=np.uint8)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = img[ty * th : (ty + 1) * th, tx * tw : (tx + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=HIST_BINS).astype(np.int64)
            if clip > 0:
                excess = np.maximum(hist - clip, 0)
                clipped = int(excess.sum())
                hist = np.minimum(hist, clip)
                batch = clipped // HIST_BINS
                residual = clipped - batch * HIST_BINS
                hist += batch
                if residual:
                    step = max(HIST_BINS // residual, 1)
                    idx = np.arange(0, HIST_BINS, step)[:residual]
                    hist[idx] += 1
            luts[ty, tx] = np.clip(np.rint(np.cumsum(hist).astype(np.float32) * scale), 0, 255).astype(np.uint8)
    return luts


def _clahe_interp_numpy(img, luts, th, tw):
    H, W = img.shape
    tiles_y, tiles_x = luts.shape[:2]

    # single precision throughout, as in the OpenCV reference, so rounding ties agree
    def axis_weights(n, size, tiles):
        f = np.arange(n, dtype=np.float32) * (np.float32(1.0) / np.float32(size)) - np.float32(0.5)
        lo = np.floor(f).astype(np.int64)
        a = f - lo.astype(np.float32)
        return np.maximum(lo, 0), np.minimum(lo + 1, tiles - 1), a

    y1, y2, ya = axis_weights(H, th, tiles_y)
    x1, x2, xa = axis_weights(W, tw, tiles_x)
    v = img.astype(np.int64)
    one = np.float32(1.0)
    yy = np.arange(H)[:, None]
    xx = np.arange(W)[None, :]
    l11 = luts[y1[yy], x1[xx], v].astype(np.float32)
    l12 = luts[y1[yy], x2[xx], v].astype(np.float32)
    l21 = luts[y2[yy], x1[xx], v].astype(np.float32)
    l22 = luts[y2[yy], x2[xx], v].astype(np.float32)
    xa2 = xa[None, :]
    ya2 = ya[:, None]
    res = (l11 * (one - xa2) + l12 * xa2) * (one - ya2) + (l21 * (one - xa2) + l22 * xa2) * ya2
    return np.clip(np.rint(res), 0, 255).astype(np.uint8)


# -- moving median ------------------------------------------------------------------
def _moving_median_numpy(x, window):
    half = window // 2
    padded = np.pad(x, ((0, 0), (half, half)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1)
    return np.median(win, axis=-1)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _clahe_luts_numba(img, tiles_y, tiles_x, clip):
        th = img.shape[0] // tiles_y
        tw = img.shape[1] // tiles_x
        scale = np.float32(HIST_BINS - 1) / np.float32(th * tw)
        luts = np.empty((tiles_y, tiles_x, HIST_BINS), dtype=np.uint8)
        hist = np.zeros(HIST_BINS, dtype=np.int64)
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                hist[:] = 0
                for y in range(ty * th, (ty + 1) * th):
                    for x in range(tx * tw, (tx + 1) * tw):
                        hist[img[y, x]] += 1
                if clip > 0:
                    clipped = 0
                    for i in range(HIST_BINS):
                        if hist[i] > clip:
                            clipped += hist[i] - clip
                            hist[i] = clip
                    batch = clipped // HIST_BINS
                    residual = clipped - batch * HIST_BINS
                    for i in range(HIST_BINS):
                        hist[i] += batch
                    if residual != 0:
                        step = max(HIST_BINS // residual, 1)
                        i = 0
                        while i < HIST_BINS and residual > 0:
                            hist[i] += 1
                            i += step
                            residual -= 1
                acc = 0
                for i in range(HIST_BINS):
                    acc += hist[i]
                    v = np.rint(np.float32(acc) * scale)
                    luts[ty, tx, i] = np.uint8(min(max(v, 0.0), 255.0))
        return luts

    @njit(cache=True)
    def _clahe_interp_numba(img, luts, th, tw):
        H, W = img.shape
        tiles_y, tiles_x = luts.shape[0], luts.shape[1]
        out = np.empty((H, W), dtype=np.uint8)
        one = np.float32(1.0)
        half = np.float32(0.5)
        inv_th = one / np.float32(th)
        inv_tw = one / np.float32(tw)
        for y in range(H):
            fy = np.float32(y) * inv_th - half
            y1 = int(np.floor(fy))
            ya = fy - np.float32(y1)
            y2 = min(y1 + 1, tiles_y - 1)
            y1 = max(y1, 0)
            for x in range(W):
                fx = np.float32(x) * inv_tw - half
                x1 = int(np.floor(fx))
                xa = fx - np.float32(x1)
                x2 = min(x1 + 1, tiles_x - 1)
                x1 = max(x1, 0)
                v = img[y, x]
                top = np.float32(luts[y1, x1, v]) * (one - xa) + np.float32(luts[y1, x2, v]) * xa
                bot = np.float32(luts[y2, x1, v]) * (one - xa) + np.float32(luts[y2, x2, v]) * xa
                r = np.rint(top * (one - ya) + bot * ya)
                out[y, x] = np.uint8(min(max(r, 0.0), 255.0))
        return out

    @njit(cache=True)
    def _moving_median_numba(x, window):
        # keeps the current window sorted; each step deletes the outgoing
        # sample and inserts the incoming one, O(window) per output
        rows, n = x.shape
        half = window // 2
        out = np.empty((rows, n), dtype=np.float64)
        buf = np.empty(window, dtype=np.float64)
        for r in range(rows):
            for k in range(window):
                buf[k] = x[r, min(max(k - half, 0), n - 1)]
            buf.sort()
            out[r, 0] = buf[half]
            for i in range(1, n):
                old = x[r, min(max(i - 1 - half, 0), n - 1)]
                new = x[r, min(i + half, n - 1)]
                p = np.searchsorted(buf, old)
                for k in range(p, window - 1):
                    buf[k] = buf[k + 1]
                q = np.searchsorted(buf[: window - 1], new)
                for k in range(window - 1, q, -1):
                    buf[k] = buf[k - 1]
                buf[q] = new
                out[r, i] = buf[half]
        return out


def clahe_luts(img: np.ndarray, tiles_y: int, tiles_x: int, clip: int) -> np.ndarray:
    """Clipped, redistributed cumulative histograms per tile (uint8 LUTs)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if USE_NUMBA:
        return _clahe_luts_numba(img, tiles_y, tiles_x, int(clip))
    return _clahe_luts_numpy(img, tiles_y, tiles_x, int(clip))


def clahe_interpolate(img: np.ndarray, luts: np.ndarray, tile_h: int, tile_w: int) -> np.ndarray:
    """Bilinear blend of the four nearest tile mappings for every pixel."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if USE_NUMBA:
        return _clahe_interp_numba(img, luts, tile_h, tile_w)
    return _clahe_interp_numpy(img, luts, tile_h, tile_w)


def moving_median(x: np.ndarray, window: int) -> np.ndarray:
    """Row-wise running median with an odd window and edge replication."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return _moving_median_numba(x, int(window))
    return _moving_median_numpy(x, int(window))
