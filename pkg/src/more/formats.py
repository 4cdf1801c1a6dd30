"""On-disk formats.

ECG file (``.ecg``), all little-endian::

    offset  size  field
    0       4     magic b"ECG1"
    4       4     u32 number of leads
    8       4     u32 samples per lead (L)
    12      4     u32 sampling rate in Hz
    16      4*n*L float32 samples, lead-major (lead 0 samples 0..L-1, then lead 1, ...)

Images are binary 8-bit PGM (``P5``), values mapped from [0, 1] by
``round(255 * x)``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .preprocess import EcgRecord, ImageRecord, to_uint8

ECG_MAGIC = b"ECG1"
_ECG_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def write_ecg(path, rec: EcgRecord) -> None:
    leads = np.asarray(rec.leads, dtype="<f4")
    n, L = leads.shape
    with open(path, "wb") as fh:
        fh.write(_ECG_HEADER.pack(ECG_MAGIC, n, L, int(round(rec.rate_hz))))
        fh.write(leads.tobytes(order="C"))


def read_ecg(path) -> EcgRecord:
    raw = Path(path).read_bytes()
    if len(raw) < _ECG_HEADER.size:
        raise FormatError(f"{path}: truncated ECG header")
    magic, n, L, rate = _ECG_HEADER.unpack_from(raw)
    if magic != ECG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_ECG_HEADER.size :]
    if len(body) != 4 * n * L:
        raise FormatError(f"{path}: expected {4 * n * L} data bytes, found {len(body)}")
    leads = np.frombuffer(body, dtype="<f4").reshape(n, L).astype(np.float64)
    return EcgRecord(leads, float(rate))


def write_pgm(path, pixels: np.ndarray) -> None:
    u8 = to_uint8(pixels)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def _pgm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Return pixels in [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(raw, 4)
    if magic != b"P5":
        raise FormatError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w) / 255.0


def read_image(path) -> ImageRecord:
    return ImageRecord(read_pgm(path))


def write_tsv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_tsv(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    return header, [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
