"""Matched X-ray/ECG pairs, report text handling and a synthetic tri-modal corpus."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import formats
from .preprocess import EcgRecord, ImageRecord

DIAGNOSES = ("Atelectasis", "Cardiomegaly", "Edema", "Pleural Effusion")
ECG_PHRASES = (
    "Sinus rhythm with low voltage",
    "Left ventricular hypertrophy",
    "Nonspecific ST T wave changes",
    "Possible inferior infarct",
)
FILLER = (
    "patient", "view", "portable", "chest", "study", "compared", "prior", "stable",
    "noted", "seen", "mild", "moderate", "right", "left", "lower", "upper", "lobe",
    "heart", "size", "lung", "volumes", "rate", "axis", "interval", "normal",
)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
MAX_TOKENS = 512
DEFAULT_MAX_GAP_DAYS = 60
FUSED_MAX_GAP_DAYS = 3


class EmptyNoteError(ValueError):
    pass


@dataclass(frozen=True)
class StudyRecord:
    subject_id: str
    study_id: str
    modality: str  # "xray" | "ecg"
    study_date: float  # days since epoch
    path: str = ""
    note: Optional[str] = None
    labels: Optional[Dict[str, int]] = None

    def __post_init__(self):
        if not self.subject_id or not self.study_id:
            raise ValueError("subject_id and study_id must be nonempty")
        if self.modality not in ("xray", "ecg"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.isfinite(self.study_date):
            raise ValueError("study_date must be finite")


@dataclass
class TripleSample:
    image: Optional[ImageRecord]
    ecg: Optional[EcgRecord]
    xray_note: str
    ecg_note: str
    labels: Dict[str, int] = field(default_factory=dict)
    gap_days: int = 0
    subject_id: str = ""
    study_id_x: str = ""
    study_id_e: str = ""
    image_path: str = ""
    ecg_path: str = ""

    @property
    def label(self) -> int:
        """Index of the single positive label, or -1."""
        pos = [i for i, v in enumerate(self.labels.values()) if v == 1]
        return pos[0] if len(pos) == 1 else -1


# -- matching -------------------------------------------------------------------------
def match_pairs(xrays: Sequence[StudyRecord], ecgs: Sequence[StudyRecord], max_gap_days: float = DEFAULT_MAX_GAP_DAYS) -> List[TripleSample]:
    """Every (X-ray, ECG) pair of the same subject whose study dates differ by at most ``max_gap_days``.

    Output is ordered by subject, then X-ray study, then ECG study.
    """
    by_subject_e: Dict[str, List[StudyRecord]] = {}
    for e in ecgs:
        by_subject_e.setdefault(e.subject_id, []).append(e)
    by_subject_x: Dict[str, List[StudyRecord]] = {}
    for x in xrays:
        by_subject_x.setdefault(x.subject_id, []).append(x)

    out = []
    for subject in sorted(by_subject_x):
        es = sorted(by_subject_e.get(subject, []), key=lambda r: r.study_id)
        for x in sorted(by_subject_x[subject], key=lambda r: r.study_id):
            for e in es:
                gap = abs(x.study_date - e.study_date)
                if gap <= max_gap_days:
                    xnote = x.note if x.note else (synthesize_note(x.labels) if x.labels else "")
                    out.append(
                        TripleSample(
                            image=None,
                            ecg=None,
                            xray_note=xnote,
                            ecg_note=e.note or "",
                            labels=dict(x.labels or {}),
                            gap_days=int(round(gap)),
                            subject_id=subject,
                            study_id_x=x.study_id,
                            study_id_e=e.study_id,
                            image_path=x.path,
                            ecg_path=e.path,
                        )
                    )
    return out


# -- notes ----------------------------------------------------------------------------
def _label_order(labels: Dict[str, int]) -> List[str]:
    known = [d for d in DIAGNOSES if d in labels]
    return known + [k for k in labels if k not in DIAGNOSES]


def synthesize_note(labels: Dict[str, int]) -> str:
    """Note text for a study that has labels but no report."""
    parts = []
    for name in _label_order(labels):
        v = labels[name]
        if v == 1:
            parts.append(f"Finding of {name}")
        elif v == -1:
            parts.append(f"Uncertain Finding of {name}")
    if not parts:
        raise EmptyNoteError("no positive or uncertain labels to describe")
    return ", ".join(parts)


_HEADING = re.compile(r"(?im)^[ \t]*([A-Za-z][A-Za-z ]*?)[ \t]*:")
_KEEP_SECTIONS = {"impression", "findings", "finding"}
_SPECIAL = re.compile(r"[^A-Za-z0-9\s.,;:!?'\"()%/+\-]")
N_ECG_FIELDS = 7


def strip_special(text: str) -> str:
    text = _SPECIAL.sub(" ", text)
    return re.sub(r"\s+", " ", text).strip()


def clean_report(raw, modality: str) -> str:
    """Cleaned report text; may be empty.

    X-ray: text under ``Impression:``/``Findings:`` headings, in order of
    appearance. ECG: the first seven report fields (a sequence, or a string
    with one field per line) joined by spaces.
    """
    if modality == "xray":
        heads = list(_HEADING.finditer(raw))
        chunks = []
        for i, m in enumerate(heads):
            if m.group(1).strip().lower() in _KEEP_SECTIONS:
                end = heads[i + 1].start() if i + 1 < len(heads) else len(raw)
                chunks.append(raw[m.end() : end])
        return strip_special(" ".join(chunks))
    if modality == "ecg":
        fields = raw.splitlines() if isinstance(raw, str) else list(raw)
        fields = [f for f in fields if f and f.strip()]
        return strip_special(" ".join(fields[:N_ECG_FIELDS]))
    raise ValueError(f"unknown modality {modality!r}")


# -- tokenizer ------------------------------------------------------------------------
_WORD = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> List[str]:
    return _WORD.findall(text)


class Tokenizer:
    """Word-level vocabulary with ``[PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3``."""

    def __init__(self, words: Sequence[str]):
        self.itos = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> List[int]:
        return [self.stoi.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def to_text(self) -> str:
        return "\n".join(self.itos) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Tokenizer":
        words = text.splitlines()
        if tuple(words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary file must start with the special tokens")
        return cls(words[len(SPECIAL_TOKENS) :])


def build_tokenizer(corpus: Iterable[str], min_freq: int = 1) -> Tokenizer:
    counts = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(split_words(doc))
    if n_docs == 0 or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Tokenizer(words)


def join_reports(xray_note: str, ecg_note: str, tokenizer: Tokenizer, max_length: int = MAX_TOKENS) -> List[int]:
    """``[CLS] xray [SEP] ecg [SEP]``, trimmed longest-first to ``max_length`` ids.

    An empty note contributes an empty segment; both separators are always
    emitted.
    """
    x = tokenizer.encode(xray_note)
    e = tokenizer.encode(ecg_note)
    budget = max_length - 3
    excess = len(x) + len(e) - budget
    while excess > 0:
        if len(x) > len(e):
            x.pop()
        else:
            e.pop()
        excess -= 1
    return [tokenizer.cls_id] + x + [tokenizer.sep_id] + e + [tokenizer.sep_id]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0):
    """Right-pad to a common length; returns ``(ids, valid_mask)``."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# -- synthetic corpus ---------------------------------------------------------------------
def class_names(n_classes: int) -> List[str]:
    return [DIAGNOSES[k] if k < len(DIAGNOSES) else f"Class{k}" for k in range(n_classes)]


def motif_center(k: int, image_size: int, cell: int = 16) -> tuple:
    """Class ``k``'s blob centre: the middle of a distinct grid cell, interior cells first."""
    n = image_size // cell
    mid = (n - 1) / 2

    def key(rc):
        ring = max(abs(rc[0] - mid), abs(rc[1] - mid))
        return (ring, rc[0] != rc[1], rc)

    cells = sorted(((r, c) for r in range(n) for c in range(n)), key=key)
    r, c = cells[k % len(cells)]
    return (r * cell + cell // 2, c * cell + cell // 2)


@dataclass
class SyntheticDataset:
    samples: List[TripleSample]
    classes: List[str]
    motif_masks: List[np.ndarray]  # per sample, True where the class blob was planted

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])


def _synthetic_image(k: int, size: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:size, 0:size] / size
    a, b, c = rng.uniform(-0.15, 0.15, 3)
    background = 0.35 + a * yy + b * xx + c * np.sin(2 * np.pi * (yy + xx))
    noise = rng.normal(0, 0.04, (size, size))
    cy, cx = motif_center(k, size)
    cy += rng.integers(-3, 4)
    cx += rng.integers(-3, 4)
    radius = size / 12
    d2 = (np.arange(size)[:, None] - cy) ** 2 + (np.arange(size)[None, :] - cx) ** 2
    blob = np.exp(-d2 / (2 * radius**2))
    img = np.clip(background + noise + 0.5 * blob, 0.0, 1.0)
    img = np.rint(img * 255) / 255.0
    return img, blob > 0.5


def _synthetic_ecg(k: int, n_samples: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_samples) / rate
    freq = 5.0 + 3.0 * k
    bpm = 60.0 + 30.0 * k
    gains = rng.uniform(0.5, 1.5, (12, 1))
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.4 * np.sin(2 * np.pi * freq * t + phase)
    beat = 60.0 / bpm
    offset = rng.uniform(0, beat)
    spikes = np.zeros_like(t)
    for tb in np.arange(offset, t[-1], beat):
        spikes += np.exp(-((t - tb) ** 2) / (2 * 0.012**2))
    wander = rng.uniform(0.2, 0.8) * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t + rng.uniform(0, 2 * np.pi))
    sig = gains * (wave + spikes)[None, :] + wander[None, :] + rng.normal(0, 0.05, (12, n_samples))
    sig = sig.astype(np.float32).astype(np.float64)
    if rng.random() < 0.1:
        idx = rng.integers(0, n_samples, 5)
        sig[rng.integers(0, 12), idx] = np.nan
    return sig


def gen_synthetic_triples(
    n_classes: int,
    n_per_class: int,
    image_size: int = 64,
    ecg_len: int = 1000,
    vocab: Sequence[str] = FILLER,
    seed: int = 0,
    source_rate: float = 500.0,
) -> SyntheticDataset:
    """Class-balanced tri-modal samples with planted, class-specific structure.

    Class ``k`` gets a bright blob at a class-specific grid cell, an ECG whose
    dominant oscillation and beat rate depend on ``k``, and notes naming the
    class. ECGs are produced at ``source_rate`` with ``ecg_len`` samples after
    resampling to 100 Hz. Half of the pairs fall inside the fused-inference
    window of ``FUSED_MAX_GAP_DAYS``, the rest spread over the training window.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    names = class_names(n_classes)
    raw_len = int(round(ecg_len * source_rate / 100.0))
    samples, masks = [], []
    for i in range(n_classes * n_per_class):
        k = i % n_classes
        img, mask = _synthetic_image(k, image_size, rng)
        sig = _synthetic_ecg(k, raw_len, source_rate, rng)
        fill = " ".join(rng.choice(list(vocab), size=rng.integers(2, 6)))
        xnote = f"Finding of {names[k]}. {fill}."
        enote = f"{ECG_PHRASES[rng.integers(len(ECG_PHRASES))]} in keeping with {names[k]}. {fill}."
        labels = {n: int(j == k) for j, n in enumerate(names)}
        near = rng.random() < 0.5
        gap = rng.integers(0, FUSED_MAX_GAP_DAYS + 1) if near else rng.integers(FUSED_MAX_GAP_DAYS + 1, DEFAULT_MAX_GAP_DAYS + 1)
        samples.append(
            TripleSample(
                image=ImageRecord(img),
                ecg=EcgRecord(sig, source_rate),
                xray_note=xnote,
                ecg_note=enote,
                labels=labels,
                gap_days=int(gap),
                subject_id=f"s{i // 2:05d}",
                study_id_x=f"x{i:06d}",
                study_id_e=f"e{i:06d}",
            )
        )
        masks.append(mask)
    return SyntheticDataset(samples, names, masks)


# -- manifest ---------------------------------------------------------------------------------
MANIFEST_COLUMNS = (
    "subject_id", "study_id_x", "study_id_e", "image_path", "ecg_path",
    "xray_note", "ecg_note", "labels", "gap_days",
)


def format_labels(labels: Dict[str, int]) -> str:
    return ";".join(f"{k}:{v}" for k, v in labels.items())


def parse_labels(text: str) -> Dict[str, int]:
    if not text:
        return {}
    out = {}
    for part in text.split(";"):
        name, _, value = part.rpartition(":")
        out[name] = int(value)
    return out


def _tsv_safe(text: str) -> str:
    if "\t" in text or "\n" in text:
        raise ValueError("manifest fields must not contain tabs or newlines")
    return text


def write_manifest(path, samples: Sequence[TripleSample]) -> None:
    rows = [
        (
            s.subject_id, s.study_id_x, s.study_id_e, s.image_path, s.ecg_path,
            _tsv_safe(s.xray_note), _tsv_safe(s.ecg_note), format_labels(s.labels), s.gap_days,
        )
        for s in samples
    ]
    formats.write_tsv(path, MANIFEST_COLUMNS, rows)


def read_manifest(path, load_payloads: bool = True) -> List[TripleSample]:
    header, rows = formats.read_tsv(path)
    missing = set(MANIFEST_COLUMNS) - set(header)
    if missing:
        raise formats.FormatError(f"manifest lacks columns {sorted(missing)}")
    base = Path(path).parent
    out = []
    for r in rows:
        img = ecg = None
        if load_payloads and r["image_path"]:
            img = formats.read_image(base / r["image_path"])
        if load_payloads and r["ecg_path"]:
            ecg = formats.read_ecg(base / r["ecg_path"])
        out.append(
            TripleSample(
                image=img, ecg=ecg, xray_note=r["xray_note"], ecg_note=r["ecg_note"],
                labels=parse_labels(r["labels"]), gap_days=int(r["gap_days"]),
                subject_id=r["subject_id"], study_id_x=r["study_id_x"], study_id_e=r["study_id_e"],
                image_path=r["image_path"], ecg_path=r["ecg_path"],
            )
        )
    return out


def save_dataset(out_dir, samples: Sequence[TripleSample], manifest_name: str = "manifest.tsv") -> Path:
    """Write payloads as ``images/*.pgm`` and ``ecg/*.ecg`` plus a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "ecg").mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(samples):
        ip = f"images/{i:06d}.pgm"
        ep = f"ecg/{i:06d}.ecg"
        formats.write_pgm(out_dir / ip, s.image.pixels)
        formats.write_ecg(out_dir / ep, s.ecg)
        written.append(
            TripleSample(s.image, s.ecg, s.xray_note, s.ecg_note, dict(s.labels), s.gap_days,
                         s.subject_id, s.study_id_x, s.study_id_e, ip, ep)
        )
    path = out_dir / manifest_name
    write_manifest(path, written)
    return path
