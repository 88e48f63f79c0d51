"""Paired synthetic patients with a known latent structure.

Each patient has a volume with one spherical lesion whose depth band encodes the
tumour location and whose texture encodes the binary marker: label 1 lesions
carry a checkerboard modulation, label 0 lesions a smooth ramp. Reports are
generated as text, sanitised, then mapped to word ids.
"""

from __future__ import annotations

import re
import string
import zlib
from dataclasses import asdict, dataclass

import numpy as np

LOCATION_WORDS = ("supratentorial", "infratentorial", "transtentorial")
MARKER1_WORDS = ("striated", "mottled", "speckled", "granular")
MARKER0_WORDS = ("smooth", "homogeneous", "uniform", "bland")
SIZE_WORDS = ("small", "medium", "large")
BRIGHTNESS_WORDS = ("faint", "moderate", "bright")
MARKER_PHRASES = ("BRAF fusion", "BRAF V600E mutation")
FORBIDDEN_TERMS = ("braf", "fusion", "v600e", "mutation")
STRUCTURE_WORDS = ("mri", "brain", "scan", "shows", "lesion", "in", "region", "with",
                   "texture", "measuring", "mm", "on", "flair")

VOCABULARY: tuple[str, ...] = (STRUCTURE_WORDS + LOCATION_WORDS + MARKER1_WORDS + MARKER0_WORDS
                               + SIZE_WORDS + BRIGHTNESS_WORDS)
WORD_IDS = {w: i for i, w in enumerate(VOCABULARY)}

BACKGROUND_LEVEL = 0.2
BACKGROUND_NOISE = 0.05
SHIFT_BIAS = 0.15
DESCRIPTOR_FIDELITY = 0.85
RADIUS_RANGE = (2.0, 3.5)
AMPLITUDE_RANGE = (0.35, 0.55)


class SpecError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_patients: int = 200
    dims: tuple[int, int, int] = (16, 16, 16)
    vocab_size: int = 64
    class_balance: float = 0.33
    seed: int = 0
    shift: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.n_patients < 4:
            raise SpecError(f"need at least 4 patients, got {self.n_patients}")
        if not 0.0 < self.class_balance < 1.0:
            raise SpecError(f"class_balance must lie in (0, 1), got {self.class_balance}")
        if self.vocab_size < len(VOCABULARY):
            raise SpecError(f"vocab_size must be >= {len(VOCABULARY)}")
        d, h, w = self.dims
        r = int(np.ceil(RADIUS_RANGE[1]))
        if d < 6 or min(h, w) < 2 * r + 1:
            raise SpecError(f"dims {self.dims} too small to fit a lesion band")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        return out


@dataclass
class PatientRecord:
    volume: np.ndarray
    report_tokens: np.ndarray
    location: int
    marker_label: int
    seg_mask: np.ndarray
    latent: np.ndarray
    report_text: str = ""


def _stream(seed: int, *key) -> np.random.Generator:
    words = [zlib.crc32(str(k).encode()) for k in key]
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=words))


def _band(location: int, depth: int) -> tuple[float, float]:
    third = depth / 3.0
    start = {0: 0.0, 2: third, 1: 2 * third}[location]
    return start, start + third


def _lesion(rng, spec: DatasetSpec, location: int, label: int, z: np.ndarray):
    d, h, w = spec.dims
    radius = RADIUS_RANGE[0] + (RADIUS_RANGE[1] - RADIUS_RANGE[0]) * z[1]
    amplitude = AMPLITUDE_RANGE[0] + (AMPLITUDE_RANGE[1] - AMPLITUDE_RANGE[0]) * z[0]
    lo, hi = _band(location, d)
    cd = int(np.clip(np.floor(rng.uniform(lo, hi)), 0, d - 1))
    r = int(np.ceil(radius))
    ch = int(rng.integers(r, h - r))
    cw = int(rng.integers(r, w - r))
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    dist = np.sqrt((zz - cd) ** 2 + (yy - ch) ** 2 + (xx - cw) ** 2)
    mask = dist <= radius
    if label == 1:
        texture = 1.0 + 0.6 * np.where((zz + yy + xx) % 2 == 0, 1.0, -1.0)
    else:
        texture = 1.0 + 0.3 * (yy - ch) / max(radius, 1.0)
    profile = amplitude * (1.0 - 0.3 * dist / radius) * texture
    return mask, np.where(mask, profile, 0.0)


def _report_text(rng, location: int, label: int, z: np.ndarray) -> str:
    pool = (MARKER1_WORDS, MARKER0_WORDS)
    descriptors = []
    for _ in range(2):
        faithful = rng.random() < DESCRIPTOR_FIDELITY
        source = pool[0] if (label == 1) == faithful else pool[1]
        descriptors.append(source[rng.integers(len(source))])
    size = SIZE_WORDS[min(int(z[1] * 3), 2)]
    brightness = BRIGHTNESS_WORDS[min(int(z[0] * 3), 2)]
    day, month, year = rng.integers(1, 29), rng.integers(1, 13), rng.integers(2000, 2019)
    mm = int(rng.integers(5, 60))
    return (f"{day:02d}/{month:02d}/{year} MRI brain scan on FLAIR shows {size} {brightness} lesion "
            f"in {LOCATION_WORDS[location]} region, with {descriptors[0]} {descriptors[1]} texture; "
            f"{MARKER_PHRASES[label]}. Measuring {mm} mm.")


def tokenize(text: str) -> np.ndarray:
    words = text.lower().split()
    unknown = [w for w in words if w not in WORD_IDS]
    if unknown:
        raise ValueError(f"words outside the vocabulary: {unknown}")
    return np.array([WORD_IDS[w] for w in words], dtype=np.int64)


def generate_patient(spec: DatasetSpec, index: int, label: int) -> PatientRecord:
    rng = _stream(spec.seed, "patient", index)
    location = int(rng.integers(3))
    z = rng.random(2)
    mask, lesion = _lesion(rng, spec, location, label, z)
    noise_sd = BACKGROUND_NOISE * (2.0 if spec.shift else 1.0)
    volume = BACKGROUND_LEVEL + lesion + rng.normal(0.0, noise_sd, size=spec.dims)
    if spec.shift:
        volume = volume + SHIFT_BIAS
    volume = np.clip(volume, 0.0, 1.0)
    text = sanitize_report(_report_text(rng, location, label, z), FORBIDDEN_TERMS)
    return PatientRecord(volume=volume, report_tokens=tokenize(text), location=location,
                         marker_label=label, seg_mask=mask.astype(np.uint8), latent=z,
                         report_text=text)


def generate_dataset(spec: DatasetSpec) -> list[PatientRecord]:
    n_pos = int(round(spec.class_balance * spec.n_patients))
    labels = np.zeros(spec.n_patients, dtype=np.int64)
    labels[:n_pos] = 1
    _stream(spec.seed, "labels").shuffle(labels)
    return [generate_patient(spec, i, int(labels[i])) for i in range(spec.n_patients)]


_DATE = re.compile(r"\b\d{1,4}[/.\-]\d{1,2}[/.\-]\d{1,4}\b")
_NUMBER = re.compile(r"(?<!\S)\d+(?:\.\d+)?(?!\S)")
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def sanitize_report(text: str, forbidden_terms) -> str:
    """Strip dates, standalone numbers, punctuation and words containing forbidden terms.

    Dates go first so that their separators do not glue digits together; a word
    is judged against the forbidden terms before its punctuation is removed.
    Punctuation is deleted (not replaced by a space).
    """
    terms = [t.lower() for t in forbidden_terms if t]
    text = _DATE.sub(" ", text)
    words = [w for w in text.split() if not any(t in w.lower() for t in terms)]
    text = _PUNCT.sub("", " ".join(words))
    text = _NUMBER.sub(" ", text)
    return " ".join(text.split())


def make_folds(records, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold partition on marker label; returns (train, test) index arrays."""
    labels = np.array([r.marker_label for r in records])
    if not 2 <= k <= len(labels):
        raise ValueError(f"k must be in [2, {len(labels)}], got {k}")
    rng = _stream(seed, "folds")
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise StratificationError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        fold_of[members] = (np.arange(len(members)) + offset) % k
        offset += len(members)
    everything = np.arange(len(labels))
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]
