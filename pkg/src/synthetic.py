"""
Synthetic bird-like corpora for tests and benchmarks.

Five "species" with distinct call shapes over a randomised noise floor:
steady 2.5 kHz bursts, 2-5 kHz up-chirps, 7-3 kHz down-chirps, a 3/6 kHz
two-note trill and 8 kHz pulse trains. Call timing, pitch and loudness are
jittered per recording.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .audio_io import encode_wav, save_manifest
from .models import (
    AudioBuffer, CANONICAL_RATE, Category, ClipImage, DatasetManifest, IMAGE_SIZE, LabeledSet, RecordingEntry,
)

logger = logging.getLogger(__name__)


def _tone(freqs: np.ndarray, sr: int, phase: float = 0.0) -> np.ndarray:
    return np.sin(phase + 2 * np.pi * np.cumsum(freqs) / sr)


def _hann(n: int) -> np.ndarray:
    return np.hanning(n) if n > 1 else np.ones(n)


def _steady(rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(rng.uniform(0.3, 0.5) * sr)
    f = 2500.0 * rng.uniform(0.97, 1.03)
    return _tone(np.full(n, f), sr) * _hann(n)


def _up_chirp(rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(rng.uniform(0.4, 0.6) * sr)
    return _tone(np.linspace(2000.0, 5000.0, n), sr) * _hann(n)


def _down_chirp(rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(rng.uniform(0.3, 0.5) * sr)
    return _tone(np.linspace(7000.0, 3000.0, n), sr) * _hann(n)


def _trill(rng: np.random.Generator, sr: int) -> np.ndarray:
    note = int(0.05 * sr)
    notes = int(rng.integers(8, 13))
    freqs = np.concatenate([np.full(note, 3000.0 if i % 2 == 0 else 6000.0) for i in range(notes)])
    return _tone(freqs, sr) * _hann(len(freqs))


def _pulses(rng: np.random.Generator, sr: int) -> np.ndarray:
    pulse, gap = int(0.03 * sr), int(0.03 * sr)
    out = []
    for _ in range(int(rng.integers(8, 13))):
        out.append(_tone(np.full(pulse, 8000.0), sr) * _hann(pulse))
        out.append(np.zeros(gap))
    return np.concatenate(out)


SPECIES: Dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    'Steady Warbler': _steady,
    'Rising Chirper': _up_chirp,
    'Falling Chirper': _down_chirp,
    'Two-note Triller': _trill,
    'Pulse Ticker': _pulses,
}


def make_recording(species: str, duration_s: float, seed: int, sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    """One recording: calls every 0.8-1.5 s over Gaussian background noise"""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    samples = rng.normal(0.0, rng.uniform(0.003, 0.01), n)
    position = rng.uniform(0.0, 0.5)
    while position < duration_s:
        call = SPECIES[species](rng, sample_rate) * rng.uniform(0.3, 0.6)
        start = int(position * sample_rate)
        stop = min(n, start + len(call))
        samples[start:stop] += call[:stop - start]
        position += len(call) / sample_rate + rng.uniform(0.3, 1.0)
    return np.clip(samples, -1.0, 1.0)


def make_corpus(dest: Path, n_per_species: int = 40, duration_s: float = 8.0, seed: int = 0,
                species: Optional[List[str]] = None, sample_rate: int = CANONICAL_RATE) -> DatasetManifest:
    """Write WAV recordings and manifest.csv into dest"""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    names = species or list(SPECIES)
    entries = []
    for s, name in enumerate(names):
        slug = name.lower().replace(' ', '-')
        for i in range(n_per_species):
            recording_id = f"syn-{slug}-{i:03d}"
            samples = make_recording(name, duration_s, seed * 100003 + s * 1009 + i, sample_rate)
            file_name = f"{recording_id}.wav"
            (dest / file_name).write_bytes(encode_wav(AudioBuffer(samples, sample_rate), 16))
            entries.append(RecordingEntry(recording_id, name, Category.SONG, file_name, duration_s))
    manifest = DatasetManifest(entries, list(names), dest)
    save_manifest(manifest, dest / 'manifest.csv')
    logger.info(f"Wrote synthetic corpus of {len(entries)} recordings to {dest}")
    return manifest


def _pattern(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    image = np.zeros((size, size))
    shift = int(rng.integers(-4, 5))
    rows, cols = np.indices((size, size))
    if label == 0:
        image[np.abs(rows - size // 3 - shift) < 3] = 1.0
    elif label == 1:
        image[:, np.abs(np.arange(size) - size // 2 - shift) < 3] = 1.0
    elif label == 2:
        image[np.abs(rows - cols - shift) < 3] = 1.0
    elif label == 3:
        image[np.abs(rows + cols - size - shift) < 3] = 1.0
    else:
        image[((rows // 8 + cols // 8 + shift) % 2) == 0] = 1.0
    return image


def synthetic_images(n_per_class: int = 10, n_classes: int = 5, seed: int = 0) -> LabeledSet:
    """Noisy geometric patterns (bands, lines, diagonals, checkerboard), one shape per class"""
    rng = np.random.default_rng(seed)
    class_table = [f"class-{c}" for c in range(n_classes)]
    items, labels = [], []
    for c in range(n_classes):
        for i in range(n_per_class):
            pixels = 0.7 * _pattern(c % 5, rng, IMAGE_SIZE) + rng.uniform(0.0, 0.3, (IMAGE_SIZE, IMAGE_SIZE))
            items.append(ClipImage(np.clip(pixels, 0.0, 1.0), None, f"img-{c}/{i}"))
            labels.append(class_table[c])
    return LabeledSet(items, labels, [item.clip_id for item in items], class_table)
