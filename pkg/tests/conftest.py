"""
Shared test fixtures and configuration for all tests.
"""

from pathlib import Path

import numpy as np
import pytest

from src.audio_io import encode_wav
from src.config import ModelConfig, PathsConfig, PipelineConfig
from src.models import (
    AudioBuffer, AugmentPlan, CANONICAL_RATE, ClipRecord, FeatureVector, LabeledSet, SpectrogramParams, Transform,
)
from src.synthetic import make_corpus, synthetic_images


@pytest.fixture
def params():
    """Default analysis settings at the canonical rate"""
    return SpectrogramParams()


@pytest.fixture
def make_tone():
    """Factory for sine tones: make_tone(freq, duration_s, amplitude=0.5, sample_rate=22050)"""
    def _make(freq: float, duration_s: float, amplitude: float = 0.5, sample_rate: int = CANONICAL_RATE,
              phase: float = 0.0) -> np.ndarray:
        t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
        return amplitude * np.sin(2 * np.pi * freq * t + phase)
    return _make


@pytest.fixture
def make_clip():
    """Factory for ClipRecords around raw samples"""
    def _make(samples, source_id: str = 'rec-1', label: str = 'robin', start_s: float = 0.0,
              sample_rate: int = CANONICAL_RATE) -> ClipRecord:
        samples = np.asarray(samples, dtype=np.float64)
        return ClipRecord(source_id, start_s, start_s + len(samples) / sample_rate, label,
                          AudioBuffer(samples, sample_rate))
    return _make


@pytest.fixture
def write_wav(tmp_path):
    """Write samples to a WAV file under tmp_path and return its path"""
    def _write(name: str, samples, sample_rate: int = CANONICAL_RATE, bits=16) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_wav(AudioBuffer(np.asarray(samples), sample_rate), bits))
        return path
    return _write


@pytest.fixture
def manifest_csv(tmp_path):
    """Write a CSV manifest from row dicts"""
    def _write(rows, name: str = 'manifest.csv') -> Path:
        import pandas as pd
        path = tmp_path / name
        pd.DataFrame(rows).to_csv(path, index=False)
        return path
    return _write


@pytest.fixture
def feature_set():
    """Three well separated Gaussian blobs of 16-value feature vectors, 12 per class"""
    rng = np.random.default_rng(7)
    centers = {'robin': 0.0, 'wren': 6.0, 'finch': -6.0}
    items, labels, groups = [], [], []
    for label, center in centers.items():
        for i in range(12):
            items.append(FeatureVector(rng.normal(center, 1.0, 16), f"{label}-{i // 3}/{i}"))
            labels.append(label)
            groups.append(f"{label}-{i // 3}")
    return LabeledSet(items, labels, groups, list(centers))


@pytest.fixture
def image_set():
    """Small set of patterned 64x64 images, 6 per class"""
    return synthetic_images(n_per_class=6, n_classes=3, seed=1)


@pytest.fixture
def small_plan():
    """2 s windows, no augmentation"""
    return AugmentPlan(window_s=2.0, head_limit_s=6.0)


@pytest.fixture
def small_test_plan():
    return AugmentPlan(window_s=2.0, stride_s=1.0, min_len_s=1.0, head_limit_s=6.0,
                       transforms=(Transform('highpass'),))


@pytest.fixture
def synthetic_corpus(tmp_path):
    """Three species, four 6-second recordings each, with manifest.csv"""
    return make_corpus(tmp_path / 'data', n_per_species=4, duration_s=6.0, seed=3,
                       species=['Steady Warbler', 'Falling Chirper', 'Pulse Ticker'])


@pytest.fixture
def pipeline_config(tmp_path, synthetic_corpus, small_plan, small_test_plan):
    """Pipeline configuration pointing at tmp_path with small, fast settings"""
    config = PipelineConfig(
        paths=PathsConfig(data_dir=tmp_path / 'data', cache_dir=tmp_path / 'cache',
                          output_dir=tmp_path / 'output'),
        model=ModelConfig(kind='knn', k=3, n_trees=10),
        seed=11,
    )
    config.augment.plans = [small_plan]
    config.augment.test_plan = small_test_plan
    config.split = type(config.split)((0.5, 0.25, 0.25), True, config.seed)
    config.features.noise_reduce = False
    return config
