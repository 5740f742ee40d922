"""
Models package for the birdsong pipeline.

Plain dataclasses for recordings, clips, spectrograms, labeled sets and
evaluation reports.
"""

from .audio import AudioBuffer, Category, RecordingEntry, DatasetManifest, build_class_table
from .spectrogram import SpectrogramParams, MelSpectrogram, CANONICAL_RATE
from .clip import (
    Transform, AugmentPlan, ClipRecord, ClipImage, FeatureVector, LabeledSet,
    group_of, plans_from_label, IMAGE_SIZE, FEATURE_LENGTH, TRANSFORM_ORDER,
)
from .report import SplitSpec, MetricsReport

__all__ = [
    'AudioBuffer', 'Category', 'RecordingEntry', 'DatasetManifest', 'build_class_table',
    'SpectrogramParams', 'MelSpectrogram', 'CANONICAL_RATE',
    'Transform', 'AugmentPlan', 'ClipRecord', 'ClipImage', 'FeatureVector', 'LabeledSet',
    'group_of', 'plans_from_label', 'IMAGE_SIZE', 'FEATURE_LENGTH', 'TRANSFORM_ORDER',
    'SplitSpec', 'MetricsReport',
]
