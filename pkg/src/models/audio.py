from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Any, List, Optional, Iterable

import numpy as np

from ..errors import DuplicateId


class Category(str, Enum):
    """Recording category as tagged by the archive"""
    CALL = 'call'
    SONG = 'song'
    OTHER = 'other'

    @classmethod
    def parse(cls, value: Optional[str]) -> 'Category':
        """Map free text onto a category, unknown values become OTHER"""
        if value is None:
            return cls.OTHER
        text = str(value).strip().lower()
        for member in cls:
            if text == member.value:
                return member
        return cls.OTHER


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Decoded PCM samples.

    `samples` is 1-D for mono audio and (frames, channels) for multi-channel
    audio. Amplitudes are dimensionless and normalised to [-1, 1] on decode.
    """
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim not in (1, 2):
            raise ValueError(f"samples must be 1-D or 2-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def frames(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.frames / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> 'AudioBuffer':
        return AudioBuffer(samples, self.sample_rate)

    def __len__(self) -> int:
        return self.frames

    def __repr__(self) -> str:
        return f"AudioBuffer(frames={self.frames}, channels={self.channels}, sample_rate={self.sample_rate})"


@dataclass(frozen=True)
class RecordingEntry:
    id: str
    species_label: str
    category: Category = Category.OTHER
    file_path: str = ''
    duration_s: float = 0.0
    # Kept for provenance, never used as a training target
    secondary_labels: tuple = ()

    def __post_init__(self):
        if not str(self.id).strip():
            raise ValueError("recording id must be non-empty")
        if not str(self.species_label).strip():
            raise ValueError(f"species_label must be non-empty for recording {self.id}")
        if self.duration_s < 0:
            raise ValueError(f"duration_s must be >= 0 for recording {self.id}")
        if not isinstance(self.category, Category):
            object.__setattr__(self, 'category', Category.parse(self.category))
        object.__setattr__(self, 'secondary_labels', tuple(self.secondary_labels))

    def to_dict(self) -> Dict[str, Any]:
        """Convert entry to a manifest row"""
        return {
            'id': self.id,
            'species_label': self.species_label,
            'category': self.category.value,
            'file_path': self.file_path,
            'duration_s': self.duration_s,
            'secondary_labels': list(self.secondary_labels),
        }


@dataclass
class DatasetManifest:
    """Catalog of recordings plus the ordered class table"""
    entries: List[RecordingEntry] = field(default_factory=list)
    class_table: List[str] = field(default_factory=list)
    # Directory that relative file paths are resolved against
    root: Optional[Path] = None

    def __post_init__(self):
        if not self.class_table:
            self.class_table = build_class_table(self.entries)
        seen = set()
        for entry in self.entries:
            if entry.id in seen:
                raise DuplicateId(f"Duplicate recording id: {entry.id}")
            seen.add(entry.id)
            if entry.species_label not in self.class_table:
                raise ValueError(f"Label {entry.species_label!r} of {entry.id} missing from class table")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __repr__(self) -> str:
        return f"DatasetManifest(entries={len(self.entries)}, classes={len(self.class_table)}, root={self.root})"

    @property
    def ids(self) -> List[str]:
        return [entry.id for entry in self.entries]

    def get(self, recording_id: str) -> Optional[RecordingEntry]:
        for entry in self.entries:
            if entry.id == recording_id:
                return entry
        return None

    def resolve(self, entry: RecordingEntry) -> Path:
        """Absolute path of an entry's audio file"""
        path = Path(entry.file_path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def subset(self, ids: Iterable[str]) -> 'DatasetManifest':
        """Manifest restricted to the given ids, keeping this class table"""
        wanted = set(ids)
        entries = [entry for entry in self.entries if entry.id in wanted]
        return DatasetManifest(entries, list(self.class_table), self.root)

    def filter(self, category: Optional[Category] = None) -> 'DatasetManifest':
        """Manifest restricted to one category (call/song/other)"""
        if category is None:
            return self.subset(self.ids)
        category = Category.parse(category) if not isinstance(category, Category) else category
        return self.subset(entry.id for entry in self.entries if entry.category == category)

    def label_index(self, label: str) -> int:
        return self.class_table.index(label)


def build_class_table(entries: Iterable[RecordingEntry]) -> List[str]:
    """Unique species labels in first-appearance order"""
    table: List[str] = []
    for entry in entries:
        if entry.species_label not in table:
            table.append(entry.species_label)
    return table
