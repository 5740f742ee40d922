from dataclasses import dataclass, field
from typing import Dict, Any, List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios; grouping keeps each recording in one partition"""
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    group_by_recording: bool = True
    seed: int = 0

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3:
            raise ValueError(f"ratios must have 3 entries, got {len(ratios)}")
        if any(r < 0 for r in ratios):
            raise ValueError(f"ratios must be >= 0, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
        object.__setattr__(self, 'ratios', ratios)

    def to_dict(self) -> Dict[str, Any]:
        return {'ratios': list(self.ratios), 'group_by_recording': self.group_by_recording, 'seed': self.seed}


@dataclass
class MetricsReport:
    """Clip-level classification metrics plus the recording-level accuracy"""
    class_table: List[str]
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    top_k_accuracy: Dict[int, float] = field(default_factory=dict)
    audio_accuracy: Optional[float] = None
    n_recordings: int = 0

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def per_class(self) -> List[Dict[str, Any]]:
        return [
            {
                'class': name,
                'precision': float(self.precision[i]),
                'recall': float(self.recall[i]),
                'f1': float(self.f1[i]),
                'support': int(self.support[i]),
            }
            for i, name in enumerate(self.class_table)
        ]

    def summary(self) -> Dict[str, Any]:
        """Headline numbers in table-column order"""
        row = {
            'accuracy': self.accuracy,
            'precision': self.macro_precision,
            'recall': self.macro_recall,
            'f1': self.macro_f1,
        }
        for k, value in sorted(self.top_k_accuracy.items()):
            row[f'top_{k}'] = value
        row['audio_accuracy'] = self.audio_accuracy
        return row

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self.summary(),
            'top_k_accuracy': {str(k): v for k, v in sorted(self.top_k_accuracy.items())},
            'n_clips': self.total,
            'n_recordings': self.n_recordings,
            'class_table': list(self.class_table),
            'per_class': self.per_class(),
            'confusion': self.confusion.astype(int).tolist(),
        }

    def __repr__(self) -> str:
        audio = 'n/a' if self.audio_accuracy is None else f"{self.audio_accuracy:.4f}"
        return f"MetricsReport(accuracy={self.accuracy:.4f}, macro_f1={self.macro_f1:.4f}, audio_accuracy={audio})"
