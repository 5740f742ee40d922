import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Any, List, Optional, Tuple, Sequence

import numpy as np

from .audio import AudioBuffer, Category

IMAGE_SIZE = 64
FEATURE_LENGTH = 16

# Fixed application order of clip transforms
TRANSFORM_ORDER = ('nonsilent', 'highpass', 'pitch_shift', 'wrap', 'gaussian')

TRANSFORM_DEFAULTS = {
    'nonsilent': 30.0,
    'highpass': 1500.0,
    'pitch_shift': 4.0,
    'wrap': None,
    'gaussian': 20.0,
}


def _format_param(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:g}"


@dataclass(frozen=True)
class Transform:
    """One clip transform with its parameter, e.g. pitch_shift(4)"""
    name: str
    param: Optional[float] = None

    def __post_init__(self):
        if self.name not in TRANSFORM_ORDER:
            raise ValueError(f"Unknown transform: {self.name}")
        if self.name == 'wrap':
            object.__setattr__(self, 'param', None)
        elif self.param is None:
            object.__setattr__(self, 'param', TRANSFORM_DEFAULTS[self.name])
        else:
            object.__setattr__(self, 'param', float(self.param))
        if self.name == 'pitch_shift' and abs(self.param) > 24:
            raise ValueError(f"pitch_shift n_steps must be within +-24, got {self.param}")
        if self.name == 'highpass' and self.param <= 0:
            raise ValueError(f"highpass cutoff must be positive, got {self.param}")
        if self.name == 'nonsilent' and self.param <= 0:
            raise ValueError(f"nonsilent top_db must be positive, got {self.param}")

    @property
    def tag(self) -> str:
        if self.param is None:
            return self.name
        return f"{self.name}={_format_param(self.param)}"

    @classmethod
    def parse(cls, text: str) -> 'Transform':
        """Parse `name`, `name=value` or `name(value)`"""
        text = text.strip()
        if '=' in text:
            name, value = text.split('=', 1)
            return cls(name.strip(), float(value))
        if text.endswith(')') and '(' in text:
            name, value = text[:-1].split('(', 1)
            return cls(name.strip(), float(value) if value.strip() else None)
        return cls(text)

    def __str__(self) -> str:
        return self.tag


@dataclass(frozen=True)
class AugmentPlan:
    """How one recording is cut into clips and which transforms follow.

    stride_s = 0 means non-overlapping windows. min_len_s defaults to the
    window length, so only full windows are produced unless a shorter tail is
    explicitly allowed.
    """
    window_s: float = 5.0
    stride_s: float = 0.0
    min_len_s: Optional[float] = None
    head_limit_s: Optional[float] = None
    transforms: Tuple[Transform, ...] = ()
    include_origin: bool = False
    extra_strides: Tuple[float, ...] = ()
    label: str = ''

    def __post_init__(self):
        if self.window_s <= 0:
            raise ValueError(f"window_s must be positive, got {self.window_s}")
        if self.stride_s < 0:
            raise ValueError(f"stride_s must be >= 0, got {self.stride_s}")
        if self.min_len_s is None:
            object.__setattr__(self, 'min_len_s', float(self.window_s))
        if not 0 < self.min_len_s <= self.window_s:
            raise ValueError(f"min_len_s must be in (0, window_s], got {self.min_len_s}")
        if self.head_limit_s is not None and self.head_limit_s <= 0:
            raise ValueError(f"head_limit_s must be positive, got {self.head_limit_s}")
        if any(s < 0 for s in self.extra_strides):
            raise ValueError("extra_strides must be >= 0")
        transforms = tuple(t if isinstance(t, Transform) else Transform.parse(str(t))
                           for t in self.transforms)
        names = [t.name for t in transforms]
        if len(set(names)) != len(names):
            raise ValueError(f"Transform listed twice: {names}")
        transforms = tuple(sorted(transforms, key=lambda t: TRANSFORM_ORDER.index(t.name)))
        object.__setattr__(self, 'transforms', transforms)
        object.__setattr__(self, 'extra_strides', tuple(float(s) for s in self.extra_strides))

    @property
    def strides(self) -> Tuple[float, ...]:
        """Every stride the augmented split is taken with"""
        strides = [float(self.stride_s)]
        for stride in self.extra_strides:
            if stride not in strides:
                strides.append(stride)
        return tuple(strides)

    def transform(self, name: str) -> Optional[Transform]:
        for t in self.transforms:
            if t.name == name:
                return t
        return None

    def describe(self) -> str:
        if self.label:
            return self.label
        parts = [f"{_format_param(self.window_s)}s"]
        if self.include_origin:
            parts.append('origin')
        strides = [s for s in self.strides if s > 0]
        if strides:
            parts.append('-'.join(f"{_format_param(s)}s" for s in strides) + ' stride')
        parts.extend(t.tag for t in self.transforms)
        return ' + '.join(parts)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'label': self.describe(),
            'window_s': self.window_s,
            'stride_s': self.stride_s,
            'min_len_s': self.min_len_s,
            'head_limit_s': self.head_limit_s,
            'transforms': [t.tag for t in self.transforms],
            'include_origin': self.include_origin,
            'extra_strides': list(self.extra_strides),
        }


_WINDOW = re.compile(r'^(\d+(?:\.\d+)?)s(?:\s+clip)?\b')
_STRIDE = re.compile(r'(\d+(?:\.\d+)?)s(?:\s*-\s*(\d+(?:\.\d+)?)s)?\s+stride')
_HEAD = re.compile(r'first\s+(\d+(?:\.\d+)?)s')
# Short clips read as "first 100 s" rows, long ones as whole-audio rows
_LONG_WINDOW_S = 10.0
_DEFAULT_HEAD_S = 100.0


def plans_from_label(label: str, gaussian: bool = False, highpass: bool = False) -> List[AugmentPlan]:
    """Build plans from an ablation row label such as "5s origin + 2s stride".

    `gaussian` and `highpass` mirror the two check-mark columns of the table.
    A label naming several window lengths ("5s + 10s + 2s stride") gives one
    plan per window sharing the strides and transforms.
    """
    text = label.strip().lower()
    head_limit: Optional[float] = None
    explicit_head = False
    note = re.search(r'\(([^)]*)\)', text)
    if note:
        head = _HEAD.search(note.group(1))
        if head:
            head_limit = float(head.group(1))
        explicit_head = True
        text = text.replace(note.group(0), ' ')

    windows: List[float] = []
    strides: List[float] = []
    names: List[str] = []
    include_origin = False
    for part in (p.strip() for p in text.split('+')):
        if not part:
            continue
        stride = _STRIDE.search(part)
        if stride:
            lo = float(stride.group(1))
            hi = float(stride.group(2)) if stride.group(2) else lo
            value = lo
            while value <= hi:
                strides.append(value)
                value += 1.0
            part = part.replace(stride.group(0), ' ').strip()
        window = _WINDOW.match(part)
        if window:
            windows.append(float(window.group(1)))
            part = part[window.end():].strip()
        if 'origin' in part:
            include_origin = True
        if 'wrap' in part:
            names.append('wrap')
        if 'pitch' in part:
            names.append('pitch_shift')
        if 'non-silent' in part or 'nonsilent' in part:
            names.append('nonsilent')
        if 'gaussian' in part:
            names.append('gaussian')
        if 'high pass' in part or 'highpass' in part or 'filter' in part:
            names.append('highpass')
    if gaussian:
        names.append('gaussian')
    if highpass:
        names.append('highpass')
    if not windows:
        if 'nonsilent' not in names:
            raise ValueError(f"No window length in plan label: {label!r}")
        windows = [5.0]
    transforms = tuple(Transform(name) for name in dict.fromkeys(names))

    plans = []
    for window in windows:
        limit = head_limit
        if not explicit_head and window < _LONG_WINDOW_S:
            limit = _DEFAULT_HEAD_S
        plans.append(AugmentPlan(
            window_s=window,
            stride_s=strides[0] if strides else 0.0,
            min_len_s=window / 2 if window >= _LONG_WINDOW_S else window,
            head_limit_s=limit,
            transforms=transforms,
            include_origin=include_origin,
            extra_strides=tuple(strides[1:]),
            label=label.strip() if len(windows) == 1 else f"{label.strip()} [{_format_param(window)}s]",
        ))
    return plans


@dataclass(frozen=True, eq=False)
class ClipRecord:
    """One labeled clip cut from a source recording"""
    source_id: str
    start_s: float
    end_s: float
    label: str
    samples: AudioBuffer
    category: Category = Category.OTHER
    augmentations: Tuple[str, ...] = ()
    # Distinguishes oversampled duplicates of the same span
    variant: int = 0
    # Stride of the overlapping split that cut the clip; 0 for plain windows
    stride_ms: int = 0

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"need 0 <= start_s < end_s, got [{self.start_s}, {self.end_s})")
        object.__setattr__(self, 'augmentations', tuple(self.augmentations))

    @property
    def start_ms(self) -> int:
        return int(round(self.start_s * 1000))

    @property
    def window_ms(self) -> int:
        return int(round(self.samples.duration_s * 1000))

    @property
    def tags(self) -> str:
        parts = [f"w{self.window_ms}"]
        if self.stride_ms:
            parts.append(f"s{self.stride_ms}")
        parts.extend(self.augmentations)
        if self.variant:
            parts.append(f"dup{self.variant}")
        return '+'.join(parts)

    @property
    def clip_id(self) -> str:
        """`<source_id>/<start_ms>_<tags>`, also the cache path stem"""
        return f"{self.source_id}/{self.start_ms}_{self.tags}"

    def with_samples(self, samples: np.ndarray, tag: Optional[str] = None) -> 'ClipRecord':
        """Copy carrying new samples and, when given, one more provenance tag"""
        augmentations = self.augmentations + ((tag,) if tag else ())
        return replace(self, samples=self.samples.with_samples(samples), augmentations=augmentations)

    def __repr__(self) -> str:
        return f"ClipRecord(id={self.clip_id}, label={self.label}, frames={self.samples.frames})"


def group_of(clip_id: str) -> str:
    """Source recording id of a clip id"""
    return clip_id.rsplit('/', 1)[0]


@dataclass(frozen=True, eq=False)
class ClipImage:
    """64x64 grayscale rendering of a clip's mel spectrogram"""
    pixels: np.ndarray
    source_clip: Optional[ClipRecord] = None
    clip_id: str = ''

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"ClipImage must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {pixels.shape}")
        if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
            raise ValueError("ClipImage pixels must lie in [0, 1]")
        object.__setattr__(self, 'pixels', pixels)
        if not self.clip_id and self.source_clip is not None:
            object.__setattr__(self, 'clip_id', self.source_clip.clip_id)

    def __repr__(self) -> str:
        return f"ClipImage(clip_id={self.clip_id}, std={self.pixels.std():.3f})"


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """MFCC 1..15 means followed by the mean zero-crossing rate"""
    values: np.ndarray
    clip_id: str = ''

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape != (FEATURE_LENGTH,):
            raise ValueError(f"FeatureVector needs {FEATURE_LENGTH} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("FeatureVector values must be finite")
        object.__setattr__(self, 'values', values)

    @property
    def zcr(self) -> float:
        return float(self.values[-1])

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return FEATURE_LENGTH

    def __repr__(self) -> str:
        return f"FeatureVector(clip_id={self.clip_id}, zcr={self.zcr:.4f})"


@dataclass
class LabeledSet:
    """Items with parallel labels and source-recording groups.

    Items are FeatureVectors, ClipImages, ClipRecords or plain arrays; the
    rebalance and classifier code only relies on `labels` and `groups` being
    aligned with `items`.
    """
    items: List[Any] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)
    groups: List[str] = field(default_factory=list)
    class_table: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.items = list(self.items)
        self.labels = [str(label) for label in self.labels]
        if len(self.items) != len(self.labels):
            raise ValueError(f"{len(self.items)} items but {len(self.labels)} labels")
        if not self.groups:
            self.groups = [str(i) for i in range(len(self.items))]
        self.groups = list(self.groups)
        if len(self.groups) != len(self.items):
            raise ValueError(f"{len(self.items)} items but {len(self.groups)} groups")
        if not self.class_table:
            self.class_table = list(dict.fromkeys(self.labels))
        missing = set(self.labels) - set(self.class_table)
        if missing:
            raise ValueError(f"Labels missing from class table: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.items)

    def __repr__(self) -> str:
        return f"LabeledSet(items={len(self.items)}, counts={dict(self.class_counts)})"

    @property
    def class_counts(self) -> Dict[str, int]:
        counts = Counter(self.labels)
        return {label: counts[label] for label in self.class_table if counts[label]}

    @property
    def label_indices(self) -> np.ndarray:
        index = {label: i for i, label in enumerate(self.class_table)}
        return np.array([index[label] for label in self.labels], dtype=np.int64)

    def matrix(self) -> np.ndarray:
        """Items stacked into one float array (n, ...)"""
        if not self.items:
            return np.zeros((0, FEATURE_LENGTH))
        return np.stack([np.asarray(_as_array(item), dtype=np.float64) for item in self.items])

    def take(self, indices: Sequence[int]) -> 'LabeledSet':
        indices = list(indices)
        return LabeledSet(
            [self.items[i] for i in indices],
            [self.labels[i] for i in indices],
            [self.groups[i] for i in indices],
            list(self.class_table),
        )

    def extend(self, items: Sequence[Any], labels: Sequence[str], groups: Sequence[str]) -> 'LabeledSet':
        return LabeledSet(
            self.items + list(items),
            self.labels + list(labels),
            self.groups + list(groups),
            list(self.class_table),
        )


def _as_array(item: Any) -> np.ndarray:
    if isinstance(item, ClipImage):
        return item.pixels
    if isinstance(item, ClipRecord):
        return item.samples.samples
    return np.asarray(item)
