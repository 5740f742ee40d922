"""
Pipeline configuration.

Values are resolved with the precedence defaults < TOML config file <
environment (.env aware) < command-line flags. Every section is a dataclass
that validates itself and raises ConfigError on bad values.
"""

import logging
import os
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
import zlib
from dataclasses import dataclass, field, fields, replace, asdict
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple, Mapping

import numpy as np
from dotenv import load_dotenv

from .errors import ConfigError
from .models import AugmentPlan, SpectrogramParams, SplitSpec, Transform, plans_from_label

logger = logging.getLogger(__name__)

DEFAULT_ARCHIVE_URL = 'https://xeno-canto.org'
MODEL_KINDS = ('knn', 'forest', 'cnn')
REBALANCE_STRATEGIES = ('none', 'downsample', 'smote_tomek', 'custom')
VOTE_MODES = ('majority', 'probability')


def derive_seed(seed: int, *names: Any) -> int:
    """Derive an independent 32-bit seed for a named consumer of randomness.

    Names are hashed with crc32 (ints are used as-is) and mixed with the
    top-level seed through numpy's SeedSequence.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            words.append(int(name) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(name).encode('utf-8')))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class PathsConfig:
    data_dir: Path = Path('data')
    cache_dir: Path = Path('cache')
    output_dir: Path = Path('output')
    manifest: Optional[Path] = None

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        self.cache_dir = Path(self.cache_dir)
        self.output_dir = Path(self.output_dir)
        if self.manifest is None:
            self.manifest = self.data_dir / 'manifest.csv'
        self.manifest = Path(self.manifest)

    # Cache sets: 'train' holds the augmented clips, 'test' the test-plan clips
    def cache_set(self, name: str) -> Path:
        return self.cache_dir / name

    def features_csv(self, name: str = 'train') -> Path:
        return self.cache_set(name) / 'features.csv'

    def images_csv(self, name: str = 'train') -> Path:
        return self.cache_set(name) / 'images.csv'

    def images_dir(self, name: str = 'train') -> Path:
        return self.cache_set(name) / 'images'

    # Clip audio is shared by both sets: <cache>/<source_id>/<start_ms>_<tags>.wav
    def recording_dir(self, source_id: str) -> Path:
        return self.cache_dir / source_id

    def clip_path(self, clip_id: str) -> Path:
        return self.cache_dir / f"{clip_id}.wav"

    @property
    def model_path(self) -> Path:
        return self.output_dir / 'model.bsng'


@dataclass
class FeatureConfig:
    n_mfcc: int = 15
    include_c0: bool = False
    # fmin used by the MFCC filterbank; the spectrogram keeps its own
    mfcc_fmin: float = 1500.0
    noise_reduce: bool = True
    # Cap per-frequency gate floors at their median across frequencies
    gate_median_cap: bool = False
    min_std: float = 0.02

    def __post_init__(self):
        if self.n_mfcc < 1:
            raise ConfigError(f"features.n_mfcc must be >= 1, got {self.n_mfcc}")
        if self.mfcc_fmin < 0:
            raise ConfigError(f"features.mfcc_fmin must be >= 0, got {self.mfcc_fmin}")
        if self.min_std < 0:
            raise ConfigError(f"features.min_std must be >= 0, got {self.min_std}")


def default_plans() -> List[AugmentPlan]:
    return plans_from_label('5s origin + 2s stride', gaussian=True, highpass=True)


def default_test_plan() -> AugmentPlan:
    return AugmentPlan(window_s=5.0, stride_s=1.0, extra_strides=(2.0, 3.0), min_len_s=2.5,
                       head_limit_s=100.0, transforms=(Transform('highpass'),), label='5s 1s-3s stride')


@dataclass
class AugmentConfig:
    plans: List[AugmentPlan] = field(default_factory=default_plans)
    test_plan: AugmentPlan = field(default_factory=default_test_plan)

    def __post_init__(self):
        if not self.plans:
            raise ConfigError("augment.plans must list at least one plan")


@dataclass
class RebalanceConfig:
    strategy: str = 'none'
    low: Optional[int] = None
    high: Optional[int] = None
    k: int = 5

    def __post_init__(self):
        if self.strategy not in REBALANCE_STRATEGIES:
            raise ConfigError(f"rebalance.strategy must be one of {REBALANCE_STRATEGIES}, got {self.strategy!r}")
        if self.k < 1:
            raise ConfigError(f"rebalance.k must be >= 1, got {self.k}")
        if self.strategy == 'custom' and (self.low is None or self.high is None):
            raise ConfigError("rebalance.custom needs both low and high")
        if self.low is not None and self.high is not None and self.low > self.high:
            raise ConfigError(f"rebalance.low ({self.low}) must not exceed rebalance.high ({self.high})")
        for name in ('low', 'high'):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"rebalance.{name} must be >= 1, got {value}")


@dataclass
class ModelConfig:
    kind: str = 'cnn'
    # knn
    k: int = 5
    # forest
    n_trees: int = 100
    max_features: Any = 'sqrt'
    # cnn
    epochs: int = 20
    patience: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    filters: Tuple[int, int] = (32, 64)
    dense: int = 128
    final_activation: str = 'softmax'

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.k < 1:
            raise ConfigError(f"model.k must be >= 1, got {self.k}")
        if self.n_trees < 1:
            raise ConfigError(f"model.n_trees must be >= 1, got {self.n_trees}")
        if isinstance(self.max_features, str):
            if self.max_features not in ('sqrt', 'log2', 'all'):
                raise ConfigError(f"model.max_features must be sqrt, log2, all or an int, got {self.max_features!r}")
        elif int(self.max_features) < 1:
            raise ConfigError(f"model.max_features must be >= 1, got {self.max_features}")
        if self.epochs < 1:
            raise ConfigError(f"model.epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ConfigError(f"model.patience must be >= 0, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"model.batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"model.learning_rate must be >= 0, got {self.learning_rate}")
        if len(self.filters) != 2 or min(self.filters) < 1 or self.dense < 1:
            raise ConfigError(f"model.filters must be two positive counts, got {self.filters}")
        if self.final_activation not in ('softmax', 'sigmoid'):
            raise ConfigError(f"model.final_activation must be softmax or sigmoid, got {self.final_activation!r}")

    def validate_kind(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")

    def hyper_params(self) -> Dict[str, Any]:
        """Hyper-parameters relevant to the configured kind"""
        if self.kind == 'knn':
            return {'k': self.k}
        if self.kind == 'forest':
            return {'n_trees': self.n_trees, 'max_features': self.max_features}
        return {
            'epochs': self.epochs,
            'patience': self.patience,
            'batch_size': self.batch_size,
            'learning_rate': self.learning_rate,
            'filters': list(self.filters),
            'dense': self.dense,
            'final_activation': self.final_activation,
        }


@dataclass
class EvaluationConfig:
    folds: int = 5
    vote_mode: str = 'majority'
    top_k: Tuple[int, ...] = (3, 5)
    confusion_csv: bool = True

    def __post_init__(self):
        self.top_k = tuple(int(k) for k in self.top_k)
        if self.folds < 2:
            raise ConfigError(f"evaluation.folds must be >= 2, got {self.folds}")
        if self.vote_mode not in VOTE_MODES:
            raise ConfigError(f"evaluation.vote_mode must be one of {VOTE_MODES}, got {self.vote_mode!r}")
        if any(k < 1 for k in self.top_k):
            raise ConfigError(f"evaluation.top_k entries must be >= 1, got {self.top_k}")


@dataclass
class ArchiveConfig:
    base_url: str = DEFAULT_ARCHIVE_URL
    quality: Optional[str] = None
    request_interval_s: float = 1.0
    timeout_s: float = 30.0
    convert_non_wav: bool = False

    def __post_init__(self):
        self.base_url = self.base_url.rstrip('/')
        if not self.base_url.startswith(('http://', 'https://')):
            raise ConfigError(f"archive.base_url must be an http(s) URL, got {self.base_url!r}")
        if self.request_interval_s < 1.0:
            raise ConfigError(f"archive.request_interval_s must be >= 1 second, got {self.request_interval_s}")
        if self.timeout_s <= 0:
            raise ConfigError(f"archive.timeout_s must be positive, got {self.timeout_s}")


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    spectrogram: SpectrogramParams = field(default_factory=SpectrogramParams)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    archive: ArchiveConfig = field(default_factory=ArchiveConfig)
    seed: int = 0
    jobs: int = 1
    paper_mode: bool = False
    log_level: Optional[str] = None
    log_dir: Optional[Path] = None

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.split.seed != self.seed:
            self.split = replace(self.split, seed=self.seed)
        if self.paper_mode and self.split.group_by_recording:
            self.split = replace(self.split, group_by_recording=False)

    def seed_for(self, *names: Any) -> int:
        return derive_seed(self.seed, *names)

    def to_dict(self) -> Dict[str, Any]:
        """Serializable view, used in reports and training history"""
        return {
            'paths': {k: str(v) for k, v in asdict(self.paths).items()},
            'spectrogram': self.spectrogram.to_dict(),
            'features': asdict(self.features),
            'augment': {
                'plans': [p.to_dict() for p in self.augment.plans],
                'test_plan': self.augment.test_plan.to_dict(),
            },
            'rebalance': asdict(self.rebalance),
            'model': {'kind': self.model.kind, **self.model.hyper_params()},
            'split': self.split.to_dict(),
            'evaluation': {**asdict(self.evaluation), 'top_k': list(self.evaluation.top_k)},
            'seed': self.seed,
            'paper_mode': self.paper_mode,
        }


def _plan_from_table(table: Mapping[str, Any]) -> List[AugmentPlan]:
    table = dict(table)
    if 'window_s' not in table:
        if 'label' not in table:
            raise ConfigError(f"Plan needs either window_s or label: {table}")
        return plans_from_label(table['label'], gaussian=bool(table.get('gaussian', False)),
                                highpass=bool(table.get('highpass', False)))
    known = {f.name for f in fields(AugmentPlan)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"Unknown plan keys: {sorted(unknown)}")
    table['transforms'] = tuple(Transform.parse(str(t)) for t in table.get('transforms', ()))
    table['extra_strides'] = tuple(table.get('extra_strides', ()))
    return [AugmentPlan(**table)]


def _section(cls, values: Mapping[str, Any], name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**values)


def _build(data: Mapping[str, Any]) -> PipelineConfig:
    kwargs: Dict[str, Any] = {}
    simple = {
        'paths': PathsConfig,
        'spectrogram': SpectrogramParams,
        'features': FeatureConfig,
        'rebalance': RebalanceConfig,
        'model': ModelConfig,
        'evaluation': EvaluationConfig,
        'archive': ArchiveConfig,
    }
    for name, cls in simple.items():
        if name in data:
            kwargs[name] = _section(cls, data[name], name)
    if 'split' in data:
        split = dict(data['split'])
        if 'ratios' in split:
            split['ratios'] = tuple(split['ratios'])
        kwargs['split'] = _section(SplitSpec, split, 'split')
    if 'augment' in data:
        augment = data['augment']
        unknown = set(augment) - {'plans', 'test_plan'}
        if unknown:
            raise ConfigError(f"Unknown keys in [augment]: {sorted(unknown)}")
        plans = [p for table in augment.get('plans', []) for p in _plan_from_table(table)]
        test_plan = default_test_plan()
        if 'test_plan' in augment:
            test_plan = _plan_from_table(augment['test_plan'])[0]
        kwargs['augment'] = AugmentConfig(plans=plans or default_plans(), test_plan=test_plan)
    for name in ('seed', 'jobs', 'paper_mode', 'log_level', 'log_dir'):
        if name in data:
            kwargs[name] = data[name]
    unknown = set(data) - set(simple) - {'split', 'augment', 'seed', 'jobs', 'paper_mode', 'log_level', 'log_dir'}
    if unknown:
        raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
    try:
        return PipelineConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {str(e)}") from e


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """Resolve the pipeline configuration.

    `overrides` holds CLI flag values keyed by dotted config names, e.g.
    {'seed': 3, 'model.kind': 'forest'}; None values are ignored.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Cannot parse config file {path}: {str(e)}") from e
        logger.info(f"Loaded configuration from {path}")

    if environ is None:
        load_dotenv()
        environ = os.environ
    _apply_env(data, environ)

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        _set_dotted(data, key, value)

    try:
        return _build(data)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid configuration: {str(e)}") from e


def _apply_env(data: Dict[str, Any], environ: Mapping[str, str]):
    if environ.get('BIRDSONG_CACHE'):
        _set_dotted(data, 'paths.cache_dir', environ['BIRDSONG_CACHE'])
    if environ.get('BIRDSONG_ARCHIVE_URL'):
        _set_dotted(data, 'archive.base_url', environ['BIRDSONG_ARCHIVE_URL'])
    if environ.get('LOG_LEVEL'):
        data['log_level'] = environ['LOG_LEVEL']
    if environ.get('LOG_DIR'):
        data['log_dir'] = environ['LOG_DIR']


def _set_dotted(data: Dict[str, Any], key: str, value: Any):
    parts = key.split('.')
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
