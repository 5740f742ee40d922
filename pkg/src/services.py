"""
Pipeline services chaining the modules: preprocess, train, evaluate,
predict, ablate and cross-validate. Each returns a summary object that the
CLI prints.

Cache layout under `paths.cache_dir`:

    <source_id>/<start_ms>_<tags>.wav   clip audio of both sets
    train/  index of the clips cut by the training plans (augmented)
    test/   index of the clips cut by the test plan, voted on at evaluation time

each set holding images/*.pgm, images.csv (clip_id, file, label) and
features.csv (clip_id, f0..f15, label).
"""

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .audio_io import decode_wav, encode_wav, load_canonical, load_manifest
from .augmentation import (
    AugmentResult, Loader, add_gaussian_noise, apply_plan, apply_plans, filter_low_feature, plan_recording,
)
from .classifiers import Model, fit_model, predict_items, read_model, write_model
from .config import PipelineConfig, derive_seed
from .errors import ConfigError, EmptyTrainingSet, SilentClip, TooShort
from .evaluation import (
    AblationRow, cross_validate as cross_validate_set, evaluate_predictions, run_ablation, split_dataset, split_items,
    vote_audio,
)
from .features import clip_image, feature_vector, noise_reduce, read_pgm, render_image, mel_spectrogram, write_pgm
from .models import (
    AugmentPlan, AudioBuffer, ClipImage, ClipRecord, DatasetManifest, FEATURE_LENGTH, FeatureVector, LabeledSet,
    MetricsReport, RecordingEntry, group_of,
)
from .rebalance import DUPLICATE_SNR_DB, Renoise, rebalance
from .reports import history_to_json, training_curve_figure, write_ablation, write_report, write_text

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = [f"f{i}" for i in range(FEATURE_LENGTH)]
NUMERIC_KINDS = ('knn', 'forest')


def file_stem(clip_id: str) -> str:
    """Flat image file stem of a clip id"""
    return clip_id.replace('/', '__')


def load_dataset(config: PipelineConfig) -> DatasetManifest:
    path = config.paths.manifest
    if not path.exists():
        logger.error(f"Manifest not found: {path}")
        raise ConfigError(f"Manifest not found: {path}")
    return load_manifest(path)


def make_loader(config: PipelineConfig, manifest: DatasetManifest) -> Loader:
    """Canonical, optionally noise-reduced audio of a manifest entry"""
    params = config.spectrogram

    def loader(entry: RecordingEntry) -> AudioBuffer:
        buffer = load_canonical(manifest.resolve(entry), config.archive.convert_non_wav, params.sample_rate)
        if config.features.noise_reduce and buffer.frames >= params.n_fft:
            buffer = noise_reduce(buffer, params, config.features.gate_median_cap)
        return buffer

    return loader


def _featurize_one(clip: ClipRecord, config: PipelineConfig) -> Tuple[Optional[FeatureVector], ClipImage]:
    features = config.features
    try:
        vector = feature_vector(clip.samples, config.spectrogram, features.n_mfcc, features.include_c0,
                                features.mfcc_fmin, clip.clip_id)
    except TooShort as e:
        logger.warning(f"No feature vector for {clip.clip_id}: {str(e)}")
        vector = None
    return vector, clip_image(clip, config.spectrogram)


def featurize(clips: Sequence[ClipRecord], config: PipelineConfig
              ) -> Tuple[List[Optional[FeatureVector]], List[ClipImage]]:
    """Feature vector and image of every clip, in clip order"""
    with ThreadPoolExecutor(max_workers=max(1, config.jobs)) as pool:
        results = list(pool.map(lambda clip: _featurize_one(clip, config), clips))
    return [r[0] for r in results], [r[1] for r in results]


def labeled_items(clips: Sequence[ClipRecord], config: PipelineConfig, class_table: List[str],
                  kind: str) -> LabeledSet:
    """In-memory LabeledSet of feature vectors (knn, forest) or filtered images (cnn)"""
    vectors, images = featurize(clips, config)
    if kind in NUMERIC_KINDS:
        pairs = [(v, clip) for v, clip in zip(vectors, clips) if v is not None]
    else:
        kept = {id(img) for img in filter_low_feature(images, config.features.min_std)}
        pairs = [(img, clip) for img, clip in zip(images, clips) if id(img) in kept]
    return LabeledSet([p[0] for p in pairs], [p[1].label for p in pairs], [p[1].source_id for p in pairs],
                      list(class_table))


@dataclass
class PreprocessSummary:
    clip_counts: Dict[str, int] = field(default_factory=dict)
    test_clip_counts: Dict[str, int] = field(default_factory=dict)
    n_images: int = 0
    n_features: int = 0
    n_filtered: int = 0
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def n_clips(self) -> int:
        return sum(self.clip_counts.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'clip_counts': self.clip_counts,
            'test_clip_counts': self.test_clip_counts,
            'n_clips': self.n_clips,
            'n_images': self.n_images,
            'n_features': self.n_features,
            'n_filtered': self.n_filtered,
            'failures': self.failures,
        }


def _write_cache_set(clips: Sequence[ClipRecord], config: PipelineConfig, name: str) -> Tuple[int, int, int]:
    """Write clips, images and features of one cache set; returns (images, features, filtered)"""
    paths = config.paths
    root = paths.cache_set(name)
    if root.exists():
        shutil.rmtree(root)
    paths.images_dir(name).mkdir(parents=True, exist_ok=True)

    vectors, images = featurize(clips, config)
    feature_rows, image_rows = [], []
    for clip, vector in zip(clips, vectors):
        path = paths.clip_path(clip.clip_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_wav(clip.samples, '32f'))
        if vector is not None:
            feature_rows.append({'clip_id': clip.clip_id, **dict(zip(FEATURE_COLUMNS, vector.values)),
                                 'label': clip.label})
    kept = filter_low_feature(images, config.features.min_std)
    for image in kept:
        stem = file_stem(image.clip_id)
        write_pgm(image, paths.images_dir(name) / f"{stem}.pgm")
        image_rows.append({'clip_id': image.clip_id, 'file': f"{stem}.pgm", 'label': image.source_clip.label})

    pd.DataFrame(feature_rows, columns=['clip_id', *FEATURE_COLUMNS, 'label']).to_csv(
        paths.features_csv(name), index=False)
    pd.DataFrame(image_rows, columns=['clip_id', 'file', 'label']).to_csv(paths.images_csv(name), index=False)
    logger.info(f"Cache set {name}: {len(clips)} clips, {len(kept)} images, {len(feature_rows)} feature vectors")
    return len(kept), len(feature_rows), len(images) - len(kept)


def _count(clips: Sequence[ClipRecord], class_table: Sequence[str]) -> Dict[str, int]:
    counts = {label: 0 for label in class_table}
    for clip in clips:
        counts[clip.label] = counts.get(clip.label, 0) + 1
    return counts


def preprocess(config: PipelineConfig, manifest: Optional[DatasetManifest] = None,
               loader: Optional[Loader] = None) -> PreprocessSummary:
    """Cut, augment and render every recording into the train and test cache sets"""
    manifest = manifest if manifest is not None else load_dataset(config)
    loader = loader or make_loader(config, manifest)
    seed = config.seed_for('augment')
    params = config.spectrogram

    augmented = apply_plans(manifest, config.augment.plans, seed, params, config.jobs, loader)
    test = apply_plan(manifest, config.augment.test_plan, seed, params, config.jobs, loader)

    summary = PreprocessSummary(
        clip_counts=_count(augmented.clips, manifest.class_table),
        test_clip_counts=_count(test.clips, manifest.class_table),
        failures={**test.failures, **augmented.failures},
    )
    for entry in manifest.entries:
        stale = config.paths.recording_dir(entry.id)
        if stale.is_dir():
            shutil.rmtree(stale)
    summary.n_images, summary.n_features, summary.n_filtered = _write_cache_set(augmented.clips, config, 'train')
    _write_cache_set(test.clips, config, 'test')
    write_text(config.paths.cache_dir / 'preprocess.json', json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    if summary.failures:
        logger.error(f"Preprocessing failed for {len(summary.failures)} recording(s): {sorted(summary.failures)}")
    return summary


def load_feature_set(config: PipelineConfig, name: str, class_table: List[str]) -> LabeledSet:
    path = config.paths.features_csv(name)
    if not path.exists():
        raise ConfigError(f"Feature cache missing: {path} (run preprocess first)")
    df = pd.read_csv(path, dtype={'clip_id': str, 'label': str})
    items = [FeatureVector(row, clip_id) for row, clip_id in zip(df[FEATURE_COLUMNS].to_numpy(), df['clip_id'])]
    return LabeledSet(items, df['label'].tolist(), [group_of(c) for c in df['clip_id']], list(class_table))


def load_image_set(config: PipelineConfig, name: str, class_table: List[str]) -> LabeledSet:
    path = config.paths.images_csv(name)
    if not path.exists():
        raise ConfigError(f"Image cache missing: {path} (run preprocess first)")
    df = pd.read_csv(path, dtype=str)
    images_dir = config.paths.images_dir(name)
    items = [read_pgm(images_dir / f, clip_id) for f, clip_id in zip(df['file'], df['clip_id'])]
    return LabeledSet(items, df['label'].tolist(), [group_of(c) for c in df['clip_id']], list(class_table))


def load_cache_set(config: PipelineConfig, name: str, class_table: List[str]) -> LabeledSet:
    if config.model.kind in NUMERIC_KINDS:
        return load_feature_set(config, name, class_table)
    return load_image_set(config, name, class_table)


def _restrict(labeled: LabeledSet, ids: Sequence[str]) -> LabeledSet:
    wanted = set(ids)
    return labeled.take([i for i, group in enumerate(labeled.groups) if group in wanted])


def partitions(config: PipelineConfig, manifest: DatasetManifest) -> Tuple[LabeledSet, LabeledSet, LabeledSet]:
    """(train, val, test) sets from the cache.

    Grouped: recordings are split first; train uses the augmented clips of
    train recordings, val and test the test-plan clips of theirs. Paper
    mode splits the augmented clips directly, ignoring recordings.
    """
    table = manifest.class_table
    augmented = load_cache_set(config, 'train', table)
    if config.paper_mode:
        parts = split_items(augmented.labels, None, config.split)
        return tuple(augmented.take(p) for p in parts)
    train_m, val_m, test_m = split_dataset(manifest, config.split)
    tested = load_cache_set(config, 'test', table)
    return _restrict(augmented, train_m.ids), _restrict(tested, val_m.ids), _restrict(tested, test_m.ids)


def image_renoiser(config: PipelineConfig) -> Renoise:
    """Duplicate an image by re-noising its clip audio at 30 dB and re-rendering it.

    The audio comes from the image's source clip when it is in memory, else
    from the clip cache.
    """
    def renoise(item: Any, variant: int, seed: int) -> Any:
        if not isinstance(item, ClipImage):
            return item
        if item.source_clip is not None:
            buffer = item.source_clip.samples
        else:
            path = config.paths.clip_path(item.clip_id)
            if not path.exists():
                logger.warning(f"Clip audio missing for {item.clip_id}, duplicating the image as is")
                return ClipImage(item.pixels, None, f"{item.clip_id}+dup{variant}")
            buffer = decode_wav(path.read_bytes())
        clip = ClipRecord(group_of(item.clip_id), 0.0, buffer.duration_s, 'duplicate', buffer, variant=variant)
        try:
            clip = add_gaussian_noise(clip, DUPLICATE_SNR_DB, derive_seed(seed, 'duplicate', item.clip_id, variant))
        except SilentClip:
            pass
        image = render_image(mel_spectrogram(clip.samples, config.spectrogram))
        return ClipImage(image.pixels, None, f"{item.clip_id}+dup{variant}")

    return renoise


@dataclass
class TrainSummary:
    kind: str
    model_path: Path
    n_train: int
    n_val: int
    counts_before: Dict[str, int]
    counts_after: Dict[str, int]
    history: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'model_path': str(self.model_path),
            'n_train': self.n_train,
            'n_val': self.n_val,
            'counts_before': self.counts_before,
            'counts_after': self.counts_after,
            'history': self.history,
        }


def train(config: PipelineConfig, manifest: Optional[DatasetManifest] = None) -> TrainSummary:
    """Fit the configured model on the train partition and write the artifact"""
    config.model.validate_kind()
    manifest = manifest if manifest is not None else load_dataset(config)
    train_set, val_set, _ = partitions(config, manifest)
    if not len(train_set):
        raise EmptyTrainingSet("No cached training clips (run preprocess first)")
    before = train_set.class_counts
    train_set = rebalance(train_set, config.rebalance, config.seed_for('rebalance'), image_renoiser(config))
    model, history = fit_model(train_set, config.model, config.seed_for('model'), val_set, config.jobs)

    output = config.paths.output_dir
    write_model(model, config.paths.model_path)
    summary = TrainSummary(config.model.kind, config.paths.model_path, len(train_set), len(val_set), before,
                           train_set.class_counts, history.to_dict() if history else None)
    if history is not None:
        write_text(output / 'history.json', history_to_json(history.to_dict()))
        write_text(output / 'history.plotly.json', training_curve_figure(history.to_dict()))
    write_text(output / 'train.json', json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    logger.info(f"Trained {config.model.kind} on {len(train_set)} items")
    return summary


def _load_model(config: PipelineConfig, model: Optional[Model]) -> Model:
    if model is not None:
        return model
    path = config.paths.model_path
    if not path.exists():
        logger.error(f"Model artifact not found: {path}")
        raise FileNotFoundError(f"Model artifact not found: {path} (run train first)")
    return read_model(path)


def evaluate(config: PipelineConfig, manifest: Optional[DatasetManifest] = None,
             model: Optional[Model] = None) -> MetricsReport:
    """Clip and recording-level metrics of the trained model on the test partition"""
    model = _load_model(config, model)
    manifest = manifest if manifest is not None else load_dataset(config)
    _, _, test_set = partitions(config, manifest)
    probabilities = predict_items(model, test_set.items)
    report, _ = evaluate_predictions(probabilities, test_set, config.evaluation.top_k,
                                     config.evaluation.vote_mode)
    write_report(report, config.paths.output_dir, 'metrics',
                 extra={'model': model.kind, 'config': config.to_dict()},
                 confusion_csv=config.evaluation.confusion_csv)
    logger.info(f"Evaluation: {report!r}")
    return report


@dataclass
class Prediction:
    source: str
    verdict: str
    ranking: List[Tuple[str, float]]
    n_clips: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'source': self.source,
            'verdict': self.verdict,
            'ranking': [{'class': c, 'probability': p} for c, p in self.ranking],
            'n_clips': self.n_clips,
        }


def predict(config: PipelineConfig, audio_path: Path, model: Optional[Model] = None) -> Prediction:
    """Split one recording with the test plan, classify every clip and vote"""
    model = _load_model(config, model)
    audio_path = Path(audio_path)
    params = config.spectrogram
    buffer = load_canonical(audio_path, config.archive.convert_non_wav, params.sample_rate)
    if config.features.noise_reduce and buffer.frames >= params.n_fft:
        buffer = noise_reduce(buffer, params, config.features.gate_median_cap)
    entry = RecordingEntry(id=audio_path.stem, species_label='unknown', file_path=str(audio_path))
    clips = plan_recording(buffer, entry, config.augment.test_plan, config.seed_for('augment'), params)
    numeric = model.kind in NUMERIC_KINDS
    vectors, images = featurize(clips, config)
    items = [v for v in vectors if v is not None] if numeric else images
    if not items:
        raise TooShort(f"{audio_path.name} is too short to cut a single clip")

    probabilities = predict_items(model, items)
    vote = vote_audio(probabilities, [entry.id] * len(items), config.evaluation.vote_mode)[entry.id]
    mean = probabilities.mean(axis=0)
    order = np.argsort(-mean, kind='stable')
    ranking = [(model.class_table[i], float(mean[i])) for i in order]
    logger.info(f"Predicted {model.class_table[vote]} for {audio_path.name} from {len(items)} clips")
    return Prediction(audio_path.name, model.class_table[vote], ranking, len(items))


def ablate(config: PipelineConfig, manifest: Optional[DatasetManifest] = None,
           plans: Optional[Sequence[AugmentPlan]] = None, loader: Optional[Loader] = None) -> List[AblationRow]:
    """Train one model per augmentation plan on the same recording split"""
    config.model.validate_kind()
    manifest = manifest if manifest is not None else load_dataset(config)
    loader = loader or make_loader(config, manifest)
    plans = list(plans or config.augment.plans)
    params = config.spectrogram
    seed = config.seed_for('augment')
    table = manifest.class_table
    kind = config.model.kind

    train_m, val_m, test_m = split_dataset(manifest, config.split)
    val_set = labeled_items(apply_plan(val_m, config.augment.test_plan, seed, params, 1, loader).clips,
                            config, table, kind)
    test_set = labeled_items(apply_plan(test_m, config.augment.test_plan, seed, params, 1, loader).clips,
                             config, table, kind)

    def trial(plan: AugmentPlan) -> Tuple[int, MetricsReport]:
        result: AugmentResult = apply_plan(train_m, plan, seed, params, 1, loader)
        train_set = labeled_items(result.clips, config, table, kind)
        train_set = rebalance(train_set, config.rebalance, config.seed_for('rebalance'), image_renoiser(config))
        model, _ = fit_model(train_set, config.model, config.seed_for('model'), val_set)
        report, _ = evaluate_predictions(predict_items(model, test_set.items), test_set,
                                         config.evaluation.top_k, config.evaluation.vote_mode)
        return len(result.clips), report

    rows = run_ablation(plans, trial, config.jobs)
    write_ablation(rows, config.paths.output_dir)
    return rows


def cross_validate(config: PipelineConfig, manifest: Optional[DatasetManifest] = None) -> MetricsReport:
    """k-fold CV over the augmented cache; grouped by recording unless in paper mode"""
    manifest = manifest if manifest is not None else load_dataset(config)
    labeled = load_cache_set(config, 'train', manifest.class_table)
    grouped = not config.paper_mode
    report = cross_validate_set(labeled, config.model, config.evaluation.folds, config.seed_for('kfold'),
                                grouped, config.evaluation.top_k, config.evaluation.vote_mode,
                                config.rebalance, config.jobs, image_renoiser(config))
    name = 'cv_grouped' if grouped else 'cv_paper_mode'
    write_report(report, config.paths.output_dir, name,
                 extra={'folds': config.evaluation.folds, 'grouped': grouped, 'config': config.to_dict()},
                 confusion_csv=config.evaluation.confusion_csv)
    return report
