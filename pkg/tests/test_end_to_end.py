"""
End-to-end runs over a small synthetic corpus: preprocess, train, evaluate,
predict and cross-validate through the services layer.
"""

import json

import pytest

from src import services
from src.classifiers import read_model
from src.config import PathsConfig, PipelineConfig
from src.models import AugmentPlan
from src.synthetic import make_corpus

pytestmark = pytest.mark.slow


@pytest.fixture
def preprocessed(pipeline_config):
    summary = services.preprocess(pipeline_config)
    assert not summary.failures
    return pipeline_config


class TestPipeline:
    """The full chain with the k-NN model"""

    def test_preprocess_writes_both_cache_sets(self, preprocessed, synthetic_corpus):
        paths = preprocessed.paths
        for name in ('train', 'test'):
            assert paths.features_csv(name).exists()
            assert paths.images_csv(name).exists()
        summary = json.loads((paths.cache_dir / 'preprocess.json').read_text())
        # Three non-overlapping 2 s windows per 6 s recording
        assert summary['clip_counts'] == {label: 12 for label in synthetic_corpus.class_table}

    def test_train_evaluate_predict(self, preprocessed, synthetic_corpus):
        trained = services.train(preprocessed)
        model = read_model(trained.model_path)
        assert model.class_table == synthetic_corpus.class_table

        report = services.evaluate(preprocessed)
        assert 0.0 <= report.accuracy <= 1.0
        assert report.n_recordings > 0
        assert report.top_k_accuracy[3] == 1.0
        metrics = json.loads((preprocessed.paths.output_dir / 'metrics.json').read_text())
        assert metrics['model'] == 'knn'
        assert (preprocessed.paths.output_dir / 'metrics_confusion.csv').exists()

        recording = synthetic_corpus.resolve(synthetic_corpus.entries[0])
        prediction = services.predict(preprocessed, recording)
        assert prediction.verdict in synthetic_corpus.class_table
        assert prediction.n_clips > 0
        assert sum(p for _, p in prediction.ranking) == pytest.approx(1.0)

    def test_forest_model(self, preprocessed):
        preprocessed.model.kind = 'forest'
        services.train(preprocessed)
        report = services.evaluate(preprocessed)
        assert read_model(preprocessed.paths.model_path).kind == 'forest'
        assert report.total > 0

    def test_cross_validation_reports(self, preprocessed):
        preprocessed.evaluation.folds = 3
        report = services.cross_validate(preprocessed)
        assert report.total == 36
        assert (preprocessed.paths.output_dir / 'cv_grouped.json').exists()

        preprocessed.paper_mode = True
        services.cross_validate(preprocessed)
        assert (preprocessed.paths.output_dir / 'cv_paper_mode.json').exists()


class TestDeterminism:
    """Same seed, same bytes"""

    def test_training_twice_gives_the_same_artifact(self, preprocessed):
        path = preprocessed.paths.model_path
        services.train(preprocessed)
        first = path.read_bytes()
        services.train(preprocessed)
        assert path.read_bytes() == first

    def test_worker_count_does_not_change_the_cache(self, pipeline_config):
        services.preprocess(pipeline_config)
        single = pipeline_config.paths.features_csv('train').read_text()
        pipeline_config.jobs = 4
        services.preprocess(pipeline_config)
        assert pipeline_config.paths.features_csv('train').read_text() == single

    def test_predictions_repeat(self, preprocessed, synthetic_corpus):
        services.train(preprocessed)
        recording = synthetic_corpus.resolve(synthetic_corpus.entries[5])
        first = services.predict(preprocessed, recording)
        second = services.predict(preprocessed, recording)
        assert first.ranking == second.ranking


class TestCacheLayout:
    """One audio file per clip under the recording's directory"""

    def test_origin_plus_stride_keeps_every_clip(self, tmp_path):
        manifest = make_corpus(tmp_path / 'data', n_per_species=1, duration_s=100.0, seed=1,
                               species=['Steady Warbler'])
        config = PipelineConfig(paths=PathsConfig(data_dir=tmp_path / 'data', cache_dir=tmp_path / 'cache',
                                                  output_dir=tmp_path / 'output'))
        plan = AugmentPlan(window_s=5.0, stride_s=2.0, include_origin=True, head_limit_s=100.0)
        config.augment.plans = [plan]
        config.augment.test_plan = plan
        config.features.noise_reduce = False

        summary = services.preprocess(config)

        assert summary.n_clips == 68
        recording = manifest.entries[0].id
        cached = sorted(p.name for p in config.paths.recording_dir(recording).glob('*.wav'))
        assert len(cached) == 68
        assert '0_w5000.wav' in cached
        assert '0_w5000+s2000.wav' in cached
        assert len(list(config.paths.images_dir('train').glob('*.pgm'))) == summary.n_images
