"""
CNN tests: layer gradients against finite differences, Adam steps and the
training loop with early stopping.
"""

import numpy as np
import pytest

from src.classifiers import (
    CnnModel, Conv2D, Dense, MaxPool2D, build_cnn, cnn_forward, cnn_train, cnn_train_step, fit_model,
)
from src.config import ModelConfig
from src.errors import EmptyTrainingSet, NonFiniteLoss, ShapeMismatch
from src.models import LabeledSet
from src.synthetic import synthetic_images

pytestmark = pytest.mark.unit

EPS = 1e-6
MINI_SHAPE = (10, 10, 1)


def mini_model(final_activation: str = 'softmax', seed: int = 0) -> CnnModel:
    """10x10 input collapses to 1x1 after the second pooling"""
    return build_cnn(['a', 'b', 'c'], MINI_SHAPE, filters=(2, 3), dense=4, final_activation=final_activation,
                     seed=seed)


def mini_batch(n: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, (n, *MINI_SHAPE)), rng.integers(0, 3, n)


def sample_indices(shape, count: int, seed: int):
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    return [np.unravel_index(int(i), shape) for i in rng.choice(size, size=min(count, size), replace=False)]


def numeric_derivative(f, array: np.ndarray, index) -> float:
    original = array[index]
    array[index] = original + EPS
    up = f()
    array[index] = original - EPS
    down = f()
    array[index] = original
    return (up - down) / (2 * EPS)


class TestLayerGradients:
    """Each layer's backward against central differences of sum(output * R)"""

    def check(self, layer, x: np.ndarray, params=()):
        upstream = np.random.default_rng(9).normal(size=layer.forward(x).shape)
        dx = layer.backward(upstream)
        grads = {name: layer.grads[name].copy() for name in params}

        def objective():
            return float(np.sum(layer.forward(x) * upstream))

        for index in sample_indices(x.shape, 12, 1):
            assert dx[index] == pytest.approx(numeric_derivative(objective, x, index), rel=1e-5, abs=1e-7)
        for name in params:
            for index in sample_indices(layer.params[name].shape, 12, 2):
                numeric = numeric_derivative(objective, layer.params[name], index)
                assert grads[name][index] == pytest.approx(numeric, rel=1e-5, abs=1e-7)

    def test_conv2d(self):
        x = np.random.default_rng(0).normal(size=(2, 6, 5, 2))
        self.check(Conv2D(2, 3, 3, np.random.default_rng(1)), x, ('W', 'b'))

    def test_maxpool_with_odd_edges(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 7, 2))
        layer = MaxPool2D()
        self.check(layer, x)
        dx = layer.backward(np.ones((2, 2, 3, 2)))
        assert np.all(dx[:, 4, :, :] == 0)
        assert np.all(dx[:, :, 6, :] == 0)

    def test_dense(self):
        x = np.random.default_rng(0).normal(size=(3, 5))
        self.check(Dense(5, 4, 'he', np.random.default_rng(1)), x, ('W', 'b'))


class TestForwardPass:
    """Layer outputs and probabilities"""

    def test_one_by_one_kernel_by_hand(self):
        layer = Conv2D(1, 1, kernel_size=1)
        layer.params['W'][...] = 2.0
        layer.params['b'][...] = 0.5
        x = np.arange(4.0).reshape(1, 2, 2, 1)
        np.testing.assert_allclose(layer.forward(x), 2.0 * x + 0.5)

    def test_three_by_three_kernel_by_hand(self):
        layer = Conv2D(1, 1, kernel_size=3)
        layer.params['W'][...] = 1.0
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        expected = [[45.0, 54.0], [81.0, 90.0]]
        np.testing.assert_allclose(layer.forward(x)[0, :, :, 0], expected)

    def test_maxpool_by_hand(self):
        x = np.array([[1.0, 5.0], [3.0, 2.0]]).reshape(1, 2, 2, 1)
        assert MaxPool2D().forward(x).item() == 5.0

    @pytest.mark.parametrize('final_activation', ['softmax', 'sigmoid'])
    def test_rows_sum_to_one(self, final_activation):
        x, _ = mini_batch(5)
        probabilities = cnn_forward(mini_model(final_activation), x)
        assert probabilities.shape == (5, 3)
        np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)
        assert np.all(probabilities >= 0)

    @pytest.mark.parametrize('final_activation', ['softmax', 'sigmoid'])
    def test_zero_output_layer_gives_uniform_probabilities(self, final_activation):
        model = mini_model(final_activation)
        model.parameters()['output.W'][...] = 0.0
        x, _ = mini_batch(3)
        np.testing.assert_allclose(cnn_forward(model, x), 1.0 / 3.0)

    def test_default_input_is_64_by_64(self, image_set):
        model = build_cnn(image_set.class_table, filters=(2, 2), dense=4)
        assert model.input_shape == (64, 64, 1)
        assert model.predict_proba(image_set.items[:2]).shape == (2, len(image_set.class_table))

    def test_wrong_image_shape(self):
        with pytest.raises(ShapeMismatch):
            mini_model().predict_proba(np.zeros((1, 12, 12, 1)))

    def test_input_too_small_for_the_stack(self):
        with pytest.raises(ShapeMismatch):
            build_cnn(['a'], (4, 4, 1))

    def test_unknown_final_activation(self):
        with pytest.raises(ValueError):
            build_cnn(['a'], MINI_SHAPE, final_activation='tanh')

    def test_same_seed_same_initial_weights(self):
        a, b = mini_model(seed=4).parameters(), mini_model(seed=4).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])


class TestModelGradients:
    """Whole-network gradients"""

    @pytest.mark.parametrize('final_activation', ['softmax', 'sigmoid'])
    def test_backprop_matches_finite_differences(self, final_activation):
        model = mini_model(final_activation, seed=1)
        x, y = mini_batch(3, seed=2)
        _, grads = model.loss_and_gradients(x, y)
        grads = {name: value.copy() for name, value in grads.items()}

        def loss():
            return model.loss_from_logits(model.logits(x), y)[0]

        for name, param in model.parameters().items():
            for index in sample_indices(param.shape, 6, 3):
                numeric = numeric_derivative(loss, param, index)
                assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), name

    def test_non_finite_loss(self):
        model = mini_model()
        model.parameters()['output.b'][...] = np.nan
        x, y = mini_batch(2)
        with pytest.raises(NonFiniteLoss):
            model.loss_and_gradients(x, y)


class TestTrainStep:
    """Single Adam updates"""

    def test_zero_learning_rate_leaves_weights_unchanged(self):
        model = mini_model()
        before = model.get_weights()
        x, y = mini_batch(4)
        cnn_train_step(model, x, y, 0.0)
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(value, before[name])
        assert model.adam.t == 1

    def test_repeated_steps_reduce_the_loss(self):
        model = mini_model(seed=3)
        x, y = mini_batch(6, seed=4)
        first = cnn_train_step(model, x, y, 0.01)
        for _ in range(40):
            last = cnn_train_step(model, x, y, 0.01)
        assert last < first

    def test_empty_batch(self):
        with pytest.raises(EmptyTrainingSet):
            cnn_train_step(mini_model(), np.zeros((0, *MINI_SHAPE)), [], 0.01)

    def test_arrays_restore_weights_and_optimizer_state(self):
        model = mini_model()
        x, y = mini_batch(4)
        cnn_train_step(model, x, y, 0.01)
        restored = CnnModel.from_arrays(model.hyper_params(), model.arrays(), model.class_table)
        np.testing.assert_array_equal(restored.predict_proba(x), model.predict_proba(x))
        assert restored.adam.t == 1
        cnn_train_step(model, x, y, 0.01)
        cnn_train_step(restored, x, y, 0.01)
        for name, value in model.parameters().items():
            np.testing.assert_allclose(restored.parameters()[name], value, rtol=1e-12, atol=1e-15)


class TestTraining:
    """Epoch loop and early stopping"""

    def labeled(self, n: int = 6, seed: int = 0) -> LabeledSet:
        x, y = mini_batch(n, seed)
        return LabeledSet(list(x[..., 0]), [['a', 'b', 'c'][i] for i in y], class_table=['a', 'b', 'c'])

    @pytest.mark.parametrize('patience,stopped', [(0, 2), (1, 2), (3, 4)])
    def test_flat_validation_loss_stops_after_patience(self, patience, stopped):
        # lr 0 keeps every epoch's loss equal to the first, which is never a strict improvement
        model, history = cnn_train(mini_model(), self.labeled(), self.labeled(seed=1), epochs=10,
                                   patience=patience, lr=0.0)
        assert history.stopped_epoch == stopped
        assert history.best_epoch == 1
        assert len(history.val_loss) == stopped

    def test_best_weights_are_restored(self):
        train, val = self.labeled(), self.labeled(seed=1)
        model, history = cnn_train(mini_model(), train, val, epochs=5, patience=5, lr=0.05, batch_size=2)
        images = np.stack(val.items)[..., None]
        labels = val.label_indices
        assert model.evaluate(images, labels)[0] == pytest.approx(min(history.val_loss))

    def test_without_validation_the_training_loss_is_monitored(self):
        model, history = cnn_train(mini_model(), self.labeled(), None, epochs=3, patience=3, lr=0.01)
        assert history.val_loss == []
        assert len(history.train_loss) == 3

    def test_empty_training_set(self):
        with pytest.raises(EmptyTrainingSet):
            cnn_train(mini_model(), LabeledSet(class_table=['a']), None)

    def test_fit_model_returns_history(self, image_set):
        config = ModelConfig(kind='cnn', filters=(2, 2), dense=4, epochs=1, batch_size=8)
        model, history = fit_model(image_set, config, seed=0, val=image_set)
        assert isinstance(model, CnnModel)
        assert history.stopped_epoch == 1

    @pytest.mark.slow
    def test_overfits_a_small_distinct_set(self):
        rng = np.random.default_rng(0)
        shapes = []
        for pattern in range(3):
            base = np.zeros((16, 16))
            if pattern == 0:
                base[3:6, :] = 1.0
            elif pattern == 1:
                base[:, 10:13] = 1.0
            else:
                base[5:11, 5:11] = 1.0
            shapes.append(base)
        items, labels = [], []
        for i in range(12):
            items.append(np.clip(shapes[i % 3] + rng.normal(0.0, 0.05, (16, 16)), 0.0, 1.0))
            labels.append(['bar', 'column', 'square'][i % 3])
        train = LabeledSet(items, labels, class_table=['bar', 'column', 'square'])
        model = build_cnn(train.class_table, (16, 16, 1), filters=(4, 8), dense=16, seed=0)
        model, _ = cnn_train(model, train, train, epochs=80, patience=80, lr=0.01, batch_size=4)
        _, accuracy = model.evaluate(np.stack(items)[..., None], train.label_indices)
        assert accuracy == 1.0

    @pytest.mark.slow
    def test_full_stack_fits_fifty_synthetic_images(self):
        train = synthetic_images(n_per_class=10, n_classes=5, seed=0)
        model = build_cnn(train.class_table, filters=(32, 64), dense=128, seed=0)
        x = np.stack([item.pixels for item in train.items])[..., None]
        accuracy = 0.0
        for round_ in range(20):
            model, _ = cnn_train(model, train, None, epochs=10, patience=10, seed=round_)
            _, accuracy = model.evaluate(x, train.label_indices)
            if accuracy >= 0.95:
                break
        assert accuracy >= 0.95
