"""
Handcrafted CNN in numpy.

conv(3x3) -> ReLU -> maxpool(2x2) -> conv(3x3) -> ReLU -> maxpool(2x2)
-> flatten -> dense -> ReLU -> dense(n_classes) with a softmax or sigmoid
output, trained with Adam. Tensors are NHWC.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit, logsumexp

from ..errors import EmptyTrainingSet, NonFiniteLoss, ShapeMismatch
from ..models import ClipImage, IMAGE_SIZE, LabeledSet

logger = logging.getLogger(__name__)

INPUT_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 1)
EVAL_BATCH = 64


class Layer:
    """Forward caches what backward needs; backward fills `grads` and returns the input gradient"""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    """Valid convolution, stride 1; kernel stored as (k, k, in_channels, filters)"""

    def __init__(self, in_channels: int, filters: int, kernel_size: int = 3,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = kernel_size * kernel_size * in_channels
        limit = np.sqrt(6.0 / fan_in)
        self.kernel_size = kernel_size
        self.params['W'] = rng.uniform(-limit, limit, (kernel_size, kernel_size, in_channels, filters))
        self.params['b'] = np.zeros(filters)

    def forward(self, x: np.ndarray) -> np.ndarray:
        k = self.kernel_size
        n, h, w, c = x.shape
        W = self.params['W']
        if c != W.shape[2]:
            raise ShapeMismatch(f"Conv2D expects {W.shape[2]} channels, got {c}")
        ho, wo = h - k + 1, w - k + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"Input {h}x{w} is smaller than the {k}x{k} kernel")
        windows = sliding_window_view(x, (k, k), axis=(1, 2))
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
        self._cols = cols
        self._shape = x.shape
        out = cols @ W.reshape(k * k * c, -1) + self.params['b']
        return out.reshape(n, ho, wo, -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        k = self.kernel_size
        n, h, w, c = self._shape
        W = self.params['W']
        filters = W.shape[3]
        ho, wo = grad.shape[1], grad.shape[2]
        flat = grad.reshape(-1, filters)
        self.grads['W'] = (self._cols.T @ flat).reshape(W.shape)
        self.grads['b'] = flat.sum(axis=0)
        dcols = (flat @ W.reshape(-1, filters).T).reshape(n, ho, wo, k, k, c)
        dx = np.zeros(self._shape)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return dx


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._mask


class MaxPool2D(Layer):
    """2x2 pooling, stride 2, trailing odd row/column dropped; ties route the gradient to the first max"""

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"Input {h}x{w} is too small for 2x2 pooling")
        crop = x[:, :ho * 2, :wo * 2, :]
        windows = crop.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
        self._argmax = windows.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        n, h, w, c = self._shape
        ho, wo = grad.shape[1], grad.shape[2]
        routed = np.zeros((n, ho, wo, c, 4))
        np.put_along_axis(routed, self._argmax[..., None], grad[..., None], axis=-1)
        crop = routed.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * 2, wo * 2, c)
        dx = np.zeros(self._shape)
        dx[:, :ho * 2, :wo * 2, :] = crop
        return dx


class Flatten(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._shape)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, init: str = 'he',
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if init == 'he':
            limit = np.sqrt(6.0 / in_features)
        else:
            limit = np.sqrt(6.0 / (in_features + out_features))
        self.params['W'] = rng.uniform(-limit, limit, (in_features, out_features))
        self.params['b'] = np.zeros(out_features)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.params['W'].shape[0]:
            raise ShapeMismatch(f"Dense expects {self.params['W'].shape[0]} inputs, got {x.shape[1]}")
        self._input = x
        return x @ self.params['W'] + self.params['b']

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.grads['W'] = self._input.T @ grad
        self.grads['b'] = grad.sum(axis=0)
        return grad @ self.params['W'].T


class Adam:
    """Bias-corrected Adam keeping one moment pair per named parameter"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        self.t += 1
        for name, param in params.items():
            grad = grads[name]
            m = self.m.get(name, np.zeros_like(param))
            v = self.v.get(name, np.zeros_like(param))
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad ** 2
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            param -= lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


class CnnModel:
    kind = 'cnn'

    def __init__(self, class_table: Sequence[str], input_shape: Tuple[int, int, int] = INPUT_SHAPE,
                 filters: Tuple[int, int] = (32, 64), dense: int = 128, final_activation: str = 'softmax',
                 seed: int = 0, kernel_size: int = 3):
        if final_activation not in ('softmax', 'sigmoid'):
            raise ValueError(f"final_activation must be softmax or sigmoid, got {final_activation!r}")
        self.class_table = list(class_table)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.filters = tuple(int(f) for f in filters)
        self.dense = int(dense)
        self.final_activation = final_activation
        self.seed = int(seed)
        self.kernel_size = int(kernel_size)
        self.adam = Adam()

        rng = np.random.default_rng(seed)
        h, w, c = self.input_shape
        for _ in range(2):
            h, w = (h - kernel_size + 1) // 2, (w - kernel_size + 1) // 2
        if h < 1 or w < 1:
            raise ShapeMismatch(f"Input shape {self.input_shape} collapses to nothing in the layer stack")
        self.layers: List[Tuple[str, Layer]] = [
            ('conv1', Conv2D(c, self.filters[0], kernel_size, rng)),
            ('relu1', ReLU()),
            ('pool1', MaxPool2D()),
            ('conv2', Conv2D(self.filters[0], self.filters[1], kernel_size, rng)),
            ('relu2', ReLU()),
            ('pool2', MaxPool2D()),
            ('flatten', Flatten()),
            ('dense1', Dense(h * w * self.filters[1], self.dense, 'he', rng)),
            ('relu3', ReLU()),
            ('output', Dense(self.dense, len(self.class_table), 'glorot', rng)),
        ]

    def __repr__(self) -> str:
        return (f"CnnModel(input={self.input_shape}, filters={self.filters}, dense={self.dense}, "
                f"classes={len(self.class_table)}, output={self.final_activation})")

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name, e.g. 'conv1.W'"""
        return {f"{name}.{key}": value for name, layer in self.layers for key, value in layer.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {f"{name}.{key}": value for name, layer in self.layers for key, value in layer.grads.items()}

    def as_batch(self, images: Any) -> np.ndarray:
        """Stack ClipImages or arrays into an NHWC float batch"""
        if isinstance(images, np.ndarray):
            batch = images.astype(np.float64)
        else:
            batch = np.stack([img.pixels if isinstance(img, ClipImage) else np.asarray(img, dtype=np.float64)
                              for img in images])
        if batch.ndim == 3:
            batch = batch[..., None]
        if batch.ndim != 4 or batch.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"Expected images of shape {self.input_shape}, got {batch.shape[1:]}")
        return batch

    def logits(self, x: np.ndarray) -> np.ndarray:
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def probabilities_from_logits(self, logits: np.ndarray) -> np.ndarray:
        if self.final_activation == 'softmax':
            return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        p = expit(logits)
        return p / p.sum(axis=1, keepdims=True)

    def loss_from_logits(self, logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
        """Mean loss over the batch and its gradient with respect to the logits"""
        n = len(labels)
        onehot = np.zeros_like(logits)
        onehot[np.arange(n), labels] = 1.0
        if self.final_activation == 'softmax':
            log_p = logits - logsumexp(logits, axis=1, keepdims=True)
            loss = -float(np.mean(log_p[np.arange(n), labels]))
            grad = (np.exp(log_p) - onehot) / n
        else:
            per_class = onehot * log_expit(logits) + (1 - onehot) * log_expit(-logits)
            loss = -float(np.mean(per_class.sum(axis=1)))
            grad = (expit(logits) - onehot) / n
        return loss, grad

    def loss_and_gradients(self, images: Any, labels: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
        batch = self.as_batch(images)
        labels = np.asarray(labels, dtype=np.int64)
        loss, grad = self.loss_from_logits(self.logits(batch), labels)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"Loss became {loss}")
        self.backward(grad)
        return loss, self.gradients()

    def evaluate(self, images: Any, labels: Sequence[int]) -> Tuple[float, float]:
        """(mean loss, accuracy) in evaluation-sized batches"""
        batch = self.as_batch(images)
        labels = np.asarray(labels, dtype=np.int64)
        total, correct = 0.0, 0
        for start in range(0, len(batch), EVAL_BATCH):
            logits = self.logits(batch[start:start + EVAL_BATCH])
            part = labels[start:start + EVAL_BATCH]
            loss, _ = self.loss_from_logits(logits, part)
            total += loss * len(part)
            correct += int(np.sum(np.argmax(logits, axis=1) == part))
        return total / len(batch), correct / len(batch)

    def predict_proba(self, images: Any) -> np.ndarray:
        batch = self.as_batch(images)
        out = [self.probabilities_from_logits(self.logits(batch[start:start + EVAL_BATCH]))
               for start in range(0, len(batch), EVAL_BATCH)]
        if not out:
            return np.zeros((0, len(self.class_table)))
        return np.concatenate(out)

    def get_weights(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.parameters().items()}

    def set_weights(self, weights: Dict[str, np.ndarray]):
        for name, value in self.parameters().items():
            value[...] = weights[name]

    def hyper_params(self) -> Dict[str, Any]:
        return {
            'input_shape': list(self.input_shape),
            'filters': list(self.filters),
            'dense': self.dense,
            'final_activation': self.final_activation,
            'kernel_size': self.kernel_size,
            'seed': self.seed,
            'adam_step': self.adam.t,
        }

    def arrays(self) -> Dict[str, np.ndarray]:
        arrays = dict(self.parameters())
        for name in self.parameters():
            if name in self.adam.m:
                arrays[f"adam.m.{name}"] = self.adam.m[name]
                arrays[f"adam.v.{name}"] = self.adam.v[name]
        return arrays

    @classmethod
    def from_arrays(cls, hyper_params: Dict[str, Any], arrays: Dict[str, np.ndarray],
                    class_table: List[str]) -> 'CnnModel':
        model = cls(class_table, tuple(hyper_params['input_shape']), tuple(hyper_params['filters']),
                    hyper_params['dense'], hyper_params['final_activation'], hyper_params['seed'],
                    hyper_params['kernel_size'])
        model.set_weights(arrays)
        model.adam.t = int(hyper_params['adam_step'])
        for name in model.parameters():
            if f"adam.m.{name}" in arrays:
                model.adam.m[name] = arrays[f"adam.m.{name}"].copy()
                model.adam.v[name] = arrays[f"adam.v.{name}"].copy()
        return model


def build_cnn(class_table: Sequence[str], input_shape: Tuple[int, int, int] = INPUT_SHAPE,
              filters: Tuple[int, int] = (32, 64), dense: int = 128, final_activation: str = 'softmax',
              seed: int = 0) -> CnnModel:
    """He-uniform init for ReLU layers, Glorot-uniform for the output, zero biases"""
    return CnnModel(class_table, input_shape, filters, dense, final_activation, seed)


def cnn_forward(model: CnnModel, images: Any) -> np.ndarray:
    return model.predict_proba(images)


def cnn_train_step(model: CnnModel, batch: Any, labels: Sequence[int], lr: float) -> float:
    """One Adam step; returns the loss before the update"""
    if len(labels) == 0:
        raise EmptyTrainingSet("Training batch is empty")
    loss, grads = model.loss_and_gradients(batch, labels)
    model.adam.step(model.parameters(), grads, lr)
    return loss


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'val_accuracy': self.val_accuracy,
            'train_accuracy': self.train_accuracy,
            'best_epoch': self.best_epoch,
            'stopped_epoch': self.stopped_epoch,
        }


def _images_and_labels(model: CnnModel, data: LabeledSet) -> Tuple[np.ndarray, np.ndarray]:
    index = {label: i for i, label in enumerate(model.class_table)}
    return model.as_batch(data.items), np.array([index[label] for label in data.labels], dtype=np.int64)


def cnn_train(model: CnnModel, train: LabeledSet, val: Optional[LabeledSet] = None, epochs: int = 20,
              patience: int = 3, seed: int = 0, batch_size: int = 32,
              lr: float = 1e-3) -> Tuple[CnnModel, TrainingHistory]:
    """Mini-batch training with early stopping on validation loss.

    Training stops once the validation loss has not improved for `patience`
    epochs (patience 0 stops at the first non-improvement) and the weights
    of the best epoch are restored. Without a validation set the training
    loss is monitored instead.
    """
    if not len(train):
        raise EmptyTrainingSet("CNN training set is empty")
    x, y = _images_and_labels(model, train)
    has_val = val is not None and len(val) > 0
    if has_val:
        val_x, val_y = _images_and_labels(model, val)
    rng = np.random.default_rng(seed)
    history = TrainingHistory()
    best_loss = np.inf
    best_weights = model.get_weights()
    wait = 0

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            total += cnn_train_step(model, x[idx], y[idx], lr) * len(idx)
        history.train_loss.append(total / len(x))
        if has_val:
            monitored, accuracy = model.evaluate(val_x, val_y)
            history.val_loss.append(monitored)
            history.val_accuracy.append(accuracy)
        else:
            monitored, accuracy = model.evaluate(x, y)
        history.train_accuracy.append(accuracy if not has_val else model.evaluate(x, y)[1])
        history.stopped_epoch = epoch
        logger.info(f"Epoch {epoch}/{epochs}: train_loss={history.train_loss[-1]:.4f} monitored_loss={monitored:.4f}")

        if monitored < best_loss:
            best_loss = monitored
            best_weights = model.get_weights()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= max(patience, 1):
                logger.info(f"Early stopping at epoch {epoch}; best epoch was {history.best_epoch}")
                break

    model.set_weights(best_weights)
    return model, history
