"""
Classifiers: k-NN and random forest on feature vectors, the handcrafted CNN
on clip images, and the model file format shared by all three.
"""

import logging
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import ModelConfig
from ..models import LabeledSet
from .artifact import (
    ModelArtifact, save_model, load_model, restore_model, write_model, read_model, MAGIC, VERSION,
)
from .cnn import (
    CnnModel, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Adam, TrainingHistory,
    build_cnn, cnn_forward, cnn_train_step, cnn_train,
)
from .forest import DecisionTree, ForestModel, forest_fit, forest_predict, gini
from .knn import KnnModel, knn_fit, knn_predict

logger = logging.getLogger(__name__)

Model = Union[KnnModel, ForestModel, CnnModel]


def fit_model(train: LabeledSet, config: ModelConfig, seed: int, val: Optional[LabeledSet] = None,
              jobs: int = 1) -> Tuple[Model, Optional[TrainingHistory]]:
    """Fit the configured model kind; only the CNN returns a training history"""
    config.validate_kind()
    if config.kind == 'knn':
        return knn_fit(train, min(config.k, len(train)) if len(train) else config.k), None
    if config.kind == 'forest':
        return forest_fit(train, config.n_trees, config.max_features, seed, jobs), None
    model = build_cnn(train.class_table, filters=config.filters, dense=config.dense,
                      final_activation=config.final_activation, seed=seed)
    return cnn_train(model, train, val, config.epochs, config.patience, seed, config.batch_size,
                     config.learning_rate)


def predict_items(model: Model, items: Sequence[Any]) -> np.ndarray:
    """Class-probability rows for FeatureVectors (knn, forest) or ClipImages (cnn)"""
    if not len(items):
        return np.zeros((0, len(model.class_table)))
    if isinstance(model, CnnModel):
        return model.predict_proba(items)
    return model.predict_proba(np.stack([np.asarray(item, dtype=np.float64) for item in items]))


__all__ = [
    'ModelArtifact', 'save_model', 'load_model', 'restore_model', 'write_model', 'read_model', 'MAGIC', 'VERSION',
    'CnnModel', 'Conv2D', 'Dense', 'Flatten', 'MaxPool2D', 'ReLU', 'Adam', 'TrainingHistory',
    'build_cnn', 'cnn_forward', 'cnn_train_step', 'cnn_train',
    'DecisionTree', 'ForestModel', 'forest_fit', 'forest_predict', 'gini',
    'KnnModel', 'knn_fit', 'knn_predict',
    'fit_model', 'predict_items', 'Model',
]
