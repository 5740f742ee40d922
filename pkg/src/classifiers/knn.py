import logging
from dataclasses import dataclass
from typing import Dict, Any, List

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import EmptyTrainingSet, ShapeMismatch
from ..models import LabeledSet

logger = logging.getLogger(__name__)

CONSTANT_STD = 1e-12


@dataclass(eq=False)
class KnnModel:
    """k-nearest-neighbour classifier over z-scored features.

    Columns that were constant in training are flagged and left out of the
    distance.
    """
    k: int
    points: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray
    class_table: List[str]

    kind = 'knn'

    def __repr__(self) -> str:
        return f"KnnModel(k={self.k}, points={len(self.points)}, classes={len(self.class_table)})"

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ShapeMismatch(f"Expected {self.n_features} features, got {x.shape[1]}")
        z = (x - self.mean) / np.where(self.constant, 1.0, self.std)
        z[:, self.constant] = 0.0
        return z

    def neighbours(self, x: np.ndarray) -> np.ndarray:
        """Indices of the k nearest training points per query; ties go to the lower index"""
        distances = cdist(self.normalize(x), self.points)
        return np.argsort(distances, axis=1, kind='stable')[:, :self.k]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        nearest = self.labels[self.neighbours(x)]
        n_classes = len(self.class_table)
        counts = np.stack([np.bincount(row, minlength=n_classes) for row in nearest])
        return counts / self.k

    def hyper_params(self) -> Dict[str, Any]:
        return {'k': self.k}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            'points': self.points,
            'labels': self.labels,
            'mean': self.mean,
            'std': self.std,
            'constant': self.constant.astype(np.uint8),
        }

    @classmethod
    def from_arrays(cls, hyper_params: Dict[str, Any], arrays: Dict[str, np.ndarray],
                    class_table: List[str]) -> 'KnnModel':
        return cls(
            k=int(hyper_params['k']),
            points=arrays['points'],
            labels=arrays['labels'],
            mean=arrays['mean'],
            std=arrays['std'],
            constant=arrays['constant'].astype(bool),
            class_table=list(class_table),
        )


def knn_fit(train: LabeledSet, k: int = 5) -> KnnModel:
    """Store z-score statistics and the normalised training points"""
    if not len(train):
        raise EmptyTrainingSet("k-NN needs at least one training item")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in [1, {len(train)}], got {k}")
    matrix = train.matrix()
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    constant = std <= CONSTANT_STD
    if constant.any():
        logger.warning(f"Excluding constant feature columns from k-NN distance: {np.flatnonzero(constant).tolist()}")
    model = KnnModel(k, np.zeros((0, 0)), train.label_indices, mean, std, constant, list(train.class_table))
    model.points = model.normalize(matrix)
    logger.info(f"Fitted k-NN with k={k} on {len(train)} points")
    return model


def knn_predict(model: KnnModel, x) -> np.ndarray:
    """Class probabilities for one vector (1-D result) or a batch (2-D result)"""
    values = np.asarray(x, dtype=np.float64)
    probabilities = model.predict_proba(values)
    return probabilities[0] if values.ndim == 1 else probabilities
