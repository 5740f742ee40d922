"""
Splitting, cross-validation, metrics and recording-level voting.

Splits are grouped by source recording unless paper mode turns grouping off,
so clips cut from one recording never end up on both sides of a split.
"""

import logging
import math
import warnings
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classifiers import fit_model, predict_items
from .config import ModelConfig, RebalanceConfig, derive_seed
from .errors import ClassTooSmall, EmptyGroup, LengthMismatch, TooFewItems
from .models import AugmentPlan, DatasetManifest, LabeledSet, MetricsReport, SplitSpec
from .rebalance import Renoise, rebalance

logger = logging.getLogger(__name__)

VOTE_MODES = ('majority', 'probability')


def _quotas(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of n units; ties go to the earlier partition"""
    exact = [n * r for r in ratios]
    counts = [int(math.floor(e + 1e-9)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for i in sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))[:max(0, n - sum(counts))]:
        counts[i] += 1
    return counts


def split_items(labels: Sequence[str], groups: Optional[Sequence[str]], spec: SplitSpec
                ) -> Tuple[List[int], List[int], List[int]]:
    """Stratified (train, val, test) index lists.

    With grouping on, whole groups are apportioned per class (a group's class
    is its most common label); otherwise every item is its own unit.
    """
    if groups is None or not spec.group_by_recording:
        groups = [str(i) for i in range(len(labels))]
    members: Dict[str, List[int]] = defaultdict(list)
    for i, group in enumerate(groups):
        members[group].append(i)
    by_class: Dict[str, List[str]] = defaultdict(list)
    for group, indices in members.items():
        label = Counter(labels[i] for i in indices).most_common(1)[0][0]
        by_class[label].append(group)

    needed = sum(1 for r in spec.ratios if r > 0)
    partitions: Tuple[List[int], List[int], List[int]] = ([], [], [])
    for label in sorted(by_class):
        units = sorted(by_class[label])
        if len(units) < needed:
            message = f"Class {label!r} has {len(units)} recording(s); not every partition gets one"
            logger.warning(message)
            warnings.warn(message, ClassTooSmall)
        rng = np.random.default_rng(derive_seed(spec.seed, 'split', label))
        units = [units[i] for i in rng.permutation(len(units))]
        start = 0
        for part, count in enumerate(_quotas(len(units), spec.ratios)):
            for unit in units[start:start + count]:
                partitions[part].extend(members[unit])
            start += count
    return tuple(sorted(p) for p in partitions)


def split_dataset(manifest: DatasetManifest, spec: SplitSpec
                  ) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Recording-level stratified split into train, val and test manifests"""
    labels = [entry.species_label for entry in manifest]
    ids = manifest.ids
    grouped = SplitSpec(spec.ratios, True, spec.seed)
    parts = split_items(labels, ids, grouped)
    train, val, test = (manifest.subset(ids[i] for i in part) for part in parts)
    logger.info(f"Split {len(manifest)} recordings into {len(train)}/{len(val)}/{len(test)}")
    return train, val, test


def kfold(labels: Sequence[str], k: int, seed: int, groups: Optional[Sequence[str]] = None
          ) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Stratified, optionally grouped, k-fold (train, test) index pairs.

    Units (groups, or single items) are dealt class by class in a seeded
    order, each to the fold with the fewest items, then the fewest of that
    class, then the lowest index. With single-item units fold sizes differ
    by at most one.
    """
    if groups is None:
        groups = [str(i) for i in range(len(labels))]
    if len(groups) != len(labels):
        raise LengthMismatch(f"{len(labels)} labels but {len(groups)} groups")
    members: Dict[str, List[int]] = defaultdict(list)
    for i, group in enumerate(groups):
        members[group].append(i)
    if k < 2:
        raise TooFewItems(f"k must be >= 2, got {k}")
    if k > len(members):
        raise TooFewItems(f"Cannot build {k} folds from {len(members)} unit(s)")

    by_class: Dict[str, List[str]] = defaultdict(list)
    for group, indices in members.items():
        by_class[Counter(labels[i] for i in indices).most_common(1)[0][0]].append(group)

    rng = np.random.default_rng(derive_seed(seed, 'kfold'))
    sizes = np.zeros(k, dtype=np.int64)
    folds: List[List[int]] = [[] for _ in range(k)]
    for label in sorted(by_class):
        units = sorted(by_class[label])
        units = [units[i] for i in rng.permutation(len(units))]
        units.sort(key=lambda u: -len(members[u]))
        per_class = np.zeros(k, dtype=np.int64)
        for unit in units:
            fold = min(range(k), key=lambda f: (sizes[f], per_class[f], f))
            folds[fold].extend(members[unit])
            sizes[fold] += len(members[unit])
            per_class[fold] += len(members[unit])

    everything = np.arange(len(labels))
    pairs = []
    for fold in folds:
        test = np.array(sorted(fold), dtype=np.int64)
        pairs.append((np.setdiff1d(everything, test), test))
    return pairs


def compute_metrics(probabilities: np.ndarray, labels: Sequence[Any], class_table: Sequence[str],
                    top_k: Sequence[int] = (3, 5)) -> MetricsReport:
    """Confusion matrix, per-class and macro precision/recall/F1, top-k accuracy.

    Labels may be class names or indices into class_table. Precision, recall
    and F1 are 0 where undefined and still count in the macro means.
    """
    probabilities = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if len(labels) == 0:
        probabilities = probabilities.reshape(0, len(class_table))
    if len(probabilities) != len(labels):
        raise LengthMismatch(f"{len(probabilities)} prediction rows but {len(labels)} labels")
    n_classes = len(class_table)
    index = {label: i for i, label in enumerate(class_table)}
    truth = np.array([index[l] if isinstance(l, str) else int(l) for l in labels], dtype=np.int64)
    predicted = np.argmax(probabilities, axis=1) if len(truth) else truth

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    tp = np.diag(confusion).astype(np.float64)
    predicted_totals = confusion.sum(axis=0)
    actual_totals = confusion.sum(axis=1)
    precision = np.divide(tp, predicted_totals, out=np.zeros(n_classes), where=predicted_totals > 0)
    recall = np.divide(tp, actual_totals, out=np.zeros(n_classes), where=actual_totals > 0)
    denominator = precision + recall
    f1 = np.divide(2 * precision * recall, denominator, out=np.zeros(n_classes), where=denominator > 0)

    top_k_accuracy = {}
    if len(truth):
        ranking = np.argsort(-probabilities, axis=1, kind='stable')
        for k in top_k:
            hits = (ranking[:, :k] == truth[:, None]).any(axis=1)
            top_k_accuracy[int(k)] = float(hits.mean())
    else:
        top_k_accuracy = {int(k): 0.0 for k in top_k}

    total = confusion.sum()
    return MetricsReport(
        class_table=list(class_table),
        confusion=confusion,
        accuracy=float(np.trace(confusion) / total) if total else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()) if n_classes else 0.0,
        macro_recall=float(recall.mean()) if n_classes else 0.0,
        macro_f1=float(f1.mean()) if n_classes else 0.0,
        top_k_accuracy=top_k_accuracy,
    )


def _argmax_lowest(values: Sequence[float]) -> int:
    best = max(values)
    return next(i for i, v in enumerate(values) if v == best)


def vote_audio(probabilities: np.ndarray, groups: Sequence[str], mode: str = 'majority',
               expected_groups: Optional[Sequence[str]] = None) -> Dict[str, int]:
    """Class index per recording from its clips' probability rows.

    majority: most frequent clip argmax, ties settled by the summed
    probabilities, remaining ties by the lowest class index.
    probability: argmax of the summed probability vectors.
    """
    if mode not in VOTE_MODES:
        raise ValueError(f"vote mode must be one of {VOTE_MODES}, got {mode!r}")
    probabilities = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if len(groups) == 0:
        probabilities = probabilities.reshape(0, probabilities.shape[-1] if probabilities.size else 0)
    if len(probabilities) != len(groups):
        raise LengthMismatch(f"{len(probabilities)} prediction rows but {len(groups)} group ids")
    rows: Dict[str, List[int]] = defaultdict(list)
    for i, group in enumerate(groups):
        rows[group].append(i)
    for group in expected_groups or ():
        if not rows.get(group):
            raise EmptyGroup(f"Recording {group} has no clip predictions")

    votes: Dict[str, int] = {}
    for group in sorted(rows):
        block = probabilities[rows[group]]
        n_classes = block.shape[1]
        # fsum keeps the totals independent of clip order
        sums = [math.fsum(block[:, c]) for c in range(n_classes)]
        if mode == 'probability':
            votes[group] = _argmax_lowest(sums)
            continue
        counts = np.bincount(np.argmax(block, axis=1), minlength=n_classes)
        tied = np.flatnonzero(counts == counts.max())
        if len(tied) == 1:
            votes[group] = int(tied[0])
        else:
            votes[group] = int(tied[_argmax_lowest([sums[c] for c in tied])])
    return votes


def audio_accuracy(votes: Dict[str, int], truth: Dict[str, int]) -> float:
    """Fraction of recordings whose vote matches their label"""
    if not votes:
        return 0.0
    return sum(1 for group, vote in votes.items() if truth[group] == vote) / len(votes)


def evaluate_predictions(probabilities: np.ndarray, labeled: LabeledSet, top_k: Sequence[int] = (3, 5),
                         vote_mode: str = 'majority') -> Tuple[MetricsReport, Dict[str, int]]:
    """Clip metrics plus recording-level accuracy for one labeled set"""
    report = compute_metrics(probabilities, labeled.labels, labeled.class_table, top_k)
    if len(labeled):
        votes = vote_audio(probabilities, labeled.groups, vote_mode)
        index = {label: i for i, label in enumerate(labeled.class_table)}
        truth = {group: index[label] for group, label in zip(labeled.groups, labeled.labels)}
        report.audio_accuracy = audio_accuracy(votes, truth)
        report.n_recordings = len(votes)
    else:
        votes = {}
    return report, votes


def cross_validate(labeled: LabeledSet, model_config: ModelConfig, k: int = 5, seed: int = 0,
                   grouped: bool = True, top_k: Sequence[int] = (3, 5), vote_mode: str = 'majority',
                   rebalance_config: Optional[RebalanceConfig] = None, jobs: int = 1,
                   renoise: Optional[Renoise] = None) -> MetricsReport:
    """k-fold cross-validation pooling every out-of-fold prediction into one report.

    Rebalancing, when configured, is applied to each training fold only;
    `renoise` makes oversampled duplicates distinct.
    """
    folds = kfold(labeled.labels, k, seed, labeled.groups if grouped else None)
    pooled = np.zeros((len(labeled), len(labeled.class_table)))
    for f, (train_idx, test_idx) in enumerate(folds):
        train = labeled.take(train_idx)
        if rebalance_config is not None:
            train = rebalance(train, rebalance_config, derive_seed(seed, 'rebalance', f), renoise)
        model, _ = fit_model(train, model_config, derive_seed(seed, 'model', f), jobs=jobs)
        pooled[test_idx] = predict_items(model, [labeled.items[i] for i in test_idx])
        logger.info(f"Fold {f + 1}/{k}: {len(train_idx)} train, {len(test_idx)} test")
    report, _ = evaluate_predictions(pooled, labeled, top_k, vote_mode)
    mode = 'grouped' if grouped else 'ungrouped'
    logger.info(f"{k}-fold {mode} cross-validation accuracy {report.accuracy:.4f}")
    return report


@dataclass
class AblationRow:
    plan: str
    image_count: int = 0
    report: Optional[MetricsReport] = None
    error: Optional[str] = None

    @property
    def accuracy(self) -> Optional[float]:
        return self.report.accuracy if self.report else None

    @property
    def audio_accuracy(self) -> Optional[float]:
        return self.report.audio_accuracy if self.report else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'plan': self.plan,
            'image_count': self.image_count,
            'accuracy': self.accuracy,
            'audio_accuracy': self.audio_accuracy,
            'error': self.error,
        }


Trial = Callable[[AugmentPlan], Tuple[int, MetricsReport]]


def run_ablation(plans: Sequence[AugmentPlan], trial: Trial, jobs: int = 1) -> List[AblationRow]:
    """One row per plan; `trial(plan)` trains on the fixed split and returns (image count, report).

    A failing plan is logged and recorded on its row; the grid continues.
    """
    def run(plan: AugmentPlan) -> AblationRow:
        name = plan.describe()
        try:
            count, report = trial(plan)
            logger.info(f"Ablation {name}: {count} images, accuracy {report.accuracy:.4f}")
            return AblationRow(name, count, report)
        except Exception as e:
            logger.error(f"Ablation {name} failed: {str(e)}")
            return AblationRow(name, error=str(e))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(run, plans))
