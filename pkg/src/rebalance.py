"""
Class rebalancing for labeled sets.

Downsampling works on any item type. SMOTE interpolates numeric items
(FeatureVectors or plain vectors) only; clip and image sets are oversampled
by duplicating members with a fresh noise draw instead.
"""

import logging
from collections import defaultdict
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .augmentation import add_gaussian_noise, clip_seed
from .config import RebalanceConfig, derive_seed
from .errors import SilentClip, TooFewSamples
from .models import ClipRecord, FeatureVector, LabeledSet

logger = logging.getLogger(__name__)

DUPLICATE_SNR_DB = 30.0

Renoise = Callable[[Any, int, int], Any]


def _class_indices(labeled: LabeledSet) -> Dict[str, List[int]]:
    indices: Dict[str, List[int]] = defaultdict(list)
    for i, label in enumerate(labeled.labels):
        indices[label].append(i)
    return indices


def is_numeric(labeled: LabeledSet) -> bool:
    return all(isinstance(item, (FeatureVector, np.ndarray, list, tuple)) for item in labeled.items)


def random_downsample(labeled: LabeledSet, target: int, seed: int) -> LabeledSet:
    """Reduce every class above target to exactly target items, keeping item order"""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    rng = np.random.default_rng(seed)
    keep: List[int] = []
    for label, members in _class_indices(labeled).items():
        if len(members) > target:
            members = rng.choice(members, size=target, replace=False).tolist()
            logger.debug(f"Downsampled {label} to {target}")
        keep.extend(members)
    return labeled.take(sorted(keep))


def smote(labeled: LabeledSet, k: int = 5, seed: int = 0,
          targets: Optional[Dict[str, int]] = None) -> LabeledSet:
    """Append SMOTE samples until each class reaches its target (default: the largest class count).

    Each synthetic point is x + u * (x_nn - x) for a random class member x,
    one of its k nearest same-class neighbours x_nn and u ~ U[0, 1].
    """
    if not is_numeric(labeled):
        raise TypeError("SMOTE needs numeric items; use oversample_duplicates for clips or images")
    counts = labeled.class_counts
    if targets is None:
        top = max(counts.values(), default=0)
        targets = {label: top for label in counts}
    rng = np.random.default_rng(seed)
    matrix = labeled.matrix()
    by_class = _class_indices(labeled)
    featured = bool(labeled.items) and isinstance(labeled.items[0], FeatureVector)

    new_items, new_labels, new_groups = [], [], []
    for label in labeled.class_table:
        members = by_class.get(label, [])
        needed = targets.get(label, 0) - len(members)
        if needed <= 0:
            continue
        if len(members) < 2:
            raise TooFewSamples(f"Class {label!r} has {len(members)} sample(s); SMOTE needs at least 2")
        points = matrix[members]
        k_eff = min(k, len(members) - 1)
        distances = cdist(points, points)
        np.fill_diagonal(distances, np.inf)
        neighbours = np.argsort(distances, axis=1, kind='stable')[:, :k_eff]
        for n in range(needed):
            base = int(rng.integers(len(members)))
            other = int(neighbours[base, rng.integers(k_eff)])
            lam = rng.random()
            point = points[base] + lam * (points[other] - points[base])
            new_items.append(FeatureVector(point, f"smote/{label}/{n}") if featured else point)
            new_labels.append(label)
            new_groups.append(labeled.groups[members[base]])
        logger.info(f"SMOTE added {needed} samples to {label}")
    return labeled.extend(new_items, new_labels, new_groups)


def tomek_links(labeled: LabeledSet) -> List[Tuple[int, int]]:
    """Pairs (i, j), i < j, of opposite-class mutual nearest neighbours"""
    if len(labeled) < 2:
        return []
    matrix = labeled.matrix()
    distances = cdist(matrix, matrix)
    np.fill_diagonal(distances, np.inf)
    nearest = np.argmin(distances, axis=1)
    links = []
    for i, j in enumerate(nearest):
        j = int(j)
        if i < j and nearest[j] == i and labeled.labels[i] != labeled.labels[j]:
            links.append((i, j))
    return links


def remove_tomek_links(labeled: LabeledSet) -> LabeledSet:
    """Remove both members of every Tomek link"""
    links = tomek_links(labeled)
    drop = {i for pair in links for i in pair}
    if links:
        logger.info(f"Removing {len(links)} Tomek links ({len(drop)} samples)")
    return labeled.take([i for i in range(len(labeled)) if i not in drop])


def smote_tomek(labeled: LabeledSet, k: int = 5, seed: int = 0) -> LabeledSet:
    small = {label: n for label, n in labeled.class_counts.items() if n < 2}
    if small:
        raise TooFewSamples(f"Classes with fewer than 2 samples: {small}")
    return remove_tomek_links(smote(labeled, k, seed))


def _renoise_clip(clip: ClipRecord, variant: int, seed: int) -> ClipRecord:
    duplicate = replace(clip, variant=variant)
    try:
        return add_gaussian_noise(duplicate, DUPLICATE_SNR_DB, clip_seed(seed, duplicate))
    except SilentClip:
        return duplicate


def oversample_duplicates(labeled: LabeledSet, targets: Dict[str, int], seed: int,
                          renoise: Optional[Renoise] = None) -> LabeledSet:
    """Grow classes to their targets by duplicating random members.

    Every duplicate gets its own variant number; `renoise(item, variant, seed)`
    turns it into a distinct sample (ClipRecords get a fresh 30 dB noise draw
    by default, other items are duplicated as they are).
    """
    if renoise is None:
        def renoise(item, variant, seed):
            return _renoise_clip(item, variant, seed) if isinstance(item, ClipRecord) else item
    rng = np.random.default_rng(seed)
    by_class = _class_indices(labeled)
    variants: Dict[int, int] = defaultdict(int)
    new_items, new_labels, new_groups = [], [], []
    for label in labeled.class_table:
        members = by_class.get(label, [])
        needed = targets.get(label, 0) - len(members)
        if needed <= 0:
            continue
        if not members:
            raise TooFewSamples(f"Class {label!r} has no samples to duplicate")
        for _ in range(needed):
            index = members[int(rng.integers(len(members)))]
            variants[index] += 1
            new_items.append(renoise(labeled.items[index], variants[index], seed))
            new_labels.append(label)
            new_groups.append(labeled.groups[index])
        logger.info(f"Duplicated {needed} samples of {label}")
    return labeled.extend(new_items, new_labels, new_groups)


def _oversample(labeled: LabeledSet, targets: Dict[str, int], k: int, seed: int,
                renoise: Optional[Renoise]) -> LabeledSet:
    if is_numeric(labeled):
        return smote(labeled, k, seed, targets)
    return oversample_duplicates(labeled, targets, seed, renoise)


def custom_rebalance(labeled: LabeledSet, low_target: int, high_target: int, k: int = 5, seed: int = 0,
                     renoise: Optional[Renoise] = None) -> LabeledSet:
    """Downsample classes above high_target and oversample classes below low_target"""
    if low_target > high_target:
        raise ValueError(f"low_target ({low_target}) must not exceed high_target ({high_target})")
    reduced = random_downsample(labeled, high_target, derive_seed(seed, 'downsample'))
    targets = {label: low_target for label, n in reduced.class_counts.items() if n < low_target}
    return _oversample(reduced, targets, k, derive_seed(seed, 'oversample'), renoise)


def rebalance(labeled: LabeledSet, config: RebalanceConfig, seed: int,
              renoise: Optional[Renoise] = None) -> LabeledSet:
    """Apply the configured strategy"""
    if config.strategy == 'none' or not len(labeled):
        return labeled
    counts = labeled.class_counts
    logger.info(f"Rebalancing with {config.strategy}; counts before: {counts}")
    if config.strategy == 'downsample':
        target = config.high if config.high is not None else min(counts.values())
        result = random_downsample(labeled, target, seed)
    elif config.strategy == 'smote_tomek':
        if is_numeric(labeled):
            result = smote_tomek(labeled, config.k, seed)
        else:
            top = max(counts.values())
            result = oversample_duplicates(labeled, {label: top for label in counts}, seed, renoise)
    else:
        result = custom_rebalance(labeled, config.low, config.high, config.k, seed, renoise)
    logger.info(f"Counts after rebalancing: {result.class_counts}")
    return result
