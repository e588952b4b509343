"""
Synthetic classification tasks and non-IID client partitioning
"""

import logging
from typing import List, Tuple

import numpy as np
from sklearn import datasets as sk_datasets
from sklearn import model_selection

from utils.errors import InvalidSpec, TooFewSamples
from utils.mask_engine import ClientDataset

logger = logging.getLogger(__name__)


def _check(classes: int, dim: int, samples: int, min_dim: int = 1):
    if classes < 2:
        raise InvalidSpec(f"Need at least 2 classes, got {classes}")
    if dim < min_dim:
        raise InvalidSpec(f"Need at least {min_dim} feature dimensions, got {dim}")
    if samples < 0:
        raise InvalidSpec("Sample count cannot be negative")


def _balanced_labels(classes: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(samples) % classes
    return rng.permutation(labels)


def _random_state(seed: int) -> int:
    # sklearn seeds are 32-bit
    return int(seed) & 0xFFFFFFFF


def make_blobs(classes: int = 2, dim: int = 16, samples: int = 2000, noise: float = 1.0,
               seed: int = 0) -> ClientDataset:
    """Isotropic Gaussian blobs around standard-normal class centres"""
    _check(classes, dim, samples)
    centres = np.random.default_rng(seed).normal(size=(classes, dim))
    features, labels = sk_datasets.make_blobs(n_samples=samples, centers=centres, cluster_std=noise,
                                              random_state=_random_state(seed))
    return ClientDataset(features, labels, classes)


def make_rings(classes: int = 2, dim: int = 16, samples: int = 2000, noise: float = 0.1,
               seed: int = 0) -> ClientDataset:
    """Concentric rings in the first two dimensions, class c at radius c + 1"""
    _check(classes, dim, samples, min_dim=2)
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(classes, samples, rng)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=samples)
    radius = labels + 1.0 + noise * rng.normal(size=samples)
    features = noise * rng.normal(size=(samples, dim))
    features[:, 0] = radius * np.cos(angle)
    features[:, 1] = radius * np.sin(angle)
    return ClientDataset(features, labels, classes)


GENERATORS = {"blobs": make_blobs, "rings": make_rings}


def make_dataset(kind: str, classes: int, dim: int, samples: int, noise: float, seed: int) -> ClientDataset:
    if kind not in GENERATORS:
        raise InvalidSpec(f"Unknown dataset kind '{kind}'")
    return GENERATORS[kind](classes, dim, samples, noise, seed)


def train_test_split(dataset: ClientDataset, test_samples: int, seed: int = 0) -> Tuple[ClientDataset, ClientDataset]:
    if not 0 < test_samples < dataset.sample_count:
        raise InvalidSpec(f"Cannot hold out {test_samples} of {dataset.sample_count} samples")
    train_idx, test_idx = model_selection.train_test_split(np.arange(dataset.sample_count), test_size=test_samples,
                                                           random_state=_random_state(seed))
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def partition_dirichlet(dataset: ClientDataset, clients: int, alpha: float, seed: int = 0) -> List[ClientDataset]:
    """
    Split a dataset over clients with per-class Dir(alpha) proportions.

    Shards are disjoint and cover the dataset. A client left empty takes
    one sample from the currently largest shard.

    Raises:
        TooFewSamples: fewer samples than clients
    """
    if clients < 1:
        raise InvalidSpec("Need at least one client")
    if alpha <= 0:
        raise InvalidSpec(f"Dirichlet concentration must be positive, got {alpha}")
    if dataset.sample_count < clients:
        raise TooFewSamples(f"{dataset.sample_count} samples cannot cover {clients} clients")

    rng = np.random.default_rng(seed)
    assignment = [[] for _ in range(clients)]
    for label in range(dataset.classes):
        members = rng.permutation(np.flatnonzero(dataset.labels == label))
        if members.size == 0:
            continue
        proportions = rng.dirichlet(np.full(clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * members.size).astype(np.int64)
        for client, part in enumerate(np.split(members, cuts)):
            assignment[client].extend(part.tolist())

    for client in range(clients):
        if not assignment[client]:
            donor = max(range(clients), key=lambda c: len(assignment[c]))
            taken = assignment[donor].pop(int(rng.integers(len(assignment[donor]))))
            assignment[client].append(taken)
            logger.debug(f"Client {client} received no samples, moved one from client {donor}")

    return [dataset.subset(np.sort(np.asarray(idx, dtype=np.int64))) for idx in assignment]


def class_coverage(shards: List[ClientDataset], classes: int) -> float:
    """Mean fraction of classes present per client"""
    if not shards:
        return 0.0
    return float(np.mean([np.unique(shard.labels).size / classes for shard in shards]))
