"""Dirichlet allocation of a labeled pool across clients, plus heterogeneity stats."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

MAX_REDRAWS = 100


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 2
    alpha: float = 10000.0
    seed: int = 0
    min_per_client: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise DomainError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise DomainError(f"Dirichlet alpha must be positive, got {self.alpha}")
        if self.min_per_client < 1:
            raise DomainError("min_per_client must be >= 1")


@dataclass
class Partition:
    assignments: list[np.ndarray]
    class_proportions: np.ndarray  # (clients, classes)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["client_id", "sample_index"])
            for cid, idx in enumerate(self.assignments):
                writer.writerows((cid, int(i)) for i in idx)


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights``.

    Ties in the remainder go to the lower index.
    """
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def _proportions(assignments, labels, num_classes):
    props = np.zeros((len(assignments), num_classes))
    for cid, idx in enumerate(assignments):
        if len(idx):
            props[cid] = np.bincount(labels[idx], minlength=num_classes) / len(idx)
    return props


def _draw(labels, classes, cfg, rng):
    buckets = [[] for _ in range(cfg.num_clients)]
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        p = rng.dirichlet(np.full(cfg.num_clients, cfg.alpha))
        counts = largest_remainder(p, len(members))
        start = 0
        for cid, k in enumerate(counts):
            buckets[cid].append(members[start : start + k])
            start += k
    return [np.sort(np.concatenate(b)) for b in buckets]


def dirichlet_partition(labels, cfg: PartitionConfig, num_classes: int | None = None) -> Partition:
    """Per class, split its samples across clients by ``Dirichlet(alpha * 1)`` shares.

    Draws that leave a client under ``min_per_client`` are redrawn up to
    ``MAX_REDRAWS`` times; after that the largest client donates samples
    one at a time until every client meets the minimum.
    """
    labels = np.asarray(labels, dtype=np.int64)
    need = cfg.num_clients * cfg.min_per_client
    if len(labels) < need:
        raise DomainError(f"{len(labels)} samples cannot give {cfg.num_clients} clients {cfg.min_per_client} each")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(cfg.seed)
    classes = np.unique(labels)
    for _ in range(MAX_REDRAWS):
        assignments = _draw(labels, classes, cfg, rng)
        if min(len(a) for a in assignments) >= cfg.min_per_client:
            break
    else:
        assignments = [list(a) for a in assignments]
        while True:
            sizes = [len(a) for a in assignments]
            poor = int(np.argmin(sizes))
            if sizes[poor] >= cfg.min_per_client:
                break
            rich = int(np.argmax(sizes))
            assignments[poor].append(assignments[rich].pop())
        assignments = [np.sort(np.asarray(a, dtype=np.int64)) for a in assignments]
    return Partition(assignments, _proportions(assignments, labels, k))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def partition_stats(part: Partition, global_labels, num_classes: int | None = None) -> dict:
    """Client sizes, class proportions and mean TV distance to the global mix."""
    labels = np.asarray(global_labels, dtype=np.int64)
    k = part.class_proportions.shape[1] if num_classes is None else num_classes
    pooled = np.concatenate(part.assignments) if part.assignments else np.array([], dtype=np.int64)
    global_dist = np.bincount(labels[pooled], minlength=k) / max(len(pooled), 1)
    tv = [total_variation(row, global_dist) for row in part.class_proportions]
    return {
        "sizes": part.sizes(),
        "class_proportions": part.class_proportions.tolist(),
        "global_distribution": global_dist.tolist(),
        "client_tv": tv,
        "heterogeneity": float(np.mean(tv)) if tv else 0.0,
    }
