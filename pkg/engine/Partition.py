"""
fedcmd-sim federated learning simulator

(C) 2024

Dirichlet non-IID partitioning and per-client train/test shards

For every class a share vector p ~ Dir(alpha) over the clients is drawn and the
class's (shuffled) samples are handed out by largest-remainder rounding of
p * class_size. A plan where some client ends up with fewer than MIN_SHARD
samples is re-drawn, at most MAX_RETRIES times.
"""

import json
from dataclasses import dataclass
from typing import List

import numpy as np

from engine.Dataset import Dataset, class_histogram
from engine.Errors import PartitionError
from engine.FedLogger import LOGGER

MIN_SHARD = 2
MAX_RETRIES = 16


@dataclass(frozen=True)
class PartitionPlan:
    alpha: float
    num_clients: int
    seed: int
    assignment: List[List[int]]

    def to_dict(self) -> dict:
        return {'alpha': self.alpha, 'num_clients': self.num_clients, 'seed': self.seed,
                'assignment': [list(map(int, a)) for a in self.assignment]}

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f)
            f.write('\n')

    @classmethod
    def load(cls, path) -> 'PartitionPlan':
        try:
            with open(path, encoding='utf-8') as f:
                doc = json.load(f)
            plan = cls(float(doc['alpha']), int(doc['num_clients']), int(doc['seed']),
                       [list(map(int, a)) for a in doc['assignment']])
        except (OSError, ValueError, KeyError, TypeError) as ex:
            LOGGER.error('Failed to load partition plan {}: {}'.format(path, ex))
            raise PartitionError('Cannot read partition plan {}: {}'.format(path, ex)) from ex
        if len(plan.assignment) != plan.num_clients:
            raise PartitionError('Plan {} lists {} clients but declares {}'.format(
                path, len(plan.assignment), plan.num_clients))
        return plan

    def validate(self, num_samples):
        seen = np.zeros(num_samples, dtype=np.int64)
        for cid, indices in enumerate(self.assignment):
            if len(indices) < MIN_SHARD:
                raise PartitionError('Client {} holds {} samples, minimum is {}'.format(cid, len(indices), MIN_SHARD))
            idx = np.asarray(indices, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= num_samples):
                raise PartitionError('Client {} references samples outside the dataset of {}'.format(cid, num_samples))
            np.add.at(seen, idx, 1)
        if np.any(seen > 1):
            raise PartitionError('Sample {} is assigned more than once'.format(int(np.flatnonzero(seen > 1)[0])))
        if np.any(seen == 0):
            raise PartitionError('{} samples are not assigned to any client'.format(int((seen == 0).sum())))


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    train_indices: np.ndarray
    test_indices: np.ndarray


def largest_remainder(shares, total) -> np.ndarray:
    """Integer counts summing to total, proportional to shares."""
    raw = np.asarray(shares, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    left = int(total - counts.sum())
    if left > 0:
        order = np.argsort(-(raw - counts), kind='stable')
        counts[order[:left]] += 1
    return counts


def _draw(labels, num_classes, alpha, num_clients, rng):
    buckets = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        rng.shuffle(members)
        shares = rng.dirichlet(np.full(num_clients, alpha))
        counts = largest_remainder(shares, members.size)
        start = 0
        for cid, count in enumerate(counts):
            buckets[cid].extend(members[start:start + count].tolist())
            start += count
    return [sorted(b) for b in buckets]


def dirichlet_partition(data: Dataset, alpha: float, num_clients: int, seed: int) -> PartitionPlan:
    if alpha <= 0:
        raise PartitionError('Dirichlet alpha must be positive, got {}'.format(alpha))
    if num_clients < 1:
        raise PartitionError('Need at least one client, got {}'.format(num_clients))
    if len(data) < MIN_SHARD * num_clients:
        raise PartitionError('{} samples cannot give {} clients at least {} each'.format(
            len(data), num_clients, MIN_SHARD))

    rng = np.random.default_rng(seed)
    for attempt in range(MAX_RETRIES + 1):
        assignment = _draw(data.labels, data.num_classes, alpha, num_clients, rng)
        smallest = min(len(a) for a in assignment)
        if smallest >= MIN_SHARD:
            LOGGER.debug('dirichlet_partition: alpha={} clients={} ok after {} re-draws'.format(
                alpha, num_clients, attempt))
            return PartitionPlan(float(alpha), int(num_clients), int(seed), assignment)
        LOGGER.warning('dirichlet_partition: smallest client has {} samples, re-drawing ({}/{})'.format(
            smallest, attempt + 1, MAX_RETRIES))
    raise PartitionError('Could not give every one of {} clients {} samples after {} re-draws (alpha={})'.format(
        num_clients, MIN_SHARD, MAX_RETRIES, alpha))


def make_shards(data: Dataset, plan: PartitionPlan, seed: int) -> List[ClientShard]:
    """Even train/test split per client; with an odd count train gets the extra sample."""
    plan.validate(len(data))
    shards = []
    for cid, indices in enumerate(plan.assignment):
        rng = np.random.default_rng([int(seed), cid])
        perm = rng.permutation(np.asarray(indices, dtype=np.int64))
        n_train = (len(perm) + 1) // 2
        train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        shards.append(ClientShard(cid, data.subset(train_idx), data.subset(test_idx), train_idx, test_idx))
    return shards


def client_histograms(data: Dataset, plan: PartitionPlan) -> np.ndarray:
    """(num_clients, num_classes) sample counts."""
    return np.stack([class_histogram(data.labels[np.asarray(a, dtype=np.int64)], data.num_classes)
                     for a in plan.assignment])
