"""
fedcmd-sim federated learning simulator

(C) 2024

server-side aggregation

fedavg                 sample-weighted mean of parameter vectors
cosine_similarity      clamped, epsilon-guarded cosine between two heads
build_similarity       pairwise matrix over the sampled clients
weighted_body_update   per-client similarity-weighted mean of bodies
decoupled_update       body layers before the head averaged as fedavg,
                       layers after it (or all, in whole_body mode)
                       combined per client by similarity
"""

import csv
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from engine.Errors import ShapeError, ProtocolError
from engine.FedLogger import LOGGER
from engine.Model import pack_layers, unpack_layers

DEFAULT_EPSILON = 1e-8
SPLIT_MODES = ('before_after', 'whole_body')


def _same_length(vectors, what):
    lengths = sorted({len(v) for v in vectors})
    if len(lengths) > 1:
        raise ShapeError('{} have different lengths: {}'.format(what, lengths))


def fedavg(items: Sequence[Tuple[np.ndarray, int]]) -> np.ndarray:
    items = list(items)
    if not items:
        raise ProtocolError('fedavg needs at least one client update')
    _same_length([v for v, _ in items], 'Client parameter vectors')
    counts = [int(n) for _, n in items]
    if min(counts) <= 0:
        raise ProtocolError('Sample counts must be positive, got {}'.format(counts))
    total = float(sum(counts))
    out = np.zeros(len(items[0][0]), dtype=np.float64)
    for vector, n in items:
        out += (n / total) * np.asarray(vector, dtype=np.float64)
    return out.astype(np.asarray(items[0][0]).dtype)


def cosine_similarity(phi_i, phi_j, epsilon=DEFAULT_EPSILON) -> float:
    a = np.asarray(phi_i, dtype=np.float64)
    b = np.asarray(phi_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError('Heads differ in length: {} vs {}'.format(a.size, b.size))
    value = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + epsilon))
    return min(max(value, 0.0), 1.0)


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    matrix: np.ndarray
    client_ids: List[int]

    def to_csv(self, path):
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow([''] + [str(c) for c in self.client_ids])
            for cid, row in zip(self.client_ids, self.matrix):
                writer.writerow([str(cid)] + [repr(float(v)) for v in row])


def build_similarity(heads: Dict[int, np.ndarray], epsilon=DEFAULT_EPSILON) -> SimilarityMatrix:
    if not heads:
        raise ProtocolError('Similarity needs at least one client head')
    ids = sorted(heads)
    _same_length([heads[c] for c in ids], 'Client heads')
    n = len(ids)
    matrix = np.zeros((n, n), dtype=np.float64)
    for i, ci in enumerate(ids):
        for j, cj in enumerate(ids):
            matrix[i, j] = cosine_similarity(heads[ci], heads[cj], epsilon)
    return SimilarityMatrix(matrix, ids)


def weighted_body_update(bodies: Dict[int, np.ndarray], sim: SimilarityMatrix) -> Dict[int, np.ndarray]:
    ids = sim.client_ids
    if sorted(bodies) != sorted(ids):
        raise ProtocolError('Bodies for clients {} do not match similarity clients {}'.format(sorted(bodies), ids))
    _same_length([bodies[c] for c in ids], 'Client bodies')
    vectors = [np.asarray(bodies[c], dtype=np.float64) for c in ids]
    dtype = np.asarray(bodies[ids[0]]).dtype
    out = {}
    for i, ci in enumerate(ids):
        row = sim.matrix[i]
        weight = float(row.sum())
        acc = np.zeros_like(vectors[0])
        if weight <= 0.0:
            LOGGER.warning('client {}: similarity row sums to zero, using the plain mean'.format(ci))
            for v in vectors:
                acc += v
            out[ci] = (acc / len(vectors)).astype(dtype)
            continue
        for j, v in enumerate(vectors):
            acc += row[j] * v
        out[ci] = (acc / weight).astype(dtype)
    return out


def split_layers(layer_order, body_layers, head_layer, split_mode) -> Tuple[List[str], List[str]]:
    """Body layers averaged as fedavg, and body layers weighted by similarity."""
    if split_mode not in SPLIT_MODES:
        raise ProtocolError("Unknown split mode '{}', expected one of {}".format(split_mode, SPLIT_MODES))
    ordered = [n for n in layer_order if n in body_layers]
    if split_mode == 'whole_body':
        return [], ordered
    cut = list(layer_order).index(head_layer)
    before = [n for n in ordered if list(layer_order).index(n) < cut]
    after = [n for n in ordered if list(layer_order).index(n) > cut]
    return before, after


def decoupled_update(bodies: Dict[int, Dict[str, np.ndarray]], counts: Dict[int, int], sim: SimilarityMatrix,
                     layer_order, head_layer, split_mode='before_after'):
    """
    bodies: client -> layer -> flat array (head excluded).
    Returns (shared, personal): shared layer arrays for everyone, and
    client -> layer arrays for the similarity-weighted part.
    """
    ids = sim.client_ids
    first = bodies[ids[0]]
    before, after = split_layers(layer_order, list(first), head_layer, split_mode)
    sizes = {n: first[n].size for n in first}
    dtype = next(iter(first.values())).dtype

    shared = {}
    if before:
        mean = fedavg([(pack_layers(bodies[c], before, dtype), counts[c]) for c in ids])
        shared = unpack_layers(mean, sizes, before)

    personal = {c: {} for c in ids}
    if after:
        updated = weighted_body_update({c: pack_layers(bodies[c], after, dtype) for c in ids}, sim)
        personal = {c: unpack_layers(updated[c], sizes, after) for c in ids}
    return shared, personal
