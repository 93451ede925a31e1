"""
fedcmd-sim federated learning simulator

(C) 2024

feature distributions and the per-layer transfer score

Every distribution (inputs, labels, a layer's activations) is summarized as a
univariate Gaussian over all pooled entries. For univariate Gaussians the
2-Wasserstein distance has the closed form sqrt(dmean^2 + dstd^2).
"""

import math
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from engine.Errors import SummaryError, LayerError
from engine.FedLogger import LOGGER
from engine.Model import forward

SIGMA_MIN = 1e-6


@dataclass(frozen=True)
class GaussianSummary:
    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise SummaryError('Gaussian summary must be finite, got mean={} std={}'.format(self.mean, self.std))
        if self.std < 0:
            raise SummaryError('Gaussian summary std must be non-negative, got {}'.format(self.std))
        object.__setattr__(self, 'mean', float(self.mean))
        object.__setattr__(self, 'std', float(max(self.std, SIGMA_MIN)))


@dataclass(frozen=True)
class LayerScore:
    layer: str
    s: float


class GaussianAccumulator:
    """Streaming mean / population variance, merged chunk by chunk in float64."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values):
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size == 0:
            return self
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        if bad:
            raise SummaryError('{} non-finite values in distribution input'.format(bad))
        n_b = arr.size
        mean_b = float(arr.mean())
        m2_b = float(((arr - mean_b) ** 2).sum())
        total = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / total
        self.m2 += m2_b + delta * delta * self.count * n_b / total
        self.count = total
        return self

    def summary(self) -> GaussianSummary:
        if self.count == 0:
            raise SummaryError('Cannot fit a distribution to an empty stream')
        return GaussianSummary(self.mean, math.sqrt(max(self.m2, 0.0) / self.count))


def _chunks(values):
    if isinstance(values, np.ndarray):
        return [values]
    if isinstance(values, (list, tuple)) and all(np.isscalar(v) for v in values):
        return [values]
    return values


def fit_gaussian(values) -> GaussianSummary:
    """values: an array, a list of numbers, or an iterable of array chunks."""
    acc = GaussianAccumulator()
    for chunk in _chunks(values):
        acc.update(chunk)
    return acc.summary()


def w2_gaussian(a: GaussianSummary, b: GaussianSummary) -> float:
    return math.hypot(a.mean - b.mean, a.std - b.std)


def transfer_score(z_prev, z_cur, z_x, z_y) -> float:
    part_a = w2_gaussian(z_cur, z_y) - w2_gaussian(z_cur, z_x)
    part_b = w2_gaussian(z_prev, z_y) - w2_gaussian(z_prev, z_x)
    return abs(part_a - part_b)


def input_summary(inputs, chunk=4096) -> GaussianSummary:
    return fit_gaussian(inputs[i:i + chunk] for i in range(0, len(inputs), chunk))


def label_summary(labels, num_classes, encoding='onehot') -> GaussianSummary:
    labels = np.asarray(labels, dtype=np.int64)
    if encoding == 'index':
        return fit_gaussian(labels.astype(np.float64))
    if encoding != 'onehot':
        raise SummaryError("Unknown label encoding '{}', expected onehot or index".format(encoding))
    eye = np.eye(num_classes)
    return fit_gaussian(eye[labels[i:i + 4096]] for i in range(0, len(labels), 4096))


def score_all_layers(traces: Iterable, z_x, z_y, eligible) -> List[LayerScore]:
    """
    One transfer score per eligible layer, fitting each layer's activation
    distribution over every trace in a single pass. The first eligible layer
    is compared against the raw input distribution z_x.
    """
    eligible = list(eligible)
    if not eligible:
        raise LayerError('No eligible layers to score')
    accs = {name: GaussianAccumulator() for name in eligible}
    for trace in traces:
        for name in eligible:
            try:
                out = trace.block_output(name)
            except KeyError:
                raise LayerError('Layer {} is not in the forward trace'.format(name))
            accs[name].update(out)

    scores = []
    prev = z_x
    for name in eligible:
        cur = accs[name].summary()
        scores.append(LayerScore(name, transfer_score(prev, cur, z_x, z_y)))
        prev = cur
    LOGGER.debug('score_all_layers: {}'.format(', '.join('{}={:.5f}'.format(s.layer, s.s) for s in scores)))
    return scores


def model_traces(model, inputs, batch_size=256):
    """Forward traces (evaluation mode) over inputs, one per batch."""
    for start in range(0, len(inputs), batch_size):
        _, trace = forward(model, inputs[start:start + batch_size])
        yield trace
