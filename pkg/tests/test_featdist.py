import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

from engine.Errors import LayerError, SummaryError
from engine.FeatDist import (SIGMA_MIN, GaussianSummary, fit_gaussian, input_summary, label_summary,
                             model_traces, score_all_layers, transfer_score, w2_gaussian)
from engine.Layers import LayerSpec
from engine.Model import build_model
from engine.Selection import VoteLedger, client_vote, round_vote
from engine.Zoo import model_specs


def N(mean, std):
    return GaussianSummary(mean, std)


def w2_quantile_oracle(a, b, n=100_001):
    """sqrt of the integral over q of (Fa^-1(q) - Fb^-1(q))^2, trapezoid rule in q."""
    q = norm.cdf(np.linspace(-8.0, 8.0, n))
    qa = norm.ppf(q, loc=a.mean, scale=a.std)
    qb = norm.ppf(q, loc=b.mean, scale=b.std)
    return math.sqrt(trapezoid((qa - qb) ** 2, q))


def test_fit_constant_stream_is_clamped():
    s = fit_gaussian([1, 1, 1, 1])
    assert s.mean == 1.0
    assert s.std == SIGMA_MIN


def test_fit_population_std():
    s = fit_gaussian([0, 2])
    assert (s.mean, s.std) == (1.0, 1.0)


def test_fit_large_sample(rng):
    draws = rng.normal(3.0, 2.0, size=100_000)
    s = fit_gaussian(np.array_split(draws, 7))
    assert s.mean == pytest.approx(3.0, abs=0.05)
    assert s.std == pytest.approx(2.0, abs=0.05)
    whole = fit_gaussian(draws)
    assert s.mean == pytest.approx(whole.mean, abs=1e-12)
    assert s.std == pytest.approx(whole.std, abs=1e-12)


def test_fit_errors():
    with pytest.raises(SummaryError):
        fit_gaussian([])
    with pytest.raises(SummaryError) as err:
        fit_gaussian(np.array([1.0, np.nan, np.inf]))
    assert '2' in str(err.value)


def test_w2_examples():
    assert w2_gaussian(N(0, 1), N(0, 1)) == 0.0
    assert w2_gaussian(N(3, 1), N(0, 1)) == 3.0
    assert w2_gaussian(N(1, 2), N(4, 6)) == pytest.approx(5.0)
    assert w2_quantile_oracle(N(1, 2), N(4, 6)) == pytest.approx(5.0, abs=1e-4)


def test_w2_matches_quantile_integral(rng):
    for _ in range(100):
        a = N(rng.uniform(-10, 10), rng.uniform(0.1, 10))
        b = N(rng.uniform(-10, 10), rng.uniform(0.1, 10))
        assert w2_gaussian(a, b) == pytest.approx(w2_quantile_oracle(a, b), abs=1e-4)


def test_w2_is_a_metric(rng):
    for _ in range(200):
        a, b, c = (N(rng.uniform(-5, 5), rng.uniform(0.1, 5)) for _ in range(3))
        assert w2_gaussian(a, b) >= 0
        assert w2_gaussian(a, b) == w2_gaussian(b, a)
        assert w2_gaussian(a, c) <= w2_gaussian(a, b) + w2_gaussian(b, c) + 1e-12


def test_transfer_score_examples():
    assert transfer_score(N(1, 2), N(1, 2), N(0, 1), N(3, 1)) == 0.0
    assert transfer_score(N(0, 1), N(5, 1), N(0, 1), N(0, 1)) == 0.0
    assert transfer_score(N(0, 1), N(2, 1), N(0, 1), N(4, 1)) == pytest.approx(4.0)


def test_transfer_score_symmetric_in_input_and_label(rng):
    for _ in range(50):
        zp, zc, zx, zy = (N(rng.uniform(-5, 5), rng.uniform(0.1, 5)) for _ in range(4))
        assert transfer_score(zp, zc, zx, zy) == pytest.approx(transfer_score(zp, zc, zy, zx), abs=1e-12)


def test_label_summaries():
    onehot = label_summary([0, 1, 2, 3], 4)
    assert onehot.mean == pytest.approx(0.25)
    assert onehot.std == pytest.approx(math.sqrt(0.25 * 0.75))
    index = label_summary([0, 2], 4, encoding='index')
    assert (index.mean, index.std) == (1.0, 1.0)
    with pytest.raises(SummaryError):
        label_summary([0], 2, encoding='ordinal')


def test_input_summary_chunks(rng):
    x = rng.normal(size=(50, 3)).astype(np.float32)
    a = input_summary(x, chunk=7)
    assert a.mean == pytest.approx(float(x.astype(np.float64).mean()), abs=1e-9)
    assert a.std == pytest.approx(float(x.astype(np.float64).std()), abs=1e-9)


def test_streamed_scores_match_materialized(blobs):
    model = build_model(model_specs('mlp3', (8,), 4), 5)
    z_x = input_summary(blobs.inputs)
    z_y = label_summary(blobs.labels, 4)
    eligible = model.votable_names
    scores = score_all_layers(model_traces(model, blobs.inputs, batch_size=37), z_x, z_y, eligible)
    assert [s.layer for s in scores] == eligible

    traces = list(model_traces(model, blobs.inputs, batch_size=37))
    prev = z_x
    for score, name in zip(scores, eligible):
        out = np.concatenate([t.block_output(name) for t in traces]).astype(np.float64)
        cur = GaussianSummary(out.mean(), out.std())
        assert score.s == pytest.approx(transfer_score(prev, cur, z_x, z_y), abs=1e-6)
        prev = cur


def test_identity_layers_score_zero(rng):
    specs = [LayerSpec('dense', 'a', in_features=4, out_features=4),
             LayerSpec('dense', 'b', in_features=4, out_features=4)]
    model = build_model(specs, 0)
    eye = np.concatenate([np.eye(4).ravel(), np.zeros(4)])
    model = model.with_params({'a': eye, 'b': eye})
    x = rng.normal(size=(20, 4)).astype(np.float32)
    z_y = label_summary(np.arange(20) % 4, 4)
    scores = score_all_layers(model_traces(model, x), input_summary(x), z_y, ['a', 'b'])
    assert [s.s for s in scores] == [0.0, 0.0]


def test_score_errors(blobs):
    model = build_model(model_specs('mlp3', (8,), 4), 5)
    z = input_summary(blobs.inputs)
    with pytest.raises(LayerError):
        score_all_layers(model_traces(model, blobs.inputs), z, z, [])
    with pytest.raises(LayerError):
        score_all_layers(model_traces(model, blobs.inputs), z, z, ['fc7'])


def _rigged(seed):
    """fc2 is an identity map, so its output distribution equals its input's."""
    specs = [LayerSpec('dense', 'fc1', in_features=8, out_features=8),
             LayerSpec('relu', 'fc1.relu', block='fc1'),
             LayerSpec('dense', 'fc2', in_features=8, out_features=8),
             LayerSpec('dense', 'classifier', in_features=8, out_features=4)]
    model = build_model(specs, seed)
    return model.with_params({'fc2': np.concatenate([np.eye(8).ravel(), np.zeros(8)])})


def test_rigged_layer_wins_every_vote():
    ledger = VoteLedger(10, ['fc1', 'fc2', 'classifier'])
    for seed in range(10):
        rng = np.random.default_rng(seed)
        votes = {}
        for cid in range(3):
            x = rng.normal(loc=cid, size=(40, 8)).astype(np.float32)
            labels = rng.integers(0, 4, size=40)
            model = _rigged(seed * 10 + cid)
            scores = score_all_layers(model_traces(model, x), input_summary(x), label_summary(labels, 4),
                                      model.votable_names)
            by_layer = {s.layer: s.s for s in scores}
            assert by_layer['fc2'] == 0.0
            assert by_layer['fc1'] > 0 and by_layer['classifier'] > 0
            votes[cid] = client_vote(scores, model.votable_names)
        assert round_vote(votes) == 'fc2'
        ledger.record_round(seed + 1, votes)
    assert ledger.finalize() == 'fc2'
