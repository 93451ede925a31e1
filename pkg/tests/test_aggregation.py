import math

import numpy as np
import pytest

from engine.Aggregation import (SimilarityMatrix, build_similarity, cosine_similarity, decoupled_update, fedavg,
                                split_layers, weighted_body_update)
from engine.Errors import ProtocolError, ShapeError


def test_fedavg_examples():
    v = np.array([1.5, -2.0, 3.0], dtype=np.float32)
    np.testing.assert_array_equal(fedavg([(v, 5), (-v, 5)]), np.zeros(3))
    np.testing.assert_array_equal(fedavg([(v, 9)]), v)
    np.testing.assert_array_equal(fedavg([(np.zeros(4), 1), (np.full(4, 4.0), 3)]), np.full(4, 3.0))


def test_fedavg_keeps_dtype():
    out = fedavg([(np.ones(2, dtype=np.float32), 1), (np.zeros(2, dtype=np.float32), 1)])
    assert out.dtype == np.float32


def test_fedavg_errors():
    with pytest.raises(ProtocolError):
        fedavg([])
    with pytest.raises(ShapeError):
        fedavg([(np.zeros(2), 1), (np.zeros(3), 1)])
    with pytest.raises(ProtocolError):
        fedavg([(np.zeros(2), 0)])


def test_fedavg_is_affine_equivariant(rng):
    for _ in range(20):
        vectors = [rng.normal(size=6) for _ in range(4)]
        counts = rng.integers(1, 50, size=4)
        a, c = rng.uniform(-3, 3), rng.normal(size=6)
        lhs = fedavg([(a * v + c, n) for v, n in zip(vectors, counts)])
        rhs = a * fedavg(list(zip(vectors, counts))) + c
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_cosine_examples():
    v = np.array([0.6, 0.8])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-7)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    value = cosine_similarity([1.0, 0.0], [1.0, 1.0])
    assert value == pytest.approx(1.0 / (math.sqrt(2.0) + 1e-8), abs=1e-12)
    assert value == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-7)


def test_cosine_is_clamped():
    assert cosine_similarity([1.0, 0.0], [-1.0, 0.0]) == 0.0
    assert cosine_similarity([0.0, 0.0], [1.0, 0.0]) == 0.0
    with pytest.raises(ShapeError):
        cosine_similarity([1.0], [1.0, 2.0])


def test_similarity_examples():
    same = build_similarity({c: np.array([0.3, -0.2, 0.9]) for c in range(3)})
    np.testing.assert_allclose(same.matrix, np.ones((3, 3)), atol=1e-6)
    ortho = build_similarity({7: np.array([1.0, 0.0]), 2: np.array([0.0, 1.0])})
    assert ortho.client_ids == [2, 7]
    np.testing.assert_allclose(ortho.matrix, np.eye(2), atol=1e-6)


def test_similarity_matches_naive_pairs(rng):
    heads = {c: rng.normal(size=5) for c in (4, 1, 9)}
    sim = build_similarity(heads)
    for i, ci in enumerate(sim.client_ids):
        for j, cj in enumerate(sim.client_ids):
            a, b = heads[ci], heads[cj]
            raw = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-8)
            assert sim.matrix[i, j] == min(max(float(raw), 0.0), 1.0)
    assert np.all(sim.matrix >= 0) and np.all(sim.matrix <= 1)
    np.testing.assert_array_equal(sim.matrix, sim.matrix.T)


def test_similarity_errors():
    with pytest.raises(ProtocolError):
        build_similarity({})
    with pytest.raises(ShapeError):
        build_similarity({0: np.zeros(2), 1: np.zeros(3)})


def test_similarity_csv(tmp_path):
    sim = SimilarityMatrix(np.array([[1.0, 0.25], [0.25, 1.0]]), [3, 8])
    sim.to_csv(tmp_path / 'sim.csv')
    lines = (tmp_path / 'sim.csv').read_text().splitlines()
    assert lines == [',3,8', '3,1.0,0.25', '8,0.25,1.0']


def test_weighted_update_identical_bodies():
    body = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    sim = SimilarityMatrix(np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.6], [0.0, 0.6, 1.0]]), [0, 1, 2])
    out = weighted_body_update({c: body.copy() for c in range(3)}, sim)
    for c in range(3):
        np.testing.assert_allclose(out[c], body, rtol=1e-6)


def test_weighted_update_identity_keeps_own_body(rng):
    bodies = {c: rng.normal(size=4).astype(np.float32) for c in range(3)}
    out = weighted_body_update(bodies, SimilarityMatrix(np.eye(3), [0, 1, 2]))
    for c in range(3):
        np.testing.assert_array_equal(out[c], bodies[c])


def test_weighted_update_hand_example():
    b1, b2 = np.array([3.0, 0.0]), np.array([0.0, 3.0])
    out = weighted_body_update({1: b1, 2: b2}, SimilarityMatrix(np.array([[1.0, 0.5], [0.5, 1.0]]), [1, 2]))
    np.testing.assert_allclose(out[1], (b1 + 0.5 * b2) / 1.5)
    np.testing.assert_allclose(out[2], [1.0, 2.0])


def test_weighted_update_is_convex_combination(rng):
    bodies = {c: rng.normal(size=8) for c in range(5)}
    heads = {c: rng.normal(size=3) for c in range(5)}
    out = weighted_body_update(bodies, build_similarity(heads))
    stacked = np.stack([bodies[c] for c in range(5)])
    for c in range(5):
        assert np.all(out[c] >= stacked.min(axis=0) - 1e-12)
        assert np.all(out[c] <= stacked.max(axis=0) + 1e-12)


def test_weighted_update_zero_row_uses_mean():
    bodies = {0: np.array([2.0]), 1: np.array([4.0])}
    out = weighted_body_update(bodies, SimilarityMatrix(np.array([[0.0, 0.0], [0.0, 1.0]]), [0, 1]))
    assert out[0][0] == 3.0
    assert out[1][0] == 4.0


def test_weighted_update_errors():
    sim = SimilarityMatrix(np.eye(2), [0, 1])
    with pytest.raises(ProtocolError):
        weighted_body_update({0: np.zeros(2), 5: np.zeros(2)}, sim)
    with pytest.raises(ShapeError):
        weighted_body_update({0: np.zeros(2), 1: np.zeros(3)}, sim)


def test_split_layers():
    order = ['conv1', 'conv2', 'fc1', 'fc2', 'classifier']
    body = ['conv1', 'conv2', 'fc1', 'classifier']
    assert split_layers(order, body, 'fc2', 'before_after') == (['conv1', 'conv2', 'fc1'], ['classifier'])
    assert split_layers(order, body, 'fc2', 'whole_body') == ([], body)
    assert split_layers(order, order[1:], 'conv1', 'before_after') == ([], order[1:])
    with pytest.raises(ProtocolError):
        split_layers(order, body, 'fc2', 'halves')


def test_decoupled_update_before_after():
    order = ['fc1', 'fc2', 'classifier']
    bodies = {0: {'fc1': np.array([0.0, 0.0], dtype=np.float32), 'classifier': np.array([1.0], dtype=np.float32)},
              1: {'fc1': np.array([4.0, 8.0], dtype=np.float32), 'classifier': np.array([5.0], dtype=np.float32)}}
    sim = SimilarityMatrix(np.eye(2), [0, 1])
    shared, personal = decoupled_update(bodies, {0: 1, 1: 3}, sim, order, 'fc2')
    np.testing.assert_array_equal(shared['fc1'], [3.0, 6.0])
    assert list(shared) == ['fc1']
    np.testing.assert_array_equal(personal[0]['classifier'], [1.0])
    np.testing.assert_array_equal(personal[1]['classifier'], [5.0])

    shared, personal = decoupled_update(bodies, {0: 1, 1: 3}, sim, order, 'fc2', 'whole_body')
    assert shared == {}
    np.testing.assert_array_equal(personal[1]['fc1'], [4.0, 8.0])
