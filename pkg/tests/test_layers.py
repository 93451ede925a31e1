import numpy as np
import pytest

from engine.Errors import LayerError, ShapeError
from engine.Layers import KERNELS, LayerSpec, infer_shapes

CASES = [
    (LayerSpec('dense', 'fc', in_features=5, out_features=3), (4, 5)),
    (LayerSpec('conv2d', 'conv', in_channels=2, out_channels=3, kernel=3, pad=1), (2, 2, 6, 6)),
    (LayerSpec('conv2d', 'conv_s2', in_channels=1, out_channels=2, kernel=3, stride=2), (2, 1, 7, 7)),
    (LayerSpec('maxpool2d', 'pool', kernel=2, stride=2), (2, 3, 4, 4)),
    (LayerSpec('flatten', 'flat'), (3, 2, 2, 2)),
    (LayerSpec('relu', 'act'), (4, 6)),
    (LayerSpec('batchnorm', 'bn', num_features=3), (5, 3)),
    (LayerSpec('batchnorm', 'bn2d', num_features=2), (3, 2, 3, 3)),
]


def _objective(spec, flat, x, proj):
    y, _ = KERNELS[spec.kind].forward(spec, flat, x, True)
    return float(np.sum(y * proj))


def _numeric(f, v, h=1e-6):
    grad = np.zeros_like(v)
    for i in range(v.size):
        old = v.flat[i]
        v.flat[i] = old + h
        up = f()
        v.flat[i] = old - h
        down = f()
        v.flat[i] = old
        grad.flat[i] = (up - down) / (2 * h)
    return grad


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize('spec,shape', CASES, ids=[c[0].name for c in CASES])
def test_backward_matches_central_differences(spec, shape):
    rng = np.random.default_rng(7)
    kernel = KERNELS[spec.kind]
    flat = kernel.init(spec, shape[1:], rng, np.float64)
    if spec.kind == 'batchnorm':
        c = spec.num_features
        flat[:2 * c] = rng.normal(size=2 * c)
    elif flat.size:
        flat = flat + rng.normal(scale=0.1, size=flat.size)
    x = rng.normal(size=shape)
    y, cache = kernel.forward(spec, flat, x, True)
    proj = rng.normal(size=y.shape)

    dx, dflat = kernel.backward(spec, flat, cache, proj)
    num_dx = _numeric(lambda: _objective(spec, flat, x, proj), x)
    assert dx.shape == x.shape
    assert _rel_err(dx, num_dx) <= 1e-3

    assert dflat.shape == flat.shape
    if flat.size:
        num_dflat = _numeric(lambda: _objective(spec, flat, x, proj), flat)
        if spec.kind == 'batchnorm':
            # running statistics are not trained
            c = spec.num_features
            assert np.all(dflat[2 * c:] == 0)
            num_dflat[2 * c:] = 0
        assert _rel_err(dflat, num_dflat) <= 1e-3


def test_dense_layout_is_out_by_in():
    spec = LayerSpec('dense', 'fc', in_features=2, out_features=3)
    flat = np.arange(9, dtype=np.float64)
    y, _ = KERNELS['dense'].forward(spec, flat, np.array([[1.0, 0.0]]), False)
    # W rows are [0,1], [2,3], [4,5]; b is [6,7,8]
    np.testing.assert_array_equal(y, [[6.0, 9.0, 12.0]])


def test_batchnorm_eval_uses_running_stats():
    spec = LayerSpec('batchnorm', 'bn', num_features=2)
    flat = np.array([1.0, 1.0, 0.0, 0.0, 2.0, -1.0, 4.0, 1.0])
    y, _ = KERNELS['batchnorm'].forward(spec, flat, np.array([[4.0, -1.0]]), False)
    np.testing.assert_allclose(y, [[1.0, 0.0]], atol=1e-5)


def test_batchnorm_running_update_moves_toward_batch():
    spec = LayerSpec('batchnorm', 'bn', num_features=1)
    kernel = KERNELS['batchnorm']
    flat = kernel.init(spec, (1,), None, np.float64)
    _, cache = kernel.forward(spec, flat, np.array([[1.0], [3.0]]), True)
    new = kernel.running_update(spec, flat, cache)
    assert new[2] == pytest.approx(0.2)
    # unbiased batch variance is 2
    assert new[3] == pytest.approx(0.9 + 0.2)
    assert flat[2] == 0.0


def test_infer_shapes_lenet_like():
    specs = [
        LayerSpec('conv2d', 'conv1', in_channels=1, out_channels=6, kernel=5, pad=2),
        LayerSpec('maxpool2d', 'pool1', kernel=2, stride=2, block='conv1'),
        LayerSpec('flatten', 'flat', block='conv1'),
        LayerSpec('dense', 'fc', in_features=6 * 14 * 14, out_features=10),
    ]
    assert infer_shapes(specs, (1, 28, 28)) == ((6, 28, 28), (6, 14, 14), (1176,), (10,))


def test_shape_mismatch_names_both_layers():
    specs = [
        LayerSpec('dense', 'fc1', in_features=4, out_features=8),
        LayerSpec('dense', 'fc2', in_features=7, out_features=2),
    ]
    with pytest.raises(ShapeError) as err:
        infer_shapes(specs, (4,))
    assert 'fc2' in str(err.value) and 'fc1' in str(err.value)


def test_conv_kernel_too_large():
    spec = LayerSpec('conv2d', 'conv', in_channels=1, out_channels=1, kernel=5)
    with pytest.raises(ShapeError):
        infer_shapes([spec], (1, 3, 3))


def test_unknown_kind_and_missing_sizes():
    with pytest.raises(LayerError):
        LayerSpec('lstm', 'rnn')
    with pytest.raises(LayerError):
        infer_shapes([LayerSpec('dense', 'fc', in_features=3)], (3,))
