"""
fedcmd-sim federated learning simulator

(C) 2024

layer kernels

A LayerSpec describes one layer; the kernel registered for its kind knows how
to size, initialize, run forward and run backward. Kernels are stateless: all
parameters come in as one flat array per layer and caches are returned to the
caller, so a forward pass never mutates a model.

Flat layouts:
    dense      W (out, in) row-major, then b (out)
    conv2d     W (out, in, k, k), then b (out)
    batchnorm  gamma (C), beta (C), running_mean (C), running_var (C)
"""

from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.Errors import ShapeError, LayerError

KINDS = ('conv2d', 'dense', 'maxpool2d', 'flatten', 'relu', 'batchnorm')
PARAMETERIZED = ('conv2d', 'dense', 'batchnorm')
# kinds that can be a personalized head
VOTABLE = ('conv2d', 'dense')

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    num_features: Optional[int] = None
    # per-sample input shape, only needed on the first layer of a model
    in_shape: Optional[Tuple[int, ...]] = None
    # activations of helper layers (bn, relu, pool) belong to the block of
    # the layer that produced them
    block: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LayerError("Layer {}: unknown kind '{}', expected one of {}".format(self.name, self.kind, KINDS))
        if not self.name:
            raise LayerError('Layer of kind {} has no name'.format(self.kind))
        if self.in_shape is not None:
            object.__setattr__(self, 'in_shape', tuple(int(d) for d in self.in_shape))

    @property
    def block_name(self) -> str:
        return self.block or self.name

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _need(spec, field):
    value = getattr(spec, field)
    if value is None or value <= 0:
        raise LayerError('Layer {} ({}) needs a positive {}'.format(spec.name, spec.kind, field))
    return value


class Dense:
    def check(self, spec, in_shape, prev):
        in_features = _need(spec, 'in_features')
        _need(spec, 'out_features')
        if tuple(in_shape) != (in_features,):
            raise ShapeError('Layer {} expects input ({},) but {} produces {}'.format(
                spec.name, in_features, prev, tuple(in_shape)))

    def out_shape(self, spec, in_shape):
        return (spec.out_features,)

    def param_count(self, spec, in_shape):
        return spec.in_features * spec.out_features + spec.out_features

    def init(self, spec, in_shape, rng, dtype):
        limit = np.sqrt(6.0 / spec.in_features)
        w = rng.uniform(-limit, limit, size=spec.in_features * spec.out_features)
        return np.concatenate([w, np.zeros(spec.out_features)]).astype(dtype)

    def _unpack(self, spec, flat):
        n = spec.in_features * spec.out_features
        return flat[:n].reshape(spec.out_features, spec.in_features), flat[n:]

    def forward(self, spec, flat, x, training):
        w, b = self._unpack(spec, flat)
        return x @ w.T + b, x

    def backward(self, spec, flat, cache, dy):
        w, _ = self._unpack(spec, flat)
        x = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        return dy @ w, np.concatenate([dw.ravel(), db])


class Conv2d:
    def check(self, spec, in_shape, prev):
        in_channels = _need(spec, 'in_channels')
        _need(spec, 'out_channels')
        _need(spec, 'kernel')
        _need(spec, 'stride')
        if len(in_shape) != 3 or in_shape[0] != in_channels:
            raise ShapeError('Layer {} expects {} input channels (C, H, W) but {} produces {}'.format(
                spec.name, in_channels, prev, tuple(in_shape)))
        ho, wo = self._spatial(spec, in_shape)
        if ho <= 0 or wo <= 0:
            raise ShapeError('Layer {} kernel {} does not fit input {} from {}'.format(
                spec.name, spec.kernel, tuple(in_shape), prev))

    def _spatial(self, spec, in_shape):
        _, h, w = in_shape
        ho = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        return ho, wo

    def out_shape(self, spec, in_shape):
        ho, wo = self._spatial(spec, in_shape)
        return (spec.out_channels, ho, wo)

    def param_count(self, spec, in_shape):
        return spec.out_channels * spec.in_channels * spec.kernel ** 2 + spec.out_channels

    def init(self, spec, in_shape, rng, dtype):
        fan_in = spec.in_channels * spec.kernel ** 2
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=spec.out_channels * fan_in)
        return np.concatenate([w, np.zeros(spec.out_channels)]).astype(dtype)

    def _unpack(self, spec, flat):
        n = spec.out_channels * spec.in_channels * spec.kernel ** 2
        w = flat[:n].reshape(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        return w, flat[n:]

    def _windows(self, spec, xp):
        # (N, C, Ho, Wo, k, k) view, no copy
        return sliding_window_view(xp, (spec.kernel, spec.kernel), axis=(2, 3))[:, :, ::spec.stride, ::spec.stride]

    def forward(self, spec, flat, x, training):
        w, b = self._unpack(spec, flat)
        p = spec.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = self._windows(spec, xp)
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(out), (xp.shape, windows)

    def backward(self, spec, flat, cache, dy):
        w, _ = self._unpack(spec, flat)
        xp_shape, windows = cache
        k, s, p = spec.kernel, spec.stride, spec.pad
        _, _, ho, wo = dy.shape
        dw = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))
        db = dy.sum(axis=(0, 2, 3))
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(dy, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib
        dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
        return dx, np.concatenate([dw.ravel(), db])


class MaxPool2d:
    def check(self, spec, in_shape, prev):
        _need(spec, 'kernel')
        if len(in_shape) != 3:
            raise ShapeError('Layer {} expects (C, H, W) input but {} produces {}'.format(
                spec.name, prev, tuple(in_shape)))
        if in_shape[1] < spec.kernel or in_shape[2] < spec.kernel:
            raise ShapeError('Layer {} window {} larger than input {} from {}'.format(
                spec.name, spec.kernel, tuple(in_shape), prev))

    def out_shape(self, spec, in_shape):
        c, h, w = in_shape
        s = spec.stride
        return (c, (h - spec.kernel) // s + 1, (w - spec.kernel) // s + 1)

    def param_count(self, spec, in_shape):
        return 0

    def init(self, spec, in_shape, rng, dtype):
        return np.zeros(0, dtype=dtype)

    def forward(self, spec, flat, x, training):
        k, s = spec.kernel, spec.stride
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        windows = windows.reshape(windows.shape[:4] + (k * k,))
        arg = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, spec, flat, cache, dy):
        x_shape, arg = cache
        k, s = spec.kernel, spec.stride
        _, _, ho, wo = dy.shape
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for pos in range(k * k):
            i, j = divmod(pos, k)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dy * (arg == pos)
        return dx, np.zeros(0, dtype=dy.dtype)


class Flatten:
    def check(self, spec, in_shape, prev):
        pass

    def out_shape(self, spec, in_shape):
        return (int(np.prod(in_shape)),)

    def param_count(self, spec, in_shape):
        return 0

    def init(self, spec, in_shape, rng, dtype):
        return np.zeros(0, dtype=dtype)

    def forward(self, spec, flat, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, spec, flat, cache, dy):
        return dy.reshape(cache), np.zeros(0, dtype=dy.dtype)


class ReLU:
    def check(self, spec, in_shape, prev):
        pass

    def out_shape(self, spec, in_shape):
        return tuple(in_shape)

    def param_count(self, spec, in_shape):
        return 0

    def init(self, spec, in_shape, rng, dtype):
        return np.zeros(0, dtype=dtype)

    def forward(self, spec, flat, x, training):
        mask = x > 0
        return x * mask, mask

    def backward(self, spec, flat, cache, dy):
        return dy * cache, np.zeros(0, dtype=dy.dtype)


class BatchNorm:
    """
    Batch normalization over the channel axis (axis 1) of (N, C) or (N, C, H, W).
    Running statistics live in the flat array and travel with the parameters.
    """

    def check(self, spec, in_shape, prev):
        num = _need(spec, 'num_features')
        if len(in_shape) not in (1, 3) or in_shape[0] != num:
            raise ShapeError('Layer {} normalizes {} channels but {} produces {}'.format(
                spec.name, num, prev, tuple(in_shape)))

    def out_shape(self, spec, in_shape):
        return tuple(in_shape)

    def param_count(self, spec, in_shape):
        return 4 * spec.num_features

    def init(self, spec, in_shape, rng, dtype):
        c = spec.num_features
        return np.concatenate([np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)]).astype(dtype)

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, spec, flat, x, training):
        c = spec.num_features
        gamma, beta, r_mean, r_var = flat[:c], flat[c:2 * c], flat[2 * c:3 * c], flat[3 * c:]
        axes = self._axes(x)
        if training:
            mean = x.mean(axis=axes, dtype=np.float64).astype(x.dtype)
            var = x.var(axis=axes, dtype=np.float64).astype(x.dtype)
        else:
            mean, var = r_mean, r_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        out = self._bcast(gamma, x) * xhat + self._bcast(beta, x)
        m = x.size // c
        return out, (xhat, inv_std, m, training, mean, var)

    def backward(self, spec, flat, cache, dy):
        c = spec.num_features
        gamma = flat[:c]
        xhat, inv_std, m, training, _, _ = cache
        axes = self._axes(dy)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        scale = self._bcast(gamma * inv_std, dy)
        if training:
            dx = scale / m * (m * dy - self._bcast(dbeta, dy) - xhat * self._bcast(dgamma, dy))
        else:
            dx = scale * dy
        zeros = np.zeros(2 * c, dtype=dy.dtype)
        return dx, np.concatenate([dgamma, dbeta, zeros])

    def running_update(self, spec, flat, cache):
        """New flat array with running mean/var moved toward the batch statistics."""
        c = spec.num_features
        _, _, m, training, mean, var = cache
        if not training:
            return flat
        unbiased = var * (m / (m - 1)) if m > 1 else var
        new = flat.copy()
        new[2 * c:3 * c] = (1 - BN_MOMENTUM) * flat[2 * c:3 * c] + BN_MOMENTUM * mean
        new[3 * c:] = (1 - BN_MOMENTUM) * flat[3 * c:] + BN_MOMENTUM * unbiased
        return new


KERNELS = {
    'dense': Dense(),
    'conv2d': Conv2d(),
    'maxpool2d': MaxPool2d(),
    'flatten': Flatten(),
    'relu': ReLU(),
    'batchnorm': BatchNorm(),
}


def infer_shapes(specs, input_shape) -> Tuple[tuple, ...]:
    """Output shape of every layer, validating that consecutive layers compose."""
    shapes = []
    shape = tuple(input_shape)
    prev = 'input'
    for spec in specs:
        kernel = KERNELS[spec.kind]
        kernel.check(spec, shape, prev)
        shape = tuple(kernel.out_shape(spec, shape))
        shapes.append(shape)
        prev = spec.name
    return tuple(shapes)
