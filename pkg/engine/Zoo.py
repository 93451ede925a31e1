"""
fedcmd-sim federated learning simulator

(C) 2024

model architectures

lenet5      conv1, conv2, fc1(120), fc2(84), classifier
lenet5-1fc  conv1, conv2, fc1(120), classifier
lenet5-3fc  conv1, conv2, fc1(120), fc2(84), fc3(64), classifier
mlp3        fc1, fc2, classifier on flattened input

A conv block is conv -> batch-norm -> ReLU -> 2x2 max-pool, all reporting
under the conv layer's block name.
"""

from dataclasses import replace

import numpy as np

from engine.Errors import ConfigError
from engine.Layers import LayerSpec


def _conv_block(name, in_channels, out_channels):
    return [
        LayerSpec('conv2d', name, in_channels=in_channels, out_channels=out_channels, kernel=5, stride=1, pad=0),
        LayerSpec('batchnorm', name + '.bn', num_features=out_channels, block=name),
        LayerSpec('relu', name + '.relu', block=name),
        LayerSpec('maxpool2d', name + '.pool', kernel=2, stride=2, block=name),
    ]


def _dense_block(name, in_features, out_features, relu=True):
    layers = [LayerSpec('dense', name, in_features=in_features, out_features=out_features)]
    if relu:
        layers.append(LayerSpec('relu', name + '.relu', block=name))
    return layers


def _dense_stack(in_features, widths, num_classes):
    specs = []
    for i, width in enumerate(widths):
        specs += _dense_block('fc{}'.format(i + 1), in_features, width)
        in_features = width
    specs += _dense_block('classifier', in_features, num_classes, relu=False)
    return specs


def _lenet(input_shape, num_classes, widths):
    if len(input_shape) != 3:
        raise ConfigError('LeNet5 variants need (C, H, W) input, got {}'.format(tuple(input_shape)))
    c, h, w = input_shape
    specs = _conv_block('conv1', c, 6) + _conv_block('conv2', 6, 16)
    h, w = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
    if h <= 0 or w <= 0:
        raise ConfigError('Input {} is too small for LeNet5'.format(tuple(input_shape)))
    specs.append(LayerSpec('flatten', 'flatten'))
    return specs + _dense_stack(16 * h * w, widths, num_classes)


def _mlp3(input_shape, num_classes, hidden=(64, 32)):
    specs = []
    if len(input_shape) > 1:
        specs.append(LayerSpec('flatten', 'flatten'))
    return specs + _dense_stack(int(np.prod(input_shape)), hidden, num_classes)


ARCHITECTURES = {
    'lenet5': lambda shape, k: _lenet(shape, k, (120, 84)),
    'lenet5-1fc': lambda shape, k: _lenet(shape, k, (120,)),
    'lenet5-3fc': lambda shape, k: _lenet(shape, k, (120, 84, 64)),
    'mlp3': _mlp3,
}


def model_specs(model_id, input_shape, num_classes):
    try:
        builder = ARCHITECTURES[model_id]
    except KeyError:
        raise ConfigError('Unknown model {}; choose one of {}'.format(model_id, sorted(ARCHITECTURES)))
    input_shape = tuple(int(d) for d in input_shape)
    specs = builder(input_shape, num_classes)
    # the first layer carries the input shape so the list builds on its own
    return [replace(specs[0], in_shape=input_shape)] + specs[1:]
