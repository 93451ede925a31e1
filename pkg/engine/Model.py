"""
fedcmd-sim federated learning simulator

(C) 2024

model, forward/backward passes, mini-batch SGD and body/head decoupling
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine.Errors import ModelError, ShapeError, LayerError, NumericError
from engine.FedLogger import LOGGER
from engine.Layers import KERNELS, LayerSpec, VOTABLE, infer_shapes


@dataclass(frozen=True, eq=False)
class Model:
    specs: Tuple[LayerSpec, ...]
    params: Dict[str, np.ndarray]
    seed: int
    input_shape: Tuple[int, ...]
    shapes: Tuple[Tuple[int, ...], ...]
    dtype: type = np.float32

    @property
    def layer_names(self) -> List[str]:
        return [s.name for s in self.specs]

    @property
    def parameterized_names(self) -> List[str]:
        return [s.name for s in self.specs if s.parameterized]

    @property
    def votable_names(self) -> List[str]:
        """Layers that may become the personalized head (conv and dense)."""
        return [s.name for s in self.specs if s.kind in VOTABLE]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def spec(self, name) -> LayerSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise LayerError('Unknown layer {}; layers are {}'.format(name, self.layer_names))

    def layer_size(self, name) -> int:
        return int(self.params[name].size)

    def block_outputs(self) -> Dict[str, str]:
        """block name -> name of the last layer in that block, in spec order."""
        out = {}
        for s in self.specs:
            out[s.block_name] = s.name
        return out

    def param_vector(self) -> np.ndarray:
        return pack_layers(self.params, self.parameterized_names, self.dtype)

    def with_params(self, params) -> 'Model':
        merged = {s.name: np.asarray(params.get(s.name, self.params[s.name]), dtype=self.dtype)
                  for s in self.specs}
        for s in self.specs:
            if merged[s.name].shape != self.params[s.name].shape:
                raise ShapeError('Layer {} expects {} parameters, received {}'.format(
                    s.name, self.params[s.name].size, merged[s.name].size))
        return Model(self.specs, merged, self.seed, self.input_shape, self.shapes, self.dtype)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    activations: Dict[str, np.ndarray]
    blocks: Dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.activations)

    def block_output(self, block) -> np.ndarray:
        return self.activations[self.blocks.get(block, block)]


@dataclass(frozen=True, eq=False)
class ParamPartition:
    body: Dict[str, np.ndarray]
    head: Dict[str, np.ndarray]
    head_layer: str

    def head_vector(self) -> np.ndarray:
        return np.concatenate([self.head[k].ravel() for k in self.head])

    def body_vector(self, order) -> np.ndarray:
        return np.concatenate([self.body[k].ravel() for k in order if k in self.body])


def pack_layers(params, names, dtype=np.float32) -> np.ndarray:
    arrays = [np.asarray(params[n], dtype=dtype).ravel() for n in names]
    return np.concatenate(arrays) if arrays else np.zeros(0, dtype=dtype)


def unpack_layers(vector, sizes: Dict[str, int], names) -> Dict[str, np.ndarray]:
    out = {}
    offset = 0
    for n in names:
        out[n] = np.array(vector[offset:offset + sizes[n]])
        offset += sizes[n]
    if offset != len(vector):
        raise ShapeError('Parameter vector has {} values, layers {} need {}'.format(len(vector), list(names), offset))
    return out


def build_model(specs: Sequence[LayerSpec], seed: int, input_shape=None, dtype=np.float32) -> Model:
    specs = tuple(specs)
    if not specs:
        raise ModelError('Cannot build a model from an empty layer list')
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ModelError('Layer names must be unique, repeated: {}'.format(dupes))
    first = specs[0]
    if input_shape is None:
        if first.in_shape is not None:
            input_shape = first.in_shape
        elif first.kind == 'dense':
            input_shape = (first.in_features,)
        elif first.kind == 'batchnorm':
            input_shape = (first.num_features,)
        else:
            raise ShapeError('Model starting with {} layer {} needs an explicit input shape'.format(first.kind, first.name))
    input_shape = tuple(int(d) for d in input_shape)
    if first.in_shape is not None and first.in_shape != input_shape:
        raise ShapeError('Layer {} was declared for input {}, received {}'.format(
            first.name, first.in_shape, input_shape))
    shapes = infer_shapes(specs, input_shape)

    rng = np.random.default_rng(seed)
    params = {}
    for spec, in_shape in zip(specs, (input_shape,) + shapes[:-1]):
        params[spec.name] = KERNELS[spec.kind].init(spec, in_shape, rng, dtype)
    LOGGER.debug('build_model: {} layers, {} parameters, seed {}'.format(
        len(specs), sum(p.size for p in params.values()), seed))
    return Model(specs, params, int(seed), input_shape, shapes, dtype)


def _check_batch(model, batch):
    if tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError('Expected batch of shape (N, {}), received {}'.format(
            ', '.join(str(d) for d in model.input_shape), tuple(batch.shape)))


def _run(model, x, training):
    caches = []
    activations = {}
    for spec in model.specs:
        x, cache = KERNELS[spec.kind].forward(spec, model.params[spec.name], x, training)
        activations[spec.name] = x
        caches.append(cache)
    return x, activations, caches


def forward(model: Model, batch, training=False):
    """Logits for a batch plus the activation of every layer."""
    batch = np.asarray(batch, dtype=model.dtype)
    _check_batch(model, batch)
    logits, activations, _ = _run(model, batch, training)
    return logits, ForwardTrace(activations, model.block_outputs())


def softmax_cross_entropy(logits, labels):
    """Mean loss (float64) and its gradient with respect to the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -log_probs[np.arange(n), labels].sum() / n
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def first_nonfinite_layer(model: Model, inputs) -> Optional[str]:
    """First layer whose training-mode output is not all finite, or None."""
    x = np.asarray(inputs, dtype=model.dtype)
    for spec in model.specs:
        x, _ = KERNELS[spec.kind].forward(spec, model.params[spec.name], x, True)
        if not np.all(np.isfinite(x)):
            return spec.name
    return None


def loss_and_grads(model: Model, inputs, labels, training=True):
    """Loss, per-layer gradients and forward caches for one mini-batch."""
    x = np.asarray(inputs, dtype=model.dtype)
    _check_batch(model, x)
    logits, _, caches = _run(model, x, training)
    loss, dy = softmax_cross_entropy(logits, np.asarray(labels))
    grads = {}
    for spec, cache in zip(reversed(model.specs), reversed(caches)):
        dy, grads[spec.name] = KERNELS[spec.kind].backward(spec, model.params[spec.name], cache, dy)
    return loss, grads, caches


def sgd_epoch(model: Model, data, lr: float, batch_size: int, shuffle_seed=None) -> Tuple[Model, float]:
    """
    One pass of mini-batch SGD over data (anything with .inputs/.labels).
    shuffle_seed fixes the sample order; None keeps the stored order.
    Returns the updated model and the mean training loss of the pass.
    A zero step size leaves the model untouched, batch-norm statistics included.
    """
    if lr < 0:
        raise ModelError('Learning rate must be non-negative, got {}'.format(lr))
    if batch_size < 1:
        raise ModelError('Batch size must be at least 1, got {}'.format(batch_size))
    n = len(data.labels)
    if n == 0:
        raise ModelError('Cannot train on an empty dataset')
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)

    params = dict(model.params)
    current = model
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, grads, caches = loss_and_grads(current, data.inputs[idx], data.labels[idx], training=True)
        if not np.isfinite(loss):
            layer = first_nonfinite_layer(current, data.inputs[idx]) or 'loss'
            raise NumericError('non-finite training loss {} (first non-finite output: {})'.format(loss, layer),
                               layer=layer)
        total += loss * len(idx)
        if lr == 0:
            continue
        for spec, cache in zip(current.specs, caches):
            if not spec.parameterized:
                continue
            grad = grads[spec.name]
            if not np.all(np.isfinite(grad)):
                raise NumericError('non-finite gradient in layer {}'.format(spec.name), layer=spec.name)
            updated = (params[spec.name] - lr * grad).astype(model.dtype)
            if spec.kind == 'batchnorm':
                updated = KERNELS['batchnorm'].running_update(spec, updated, cache)
            params[spec.name] = updated
        current = current.with_params(params)
    return current, total / n


def predict(model: Model, inputs, batch_size=256) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=model.dtype)
    out = []
    for start in range(0, len(inputs), batch_size):
        logits, _ = forward(model, inputs[start:start + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def split_params(model: Model, head_layer: str) -> ParamPartition:
    """Decouple the parameters into body (all other layers) and head (head_layer)."""
    valid = model.parameterized_names
    if head_layer not in model.layer_names:
        raise LayerError('Unknown head layer {}; parameterized layers are {}'.format(head_layer, valid))
    if head_layer not in valid:
        raise LayerError('Layer {} has no parameters and cannot be a head; parameterized layers are {}'.format(
            head_layer, valid))
    body = {n: model.params[n].copy() for n in valid if n != head_layer}
    head = {head_layer: model.params[head_layer].copy()}
    return ParamPartition(body, head, head_layer)


def merge_params(partition: ParamPartition, model: Model) -> Dict[str, np.ndarray]:
    """Reassemble body and head into a full parameter dict for model."""
    both = sorted(set(partition.body) & set(partition.head))
    if both:
        raise LayerError('Layer {} appears in both body and head'.format(', '.join(both)))
    union = set(partition.body) | set(partition.head)
    for name in model.parameterized_names:
        if name not in union:
            raise LayerError('Partition is missing layer {}'.format(name))
    extra = sorted(union - set(model.parameterized_names))
    if extra:
        raise LayerError('Partition has layers the model does not: {}'.format(extra))
    merged = {}
    for spec in model.specs:
        if spec.name in partition.head:
            merged[spec.name] = partition.head[spec.name]
        elif spec.name in partition.body:
            merged[spec.name] = partition.body[spec.name]
        else:
            merged[spec.name] = model.params[spec.name]
    return merged
