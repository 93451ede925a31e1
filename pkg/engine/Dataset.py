"""
fedcmd-sim federated learning simulator

(C) 2024

datasets: synthetic Gaussian blobs and IDX (MNIST-family) files

IDX layout (big endian):
    [offset] [type]          [value]          [description]
    0000     32 bit integer  0x00000803(2051) magic number, images
    0004     32 bit integer  N                number of images
    0008     32 bit integer  rows
    0012     32 bit integer  columns
    0016     unsigned byte   ??               pixels, row-wise
labels use magic 0x00000801(2049), one count and then one byte per label.
Files ending in .gz are read through gzip.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import entropy

from engine.Errors import DatasetError, IdxFormatError, IdxTruncatedError, IdxCountMismatchError
from engine.FedLogger import LOGGER

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) < 1:
            raise DatasetError('A dataset needs at least one sample')
        if len(self.inputs) != len(self.labels):
            raise DatasetError('Inputs ({}) and labels ({}) differ in length'.format(len(self.inputs), len(self.labels)))
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError('Labels must lie in [0, {}), found range [{}, {}]'.format(
                self.num_classes, self.labels.min(), self.labels.max()))

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


def class_histogram(labels, num_classes) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)


def label_entropy(labels, num_classes) -> float:
    """Shannon entropy (nats) of the label distribution."""
    hist = class_histogram(labels, num_classes)
    if hist.sum() == 0:
        return 0.0
    return float(entropy(hist))


def generate_synthetic(num_classes, samples_per_class, input_shape, class_separation, seed) -> Dataset:
    """
    Unit-variance Gaussian blobs, one per class. When the input has at least
    num_classes dimensions the class means sit on scaled axes so every pair of
    means is exactly class_separation apart; otherwise means are random
    directions of length class_separation.
    """
    if num_classes < 2:
        raise DatasetError('Need at least 2 classes, got {}'.format(num_classes))
    if class_separation <= 0:
        raise DatasetError('Class separation must be positive, got {}'.format(class_separation))
    if samples_per_class < 1:
        raise DatasetError('Need at least one sample per class, got {}'.format(samples_per_class))
    input_shape = tuple(int(d) for d in input_shape)
    dim = int(np.prod(input_shape))
    rng = np.random.default_rng(seed)

    if dim >= num_classes:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = class_separation / np.sqrt(2.0)
    else:
        directions = rng.standard_normal((num_classes, dim))
        means = class_separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((len(labels), dim))
    inputs = (means[labels] + noise).astype(np.float32).reshape((len(labels),) + input_shape)
    return Dataset(inputs, labels.astype(np.int64), num_classes)


def _open(path, mode='rb'):
    return gzip.open(path, mode) if str(path).endswith('.gz') else open(path, mode)


def _read(path):
    try:
        with _open(path) as f:
            return f.read()
    except OSError as ex:
        LOGGER.error('Failed to open {}: {}'.format(path, ex))
        raise DatasetError('Cannot read {}: {}'.format(path, ex)) from ex


def load_idx(images_path, labels_path, num_classes=None) -> Dataset:
    """Images scaled to [0, 1] with shape (N, 1, rows, cols)."""
    raw_images = _read(images_path)
    raw_labels = _read(labels_path)

    if len(raw_images) < 16:
        raise IdxTruncatedError('Image file {} is truncated (header)'.format(images_path))
    magic, count, rows, cols = struct.unpack('>IIII', raw_images[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError('Image file {} has magic 0x{:08x}, expected 0x{:08x}'.format(
            images_path, magic, IDX_IMAGE_MAGIC))
    if len(raw_images) < 16 + count * rows * cols:
        raise IdxTruncatedError('Image file {} declares {} images but is truncated'.format(images_path, count))

    if len(raw_labels) < 8:
        raise IdxTruncatedError('Label file {} is truncated (header)'.format(labels_path))
    lmagic, lcount = struct.unpack('>II', raw_labels[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError('Label file {} has magic 0x{:08x}, expected 0x{:08x}'.format(
            labels_path, lmagic, IDX_LABEL_MAGIC))
    if len(raw_labels) < 8 + lcount:
        raise IdxTruncatedError('Label file {} declares {} labels but is truncated'.format(labels_path, lcount))
    if lcount != count:
        raise IdxCountMismatchError('{} has {} images but {} has {} labels'.format(
            images_path, count, labels_path, lcount))

    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=count * rows * cols, offset=16)
    inputs = (pixels.astype(np.float32) / 255.0).reshape(count, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    LOGGER.info('{} images loaded from {} ({}x{}, {} classes)'.format(count, images_path, rows, cols, num_classes))
    return Dataset(inputs, labels, num_classes)


def write_idx(data: Dataset, images_path, labels_path):
    """Inverse of load_idx for single-channel data with values in [0, 1]."""
    if data.inputs.ndim != 4 or data.inputs.shape[1] != 1:
        raise DatasetError('IDX export needs (N, 1, rows, cols) inputs, got {}'.format(data.inputs.shape))
    n, _, rows, cols = data.inputs.shape
    pixels = np.rint(np.clip(data.inputs, 0.0, 1.0) * 255.0).astype(np.uint8)
    with _open(images_path, 'wb') as f:
        f.write(struct.pack('>IIII', IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with _open(labels_path, 'wb') as f:
        f.write(struct.pack('>II', IDX_LABEL_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())
