"""
fedcmd-sim federated learning simulator

(C) 2024

binary model checkpoints

    [offset] [type]          [description]
    0000     4 bytes         magic b'FCMD'
    0004     uint16 LE       format version
    0006     uint16 LE       reserved (0)
    0008     32 bytes        sha256 digest of the layer specs + input shape
    0040     float32 LE[]    parameters, layer by layer in spec order
"""

import hashlib
import json
import struct

import numpy as np

from engine.Errors import CheckpointError
from engine.FedLogger import LOGGER

MAGIC = b'FCMD'
VERSION = 1
HEADER = struct.Struct('<4sHH32s')


def spec_digest(model) -> bytes:
    doc = {'specs': [s.to_dict() for s in model.specs], 'input_shape': list(model.input_shape)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode('utf-8')).digest()


def save_checkpoint(model, path):
    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, VERSION, 0, spec_digest(model)))
        for spec in model.specs:
            f.write(np.asarray(model.params[spec.name], dtype='<f4').tobytes())
    LOGGER.debug('checkpoint: wrote {} ({} parameters)'.format(path, model.param_count))


def load_checkpoint(path, template):
    """Parameters from path installed into a model with template's architecture."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as ex:
        LOGGER.error('Failed to open {}: {}'.format(path, ex))
        raise CheckpointError('Cannot read checkpoint {}: {}'.format(path, ex)) from ex
    if len(raw) < HEADER.size:
        raise CheckpointError('Checkpoint {} is truncated (no header)'.format(path))
    magic, version, _, digest = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError('Checkpoint {} has bad magic {!r}'.format(path, magic))
    if version != VERSION:
        raise CheckpointError('Checkpoint {} has unsupported version {}'.format(path, version))
    if digest != spec_digest(template):
        raise CheckpointError('Checkpoint {} was written for a different architecture (spec digest mismatch)'.format(path))

    params = {}
    offset = HEADER.size
    for spec in template.specs:
        size = template.params[spec.name].size
        end = offset + 4 * size
        if end > len(raw):
            raise CheckpointError('Checkpoint {} is truncated in layer {}'.format(path, spec.name))
        params[spec.name] = np.frombuffer(raw, dtype='<f4', count=size, offset=offset).astype(template.dtype)
        offset = end
    if offset != len(raw):
        raise CheckpointError('Checkpoint {} has {} trailing bytes'.format(path, len(raw) - offset))
    return template.with_params(params)
