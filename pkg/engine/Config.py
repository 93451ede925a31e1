"""
fedcmd-sim federated learning simulator

(C) 2024

experiment configuration

An experiment file is YAML with the sections below; every key is optional and
defaults to the published setup (K=200, E=5, batch 32, lr 0.01, join ratio 0.1,
division ratio 0.1, epsilon 1e-8, 100 clients). See EXPERIMENT_CONFIG.md.

    experiment:  strategy rounds rho gamma local_epochs batch_size lr
                 num_clients alpha eval_every workers model head_layer
    seeds:       master data sampling
    aggregation: split_mode epsilon
    selection:   final_vote label_encoding
    dataset:     source num_classes samples_per_class input_shape
                 class_separation images labels
    output:      dir checkpoint_every dump_similarity
"""

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

import numpy as np
import yaml

from engine.Aggregation import SPLIT_MODES
from engine.Errors import ConfigError
from engine.FedLogger import LOGGER
from engine.Selection import FINAL_VOTES

STRATEGIES = ('fedcmd', 'fedavg', 'local-only', 'fixed-head')
LABEL_ENCODINGS = ('onehot', 'index')
SOURCES = ('synthetic', 'idx')


def half_up(x) -> int:
    return int(math.floor(x + 0.5))


def join_count(gamma, num_clients) -> int:
    """Clients per round, ceil(gamma * N) with float noise removed."""
    return int(math.ceil(round(gamma * num_clients, 9)))


def derive_seed(*entropy) -> int:
    """Independent 32-bit seed from a sequence of non-negative integers."""
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    strategy: str = 'fedcmd'
    rounds: int = 200
    rho: float = 0.1
    gamma: float = 0.1
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    num_clients: int = 100
    alpha: float = 0.1
    eval_every: int = 5
    workers: int = 1
    model: str = 'lenet5'
    head_layer: Optional[str] = None
    master_seed: int = 0
    data_seed: Optional[int] = None
    sampling_seed: Optional[int] = None
    split_mode: str = 'before_after'
    epsilon: float = 1e-8
    final_vote: str = 'round_modes'
    label_encoding: str = 'onehot'

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError("experiment.strategy '{}' is not one of {}".format(self.strategy, STRATEGIES))
        if self.rounds < 1:
            raise ConfigError('experiment.rounds must be >= 1, got {}'.format(self.rounds))
        if self.local_epochs < 1:
            raise ConfigError('experiment.local_epochs must be >= 1, got {}'.format(self.local_epochs))
        if not 0 < self.gamma <= 1:
            raise ConfigError('experiment.gamma must be in (0, 1], got {}'.format(self.gamma))
        if self.batch_size < 1:
            raise ConfigError('experiment.batch_size must be >= 1, got {}'.format(self.batch_size))
        if self.lr < 0:
            raise ConfigError('experiment.lr must be >= 0, got {}'.format(self.lr))
        if self.num_clients < 1:
            raise ConfigError('experiment.num_clients must be >= 1, got {}'.format(self.num_clients))
        if self.alpha <= 0:
            raise ConfigError('experiment.alpha must be > 0, got {}'.format(self.alpha))
        if self.eval_every < 1:
            raise ConfigError('experiment.eval_every must be >= 1, got {}'.format(self.eval_every))
        if self.workers < 1:
            raise ConfigError('experiment.workers must be >= 1, got {}'.format(self.workers))
        if self.epsilon <= 0:
            raise ConfigError('aggregation.epsilon must be > 0, got {}'.format(self.epsilon))
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError("aggregation.split_mode '{}' is not one of {}".format(self.split_mode, SPLIT_MODES))
        if self.final_vote not in FINAL_VOTES:
            raise ConfigError("selection.final_vote '{}' is not one of {}".format(self.final_vote, FINAL_VOTES))
        if self.label_encoding not in LABEL_ENCODINGS:
            raise ConfigError("selection.label_encoding '{}' is not one of {}".format(
                self.label_encoding, LABEL_ENCODINGS))
        for name in ('master_seed', 'data_seed', 'sampling_seed'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError('seeds.{} must be non-negative, got {}'.format(name.split('_')[0], value))
        if self.strategy == 'fedcmd':
            if not 0 < self.rho < 1:
                raise ConfigError('experiment.rho must be in (0, 1) for fedcmd, got {}'.format(self.rho))
            kp = self.selection_rounds
            if not 1 <= kp <= self.rounds - 1:
                raise ConfigError('rho={} with rounds={} gives {} selection rounds; need between 1 and {}'.format(
                    self.rho, self.rounds, kp, self.rounds - 1))

    @property
    def selection_rounds(self) -> int:
        """K_p, the rounds spent choosing the personalized layer."""
        return half_up(self.rho * self.rounds) if self.strategy == 'fedcmd' else 0

    @property
    def clients_per_round(self) -> int:
        return join_count(self.gamma, self.num_clients)

    @property
    def init_seed(self) -> int:
        return derive_seed(self.master_seed, 0)

    @property
    def partition_seed(self) -> int:
        return self.data_seed if self.data_seed is not None else derive_seed(self.master_seed, 1)

    @property
    def synthetic_seed(self) -> int:
        return derive_seed(self.partition_seed, 0)

    @property
    def sample_seed(self) -> int:
        return self.sampling_seed if self.sampling_seed is not None else derive_seed(self.master_seed, 2)

    def client_seed(self, client_id) -> int:
        return derive_seed(self.master_seed, 3, client_id)


@dataclass(frozen=True)
class DatasetSource:
    source: str = 'synthetic'
    num_classes: int = 10
    samples_per_class: int = 500
    input_shape: Tuple[int, ...] = (1, 28, 28)
    class_separation: float = 4.0
    images: Optional[str] = None
    labels: Optional[str] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError("dataset.source '{}' is not one of {}".format(self.source, SOURCES))
        if self.source == 'idx' and (not self.images or not self.labels):
            raise ConfigError('dataset.images and dataset.labels are required for idx sources')


@dataclass(frozen=True)
class OutputSpec:
    dir: str = 'runs/latest'
    checkpoint_every: int = 0
    dump_similarity: bool = False


@dataclass(frozen=True)
class ExperimentFile:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: DatasetSource = field(default_factory=DatasetSource)
    output: OutputSpec = field(default_factory=OutputSpec)


def _int(key, v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigError('{} must be an integer, got {!r}'.format(key, v))
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError('{} must be an integer, got {!r}'.format(key, v))


def _float(key, v):
    if isinstance(v, bool):
        raise ConfigError('{} must be a number, got {!r}'.format(key, v))
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError('{} must be a number, got {!r}'.format(key, v))


def _str(key, v):
    if not isinstance(v, (str, int, float)) or isinstance(v, bool):
        raise ConfigError('{} must be text, got {!r}'.format(key, v))
    return str(v)


def _bool(key, v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ('true', 'false', 'yes', 'no'):
        return v.lower() in ('true', 'yes')
    raise ConfigError('{} must be true or false, got {!r}'.format(key, v))


def _shape(key, v):
    if isinstance(v, (list, tuple)) and v:
        return tuple(_int(key, d) for d in v)
    raise ConfigError('{} must be a list of integers, got {!r}'.format(key, v))


def _optional(cast):
    return lambda key, v: None if v is None else cast(key, v)


# (section, key) -> (target, attribute, caster)
SCHEMA = {
    ('experiment', 'strategy'): ('run', 'strategy', _str),
    ('experiment', 'rounds'): ('run', 'rounds', _int),
    ('experiment', 'rho'): ('run', 'rho', _float),
    ('experiment', 'gamma'): ('run', 'gamma', _float),
    ('experiment', 'local_epochs'): ('run', 'local_epochs', _int),
    ('experiment', 'batch_size'): ('run', 'batch_size', _int),
    ('experiment', 'lr'): ('run', 'lr', _float),
    ('experiment', 'num_clients'): ('run', 'num_clients', _int),
    ('experiment', 'alpha'): ('run', 'alpha', _float),
    ('experiment', 'eval_every'): ('run', 'eval_every', _int),
    ('experiment', 'workers'): ('run', 'workers', _int),
    ('experiment', 'model'): ('run', 'model', _str),
    ('experiment', 'head_layer'): ('run', 'head_layer', _optional(_str)),
    ('seeds', 'master'): ('run', 'master_seed', _int),
    ('seeds', 'data'): ('run', 'data_seed', _optional(_int)),
    ('seeds', 'sampling'): ('run', 'sampling_seed', _optional(_int)),
    ('aggregation', 'split_mode'): ('run', 'split_mode', _str),
    ('aggregation', 'epsilon'): ('run', 'epsilon', _float),
    ('selection', 'final_vote'): ('run', 'final_vote', _str),
    ('selection', 'label_encoding'): ('run', 'label_encoding', _str),
    ('dataset', 'source'): ('dataset', 'source', _str),
    ('dataset', 'num_classes'): ('dataset', 'num_classes', _int),
    ('dataset', 'samples_per_class'): ('dataset', 'samples_per_class', _int),
    ('dataset', 'input_shape'): ('dataset', 'input_shape', _shape),
    ('dataset', 'class_separation'): ('dataset', 'class_separation', _float),
    ('dataset', 'images'): ('dataset', 'images', _optional(_str)),
    ('dataset', 'labels'): ('dataset', 'labels', _optional(_str)),
    ('output', 'dir'): ('output', 'dir', _str),
    ('output', 'checkpoint_every'): ('output', 'checkpoint_every', _int),
    ('output', 'dump_similarity'): ('output', 'dump_similarity', _bool),
}
SECTIONS = tuple(dict.fromkeys(section for section, _ in SCHEMA))


def parse_experiment(doc) -> ExperimentFile:
    """Validated ExperimentFile from an already-parsed YAML mapping."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError('Experiment file must be a mapping of sections, got {}'.format(type(doc).__name__))
    values = {'run': {}, 'dataset': {}, 'output': {}}
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError("Unknown config section '{}'; expected {}".format(section, list(SECTIONS)))
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError("Config section '{}' must be a mapping".format(section))
        for key, raw in body.items():
            dotted = '{}.{}'.format(section, key)
            if (section, key) not in SCHEMA:
                raise ConfigError("Unknown config key '{}'".format(dotted))
            target, attr, cast = SCHEMA[(section, key)]
            values[target][attr] = cast(dotted, raw)
    return ExperimentFile(RunConfig(**values['run']), DatasetSource(**values['dataset']),
                          OutputSpec(**values['output']))


def experiment_to_dict(exp: ExperimentFile) -> dict:
    doc = {section: {} for section in SECTIONS}
    for (section, key), (target, attr, _) in SCHEMA.items():
        value = getattr(getattr(exp, target), attr)
        doc[section][key] = list(value) if isinstance(value, tuple) else value
    return doc


def load_experiment(path) -> ExperimentFile:
    try:
        with open(path, encoding='utf-8') as f:
            doc = yaml.safe_load(f.read())
    except OSError as ex:
        LOGGER.error('Failed to open {}: {}'.format(path, ex))
        raise ConfigError('Cannot read experiment file {}: {}'.format(path, ex)) from ex
    except yaml.YAMLError as ex:
        LOGGER.error('load_experiment: Failed to parse {} content: {}'.format(path, ex))
        raise ConfigError('Experiment file {} is not valid YAML: {}'.format(path, ex)) from ex
    return parse_experiment(doc)


def dump_experiment(exp: ExperimentFile, path=None) -> str:
    text = yaml.safe_dump(experiment_to_dict(exp), sort_keys=False)
    if path is not None:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
    return text


def override(exp: ExperimentFile, **changes) -> ExperimentFile:
    """Replace RunConfig / OutputSpec fields, ignoring None values."""
    run_names = {f.name for f in fields(RunConfig)}
    out_names = {f.name for f in fields(OutputSpec)}
    run = {k: v for k, v in changes.items() if v is not None and k in run_names}
    out = {k: v for k, v in changes.items() if v is not None and k in out_names}
    unknown = set(changes) - run_names - out_names
    if unknown:
        raise ConfigError('Cannot override unknown settings {}'.format(sorted(unknown)))
    return ExperimentFile(replace(exp.run, **run), exp.dataset, replace(exp.output, **out))
