"""
shared fixtures: a small separable blob task and a fast experiment on it
"""

import numpy as np
import pytest

from engine.Config import DatasetSource, ExperimentFile, OutputSpec, RunConfig, dump_experiment
from engine.Dataset import generate_synthetic
from nodes.Controller import Controller

TINY_RUN = dict(strategy='fedcmd', rounds=6, rho=0.5, gamma=0.5, local_epochs=1, batch_size=16, lr=0.05,
                num_clients=6, alpha=0.5, eval_every=2, workers=1, model='mlp3', master_seed=11)
TINY_DATA = dict(source='synthetic', num_classes=4, samples_per_class=40, input_shape=(8,), class_separation=5.0)


def tiny_experiment(outdir, output=None, **run) -> ExperimentFile:
    settings = dict(TINY_RUN)
    settings.update(run)
    return ExperimentFile(RunConfig(**settings), DatasetSource(**TINY_DATA),
                          OutputSpec(dir=str(outdir), **(output or {})))


def tiny_data():
    return generate_synthetic(4, 40, (8,), 5.0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return tiny_data()


@pytest.fixture
def make_experiment(tmp_path):
    def make(name='out', output=None, **run):
        return tiny_experiment(tmp_path / name, output, **run)
    return make


@pytest.fixture
def run_controller(make_experiment):
    """Run a tiny experiment end to end; returns (controller, report)."""
    def run(name='out', keep_payloads=False, hook=None, output=None, **settings):
        controller = Controller(make_experiment(name, output, **settings), tiny_data(), keep_payloads=keep_payloads)
        controller.checkParams()
        controller.discover_nodes()
        controller.similarity_hook = hook
        return controller, controller.start()
    return run


@pytest.fixture
def experiment_file(tmp_path):
    """The tiny experiment written as YAML; returns its path."""
    def write(name='exp.yaml', **overrides):
        exp = tiny_experiment(tmp_path / 'out', **overrides)
        path = tmp_path / name
        dump_experiment(exp, path)
        return path
    return write
