#!/usr/bin/env python3
"""
This is a federated learning simulator written in Python3.
It runs personalized-layer selection followed by similarity-weighted
decoupled training, against FedAvg, local-only and fixed-head baselines,
on simulated clients in one process.

(c) 2024
"""
import sys

from engine.FedLogger import LOGGER

VERSION = '0.3.0'

"""
0.3.0
DONE: sweep command over rho or alpha, one sub-directory per value
DONE: per-round similarity matrices as CSV (output.dump_similarity)
DONE: checkpoints every output.checkpoint_every rounds
DONE: head-layer uploads reported in their own bytes_similarity column

0.2.1
DONE: selection.final_vote pooled as an alternative to the mode of round winners
DONE: selection.label_encoding index as an alternative to one-hot labels
DONE: fixed-head baseline takes experiment.head_layer

0.2.0
DONE: worker threads for client training, results gathered in client order
DONE: report command: comparison table, accuracy, cumulative bytes and class histogram CSVs
DONE: --dry-run prints the closed-form communication prediction

0.1.0
DONE: LeNet5 variants and a dense mlp3
DONE: IDX loader, synthetic blobs, Dirichlet partition plans
DONE: fedcmd, fedavg and local-only strategies

LATER: resume a run from its last checkpoint
"""

from nodes.Commands import main

if __name__ == "__main__":
    try:
        LOGGER.debug('fedcmd-sim {}'.format(VERSION))
        code = main()
    except (KeyboardInterrupt, SystemExit) as ex:
        LOGGER.warning("Received interrupt or exit...")
        code = ex.code if isinstance(ex, SystemExit) else 130
    except Exception as err:
        LOGGER.error('Exception: {0}'.format(err), exc_info=True)
        code = 1
    sys.exit(code)
