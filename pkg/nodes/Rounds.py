"""
fedcmd-sim federated learning simulator

(C) 2024

round helpers: client sampling, evaluation over all clients and
communication accounting
"""

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from engine.Config import RunConfig, join_count
from engine.Dataset import class_histogram
from engine.Errors import ProtocolError
from engine.Model import Model, predict
from engine.Partition import ClientShard
from engine.Report import Evaluation, RoundRecord

BYTES_PER_PARAM = 4


def sample_clients(round_no, gamma, num_clients, seed) -> List[int]:
    """ceil(gamma * N) distinct ids, sorted, fixed by (seed, round)."""
    count = join_count(gamma, num_clients)
    if count >= num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng([int(seed), int(round_no)])
    return sorted(int(c) for c in rng.choice(num_clients, size=count, replace=False))


def evaluate_all(models: Dict[int, Model], shards: Dict[int, ClientShard], num_classes) -> Evaluation:
    """
    Test accuracy of every client's model on its own test shard, plus
    per-class accuracy pooled over all test shards. Classes with no test
    samples get None.
    """
    if not models:
        raise ProtocolError('Nothing to evaluate')
    correct = np.zeros(num_classes, dtype=np.int64)
    counts = np.zeros(num_classes, dtype=np.int64)
    per_client = {}
    for cid in sorted(models):
        test = shards[cid].test
        hit = predict(models[cid], test.inputs) == test.labels
        per_client[cid] = float(hit.mean())
        correct += class_histogram(test.labels[hit], num_classes)
        counts += class_histogram(test.labels, num_classes)
    accs = np.array([per_client[c] for c in sorted(per_client)])
    per_class = [float(correct[c] / counts[c]) if counts[c] else None for c in range(num_classes)]
    return Evaluation(per_client, per_class, [int(n) for n in counts], mean=float(accs.mean()),
                      std=float(accs.std()), pooled=float(correct.sum() / counts.sum()))


def account_communication(records: List[RoundRecord]) -> List[int]:
    """Cumulative up + down bytes after each round."""
    total = 0
    out = []
    for record in records:
        total += record.bytes_up + record.bytes_down
        out.append(total)
    return out


@dataclass
class CommPrediction:
    formula: str
    per_round: Optional[List[int]]
    similarity_per_round: Optional[List[int]]

    @property
    def total(self) -> Optional[int]:
        return None if self.per_round is None else int(sum(self.per_round))

    @property
    def similarity_total(self) -> Optional[int]:
        return None if self.similarity_per_round is None else int(sum(self.similarity_per_round))


def predict_communication(config: RunConfig, theta_size, head_size=None) -> CommPrediction:
    """
    Closed-form up + down bytes per round. For fedcmd the head size is only
    known once the layer is chosen; without it the formula is returned alone.
    """
    k, c, b = config.rounds, config.clients_per_round, BYTES_PER_PARAM
    strategy = config.strategy
    if strategy == 'local-only':
        return CommPrediction('0', [0] * k, [0] * k)
    if strategy == 'fedavg':
        formula = '{b}*K*|C|*2|theta| = {b}*{k}*{c}*2*{t}'.format(b=b, k=k, c=c, t=theta_size)
        return CommPrediction(formula, [b * c * 2 * theta_size] * k, [0] * k)

    kp = config.selection_rounds
    phi = '|phi|' if head_size is None else str(head_size)
    if strategy == 'fixed-head':
        formula = '{b}*K*|C|*(2|theta|-2|phi|) = {b}*{k}*{c}*(2*{t}-2*{p})'.format(
            b=b, k=k, c=c, t=theta_size, p=phi)
        first = 0
    elif strategy == 'fedcmd':
        formula = ('{b}*K_p*|C|*2|theta| + {b}*(K-K_p)*|C|*(2|theta|-2|phi|) = '
                   '{b}*{kp}*{c}*2*{t} + {b}*{rest}*{c}*(2*{t}-2*{p})').format(
            b=b, kp=kp, rest=k - kp, c=c, t=theta_size, p=phi)
        first = kp
    else:
        raise ProtocolError('No communication model for strategy {}'.format(strategy))
    if head_size is None:
        return CommPrediction(formula, None, None)
    per_round = [b * c * 2 * theta_size] * first + [b * c * (2 * theta_size - 2 * head_size)] * (k - first)
    similarity = [0] * first + [b * c * head_size] * (k - first)
    return CommPrediction(formula, per_round, similarity)
