"""
fedcmd-sim federated learning simulator

(C) 2024

controller fedctrl

The server side of every strategy. It owns the client nodes, the broker and
the round loop:

fedcmd      selection rounds (fedavg on the full model, clients vote for the
            layer whose activations best track the input-to-label shift),
            then federated rounds with that layer kept local and the body
            combined by head similarity
fedavg      sample-weighted mean of the full model every round
local-only  no communication, clients only train
fixed-head  the federated rounds of fedcmd with a configured head layer
            (default: the last parameterized layer) from round 1
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional

import numpy as np

from engine.Aggregation import build_similarity, decoupled_update, fedavg
from engine.Checkpoint import save_checkpoint
from engine.Config import ExperimentFile, experiment_to_dict
from engine.Dataset import Dataset
from engine.Errors import ConfigError, ProtocolError
from engine.FedLogger import LOGGER
from engine.Model import Model, build_model, pack_layers, split_params, unpack_layers
from engine.Partition import PartitionPlan, dirichlet_partition, make_shards
from engine.Report import RoundRecord, RunReport, strategy_label
from engine.Selection import VoteLedger
from engine.Zoo import model_specs
from nodes.Broker import CONTROL_KINDS, PARAM_KINDS, PREFIX, Broker, decode_json, decode_vector, \
    encode_vector, parse_topic, topic
from nodes.FLClient import FLClient
from nodes.Node import Node
from nodes.Rounds import account_communication, evaluate_all, predict_communication, sample_clients


class Controller(Node):
    id = 'fedctrl'

    def __init__(self, experiment: ExperimentFile, data: Dataset, plan: Optional[PartitionPlan] = None,
                 keep_payloads=False, label=None):
        super().__init__('fedctrl', 'fedctrl', 'FedCMD')
        self.experiment = experiment
        self.config = experiment.run
        self.output = experiment.output
        self.data = data
        self.plan = plan
        self.label = label or strategy_label(self.config.strategy)
        self.broker = Broker(keep_payloads=keep_payloads)
        self.clients: Dict[int, FLClient] = {}
        self.inbox = {kind: {} for kind in PARAM_KINDS + CONTROL_KINDS}
        self.records: List[RoundRecord] = []
        self.global_model: Optional[Model] = None
        self.bodies: Dict[int, Dict[str, np.ndarray]] = {}
        self.ledger: Optional[VoteLedger] = None
        self.l_star: Optional[str] = None
        self.last_eval = None
        self.eval_mode = 'global'
        self.executor = None
        self.valid_configuration = False
        # test hook: heads -> SimilarityMatrix, replaces build_similarity
        self.similarity_hook: Optional[Callable] = None

    def checkParams(self):
        config = self.config
        specs = model_specs(config.model, self.data.input_shape, self.data.num_classes)
        self.global_model = build_model(specs, config.init_seed, self.data.input_shape)
        if self.plan is None:
            self.plan = dirichlet_partition(self.data, config.alpha, config.num_clients, config.partition_seed)
        elif self.plan.num_clients != config.num_clients:
            LOGGER.error('checkParams: plan has {} clients, experiment has {}'.format(
                self.plan.num_clients, config.num_clients))
            raise ConfigError('Partition plan lists {} clients but experiment.num_clients is {}'.format(
                self.plan.num_clients, config.num_clients))
        if config.strategy == 'fixed-head':
            split_params(self.global_model, self.fixed_head_layer())
        self.valid_configuration = True
        return True

    def fixed_head_layer(self) -> str:
        return self.config.head_layer or self.global_model.parameterized_names[-1]

    def discover_nodes(self):
        LOGGER.info('discovery start')
        for shard in make_shards(self.data, self.plan, self.config.partition_seed):
            client = FLClient(self, shard, self.global_model, self.config.client_seed(shard.client_id))
            client.subscribe(self.broker)
            self.clients[shard.client_id] = client
        self.broker.subscribe('{}/up/#'.format(PREFIX), self._on_message)
        LOGGER.info('Done adding {} client nodes.'.format(len(self.clients)))

    def _on_message(self, broker, userdata, message):
        direction, cid, kind = parse_topic(message.topic)
        if direction != 'up':
            raise ProtocolError('Controller received a download topic {}'.format(message.topic))
        if kind in PARAM_KINDS:
            self.inbox[kind][cid] = decode_vector(message.payload)
        else:
            self.inbox[kind][cid] = decode_json(message.payload)
        LOGGER.debug('Received {} from client {} ({} bytes)'.format(kind, cid, len(message.payload)))

    def mqtt_pub(self, name, payload):
        self.broker.publish(name, payload)

    def start(self) -> RunReport:
        if not self.valid_configuration:
            self.checkParams()
        if not self.clients:
            self.discover_nodes()
        config = self.config
        LOGGER.info('Start: {} for {} rounds, {} clients ({} per round), model {} with {} parameters'.format(
            config.strategy, config.rounds, config.num_clients, config.clients_per_round, config.model,
            self.global_model.param_count))
        self.executor = ThreadPoolExecutor(max_workers=config.workers, thread_name_prefix='client')
        try:
            self.runCmd(config.strategy)
        finally:
            self.stop()
        LOGGER.info('Start Done...')
        return self.build_report()

    def stop(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None

    # round plumbing

    def _begin_round(self, round_no) -> List[int]:
        self.broker.round = round_no
        for box in self.inbox.values():
            box.clear()
        return sample_clients(round_no, self.config.gamma, self.config.num_clients, self.config.sample_seed)

    def _train(self, sampled, round_no, vote=False):
        clients = [self.clients[c] for c in sampled]
        return list(self.executor.map(lambda client: client.train(round_no, vote), clients))

    def _gather(self, sampled):
        for cid in sampled:
            self.clients[cid].publish_update(self.broker)
        missing = [c for c in sampled if c not in self.inbox['status']]
        if missing:
            raise ProtocolError('No update from clients {}'.format(missing))

    def _counts(self, sampled):
        return {c: int(self.inbox['status'][c]['samples']) for c in sampled}

    def _eval_models(self) -> Dict[int, Model]:
        if self.eval_mode == 'personal':
            return {cid: c.personalized_model(self.bodies[cid]) for cid, c in self.clients.items()}
        if self.eval_mode == 'local':
            return {cid: c.model for cid, c in self.clients.items()}
        return {cid: self.global_model for cid in self.clients}

    def _finish_round(self, round_no, phase, sampled, results, winner=None):
        up, down, similarity = self.broker.round_bytes(round_no)
        loss = float(np.mean([r.loss for r in results]))
        record = RoundRecord(round_no, phase, list(sampled), loss, up, down, similarity, winner=winner)
        if round_no % self.config.eval_every == 0 or round_no == self.config.rounds:
            self.last_eval = evaluate_all(self._eval_models(), {c: n.shard for c, n in self.clients.items()},
                                          self.data.num_classes)
            record.acc_mean, record.acc_std = self.last_eval.mean, self.last_eval.std
            LOGGER.info('round {}/{} [{}]: loss {:.4f}, accuracy {:.4f} ± {:.4f}, bytes up {} down {}'.format(
                round_no, self.config.rounds, phase, loss, record.acc_mean, record.acc_std, up, down))
        else:
            LOGGER.info('round {}/{} [{}]: loss {:.4f}, bytes up {} down {}'.format(
                round_no, self.config.rounds, phase, loss, up, down))
        every = self.output.checkpoint_every
        if every and round_no % every == 0:
            self._checkpoint(round_no)
        self.records.append(record)
        return record

    def _checkpoint(self, round_no):
        base = os.path.join(self.output.dir, 'checkpoints')
        os.makedirs(base, exist_ok=True)
        if self.eval_mode == 'global':
            save_checkpoint(self.global_model, os.path.join(base, 'round_{:04d}.fcmd'.format(round_no)))
            return
        folder = os.path.join(base, 'round_{:04d}'.format(round_no))
        os.makedirs(folder, exist_ok=True)
        for cid, model in self._eval_models().items():
            save_checkpoint(model, os.path.join(folder, 'client_{:03d}.fcmd'.format(cid)))

    def _fedavg_round(self, round_no, phase, vote=False):
        theta = self.global_model
        sampled = self._begin_round(round_no)
        payload = encode_vector(theta.param_vector())
        for cid in sampled:
            self.mqtt_pub(topic('down', cid, 'theta'), payload)
        results = self._train(sampled, round_no, vote)
        self._gather(sampled)

        counts = self._counts(sampled)
        mean = fedavg([(self.inbox['theta'][c], counts[c]) for c in sampled])
        names = theta.parameterized_names
        self.global_model = theta.with_params(unpack_layers(mean, {n: theta.layer_size(n) for n in names}, names))

        winner = None
        if vote:
            votes = {}
            for cid in sampled:
                layer = self.inbox['vote'][cid]['layer']
                if layer not in theta.votable_names:
                    raise ProtocolError('Client {} voted for {}, which cannot be a head'.format(cid, layer))
                votes[cid] = layer
            winner = self.ledger.record_round(round_no, votes)
        elif self.inbox['vote']:
            raise ProtocolError('Votes arrived in round {} outside the selection phase'.format(round_no))
        return self._finish_round(round_no, phase, sampled, results, winner)

    # fedcmd

    def run_selection_phase(self):
        """Selection rounds 1..K_p; returns (l*, global model, records)."""
        kp = self.config.selection_rounds
        self.eval_mode = 'global'
        self.ledger = VoteLedger(kp, self.global_model.votable_names, self.config.final_vote)
        records = [self._fedavg_round(r, 'selection', vote=True) for r in range(1, kp + 1)]
        self.l_star = self.ledger.finalize()
        return self.l_star, self.global_model, records

    def _fix_head(self, l_star, theta: Model):
        for client in self.clients.values():
            client.set_head(l_star)
        layers = {c.head_layer for c in self.clients.values()}
        if len(layers) != 1:
            raise ProtocolError('Clients disagree on the head layer: {}'.format(sorted(layers)))
        body_names = [n for n in theta.parameterized_names if n != l_star]
        self.bodies = {cid: {n: theta.params[n].copy() for n in body_names} for cid in self.clients}
        self.l_star = l_star
        self.eval_mode = 'personal'
        LOGGER.info('Head layer {} ({} parameters) stays on the clients'.format(l_star, theta.layer_size(l_star)))

    def run_federated_phase(self, l_star, theta: Model, first_round=None):
        """Rounds first_round..K with l_star kept local and similarity-weighted bodies."""
        config = self.config
        first_round = config.selection_rounds + 1 if first_round is None else first_round
        self._fix_head(l_star, theta)
        body_names = [n for n in theta.parameterized_names if n != l_star]
        sizes = {n: theta.layer_size(n) for n in body_names}
        records = []
        for r in range(first_round, config.rounds + 1):
            if self.ledger is not None and self.ledger.final is None:
                raise ProtocolError('Weighted aggregation in round {} before the head layer is fixed'.format(r))
            sampled = self._begin_round(r)
            for cid in sampled:
                self.mqtt_pub(topic('down', cid, 'body'), encode_vector(pack_layers(self.bodies[cid], body_names)))
            results = self._train(sampled, r)
            self._gather(sampled)
            if self.inbox['vote'] or self.inbox['theta']:
                raise ProtocolError('Full models or votes arrived in federated round {}'.format(r))

            bodies = {c: unpack_layers(self.inbox['body'][c], sizes, body_names) for c in sampled}
            heads = {c: self.inbox['head'][c] for c in sampled}
            if self.similarity_hook is not None:
                sim = self.similarity_hook(heads)
            else:
                sim = build_similarity(heads, config.epsilon)
            heads.clear()
            self.inbox['head'].clear()
            if self.output.dump_similarity:
                folder = os.path.join(self.output.dir, 'similarity')
                os.makedirs(folder, exist_ok=True)
                sim.to_csv(os.path.join(folder, 'round_{:04d}.csv'.format(r)))

            shared, personal = decoupled_update(bodies, self._counts(sampled), sim, theta.layer_names, l_star,
                                                config.split_mode)
            for cid in self.clients:
                self.bodies[cid].update({n: a.copy() for n, a in shared.items()})
            for cid in sampled:
                self.bodies[cid].update(personal[cid])
            records.append(self._finish_round(r, 'federated', sampled, results))
        return records

    def run_fedcmd(self, command=None):
        l_star, theta, _ = self.run_selection_phase()
        LOGGER.info('Selection phase done after {} rounds, personalized layer {}'.format(
            self.config.selection_rounds, l_star))
        self.run_federated_phase(l_star, theta)
        return self.records

    # baselines

    def run_baseline(self, command=None):
        strategy = self.config.strategy
        if strategy == 'fedavg':
            self.eval_mode = 'global'
            for r in range(1, self.config.rounds + 1):
                self._fedavg_round(r, 'federated')
        elif strategy == 'local-only':
            self.eval_mode = 'local'
            for r in range(1, self.config.rounds + 1):
                sampled = self._begin_round(r)
                results = self._train(sampled, r)
                self._finish_round(r, 'local', sampled, results)
        elif strategy == 'fixed-head':
            self.run_federated_phase(self.fixed_head_layer(), self.global_model, first_round=1)
        else:
            raise ProtocolError('{} is not a baseline strategy'.format(strategy))
        return self.records

    # report

    def head_size(self) -> Optional[int]:
        if self.l_star is None:
            return None
        return self.global_model.layer_size(self.l_star)

    def build_report(self) -> RunReport:
        config_doc = experiment_to_dict(self.experiment)
        config_doc['experiment'].pop('workers')
        config_doc.pop('output')
        dataset_doc = dict(config_doc.pop('dataset'))
        dataset_doc.update({'samples': len(self.data), 'num_classes': self.data.num_classes,
                            'input_shape': list(self.data.input_shape)})

        prediction = predict_communication(self.config, self.global_model.param_count, self.head_size())
        measured = account_communication(self.records)
        communication = {
            'theta_params': self.global_model.param_count,
            'head_params': self.head_size(),
            'formula': prediction.formula,
            'predicted_total': prediction.total,
            'measured_total': measured[-1] if measured else 0,
            'predicted_similarity': prediction.similarity_total,
            'measured_similarity': int(sum(r.bytes_similarity for r in self.records)),
        }
        if prediction.total is not None and prediction.total != communication['measured_total']:
            LOGGER.warning('Measured {} bytes, closed form predicts {}'.format(
                communication['measured_total'], prediction.total))
        return RunReport(self.label, self.config.strategy, config_doc, dataset_doc, list(self.records),
                         self.last_eval, self.ledger.to_dict() if self.ledger else None, self.l_star, communication)

    drivers = [
        {"driver": "ST", "value": 1, "name": "Online"},
    ]

    commands = {
        'QUERY': Node.query,
        'fedcmd': run_fedcmd,
        'fedavg': run_baseline,
        'local-only': run_baseline,
        'fixed-head': run_baseline,
    }
