"""
fedcmd-sim federated learning simulator

(C) 2024

node FLClient
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from engine.Errors import NumericError, ProtocolError
from engine.FeatDist import LayerScore, input_summary, label_summary, model_traces, score_all_layers
from engine.FedLogger import LOGGER
from engine.Model import Model, ParamPartition, merge_params, sgd_epoch, split_params, unpack_layers
from engine.Partition import ClientShard
from engine.Selection import client_vote
from nodes.Broker import decode_vector, encode_json, encode_vector, parse_topic, topic
from nodes.Node import Node


@dataclass
class ClientResult:
    client_id: int
    samples: int
    loss: float
    vote: Optional[str] = None
    scores: Optional[List[LayerScore]] = None


def client_update(state, incoming: Optional[Dict[str, np.ndarray]], epochs, lr, batch_size,
                  round_no=0) -> Tuple[Model, float]:
    """
    E epochs of SGD on the client's train shard, starting from the incoming
    parameters: the full model while no head is fixed, otherwise the body,
    merged with the client's own head. incoming=None trains the local model
    as it is. Returns the trained model and the mean loss of the last epoch.
    """
    model = state.model
    if incoming is not None:
        if state.head_partition is None:
            model = model.with_params(incoming)
        else:
            head = state.head_partition
            model = model.with_params(merge_params(ParamPartition(dict(incoming), dict(head.head), head.head_layer),
                                                   model))
    loss = 0.0
    for epoch in range(epochs):
        try:
            model, loss = sgd_epoch(model, state.shard.train, lr, batch_size,
                                    shuffle_seed=[state.seed, round_no, epoch])
        except NumericError as err:
            LOGGER.error('client {}: training failed in round {}: {}'.format(state.client_id, round_no, err))
            raise err.tagged(state.client_id) from err
    return model, float(loss)


class FLClient(Node):
    id = 'flclient'

    def __init__(self, controller, shard: ClientShard, model: Model, seed: int):
        super().__init__(controller.address, 'client_{}'.format(shard.client_id), 'Client {}'.format(shard.client_id))
        self.controller = controller
        self.config = controller.config
        self.client_id = shard.client_id
        self.shard = shard
        self.model = model
        self.seed = seed
        self.head_partition: Optional[ParamPartition] = None
        self.incoming: Optional[Dict[str, np.ndarray]] = None
        self.pending: Optional[ClientResult] = None
        self.z_x = input_summary(shard.train.inputs)
        self.z_y = label_summary(shard.train.labels, shard.train.num_classes, self.config.label_encoding)
        self.setDriver('GV0', len(shard.train))

    def subscribe(self, broker):
        broker.subscribe(topic('down', self.client_id, '+'), self._on_message)

    def _on_message(self, broker, userdata, message):
        self.updateInfo(message.payload, message.topic)

    @property
    def head_layer(self) -> Optional[str]:
        return None if self.head_partition is None else self.head_partition.head_layer

    def body_names(self) -> List[str]:
        return [n for n in self.model.parameterized_names if n != self.head_layer]

    def updateInfo(self, payload, topic: str):
        direction, cid, kind = parse_topic(topic)
        if direction != 'down' or cid != self.client_id:
            raise ProtocolError('Client {} received {}'.format(self.client_id, topic))
        vector = decode_vector(payload)
        sizes = {n: self.model.layer_size(n) for n in self.model.parameterized_names}
        if kind == 'theta':
            if self.head_partition is not None:
                raise ProtocolError('Client {} has a fixed head and cannot take a full model'.format(self.client_id))
            self.incoming = unpack_layers(vector, sizes, self.model.parameterized_names)
        elif kind == 'body':
            if self.head_partition is None:
                raise ProtocolError('Client {} received a body before its head layer was set'.format(self.client_id))
            self.incoming = unpack_layers(vector, sizes, self.body_names())
        else:
            LOGGER.error('Invalid payload kind {} on {}'.format(kind, topic))
            return
        LOGGER.debug('client {}: received {} ({} values)'.format(self.client_id, kind, vector.size))

    def set_head(self, layer):
        self.head_partition = split_params(self.model, layer)
        self.setDriver('GV3', layer)

    def train(self, round_no, vote=False) -> ClientResult:
        """One local round; vote=True also scores the layers and picks the lowest."""
        self.model, loss = client_update(self, self.incoming, self.config.local_epochs, self.config.lr,
                                         self.config.batch_size, round_no)
        self.incoming = None
        if self.head_partition is not None:
            self.head_partition = split_params(self.model, self.head_partition.head_layer)
        result = ClientResult(self.client_id, len(self.shard.train), loss)
        if vote:
            result.scores = self.score_layers()
            result.vote = client_vote(result.scores, self.model.votable_names)
            self.setDriver('GV2', result.vote)
        self.setDriver('GV1', loss)
        self.pending = result
        return result

    def score_layers(self) -> List[LayerScore]:
        traces = model_traces(self.model, self.shard.train.inputs)
        return score_all_layers(traces, self.z_x, self.z_y, self.model.votable_names)

    def publish_update(self, broker):
        """Upload the pending round result; parameters first, then control messages."""
        result = self.pending
        if result is None:
            raise ProtocolError('Client {} has nothing to report'.format(self.client_id))
        if self.head_partition is None:
            broker.publish(topic('up', self.client_id, 'theta'), encode_vector(self.model.param_vector()))
        else:
            broker.publish(topic('up', self.client_id, 'body'),
                           encode_vector(self.head_partition.body_vector(self.model.parameterized_names)))
            broker.publish(topic('up', self.client_id, 'head'), encode_vector(self.head_partition.head_vector()))
        if result.vote is not None:
            broker.publish(topic('up', self.client_id, 'vote'), encode_json({
                'layer': result.vote, 'scores': {s.layer: s.s for s in result.scores}}))
        broker.publish(topic('up', self.client_id, 'status'), encode_json({
            'samples': result.samples, 'loss': result.loss}))
        self.pending = None

    def personalized_model(self, body: Dict[str, np.ndarray]) -> Model:
        """Server-side body merged with this client's own head."""
        head = self.head_partition
        return self.model.with_params(merge_params(ParamPartition(body, dict(head.head), head.head_layer), self.model))

    drivers = [
        {"driver": "ST", "value": 1, "name": "Online"},
        {"driver": "GV0", "value": 0, "name": "Train samples"},
        {"driver": "GV1", "value": None, "name": "Last loss"},
        {"driver": "GV2", "value": None, "name": "Last vote"},
        {"driver": "GV3", "value": None, "name": "Head layer"},
    ]

    commands = {
        'QUERY': Node.query,
        'TRAIN': train,
    }
