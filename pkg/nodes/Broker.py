"""
fedcmd-sim federated learning simulator

(C) 2024

in-process message broker

Carries paho MQTTMessage objects between the controller and the client nodes
without a network. Subscriptions use MQTT topic filters (+ and #). Every
published message is journaled with its round, topic and size; parameter
payloads are little-endian float32, so the size is the byte cost.

topics
    fedcmd/down/<cid>/theta   full model for a sampled client
    fedcmd/down/<cid>/body    personalized body for a sampled client
    fedcmd/up/<cid>/theta     trained full model
    fedcmd/up/<cid>/body      trained body
    fedcmd/up/<cid>/head      trained head, used only for the similarity matrix
    fedcmd/up/<cid>/vote      JSON, the client's layer vote and scores
    fedcmd/up/<cid>/status    JSON, sample count and training loss
"""

import json
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import paho.mqtt.client as mqtt

from engine.Errors import ProtocolError
from engine.FedLogger import LOGGER

PREFIX = 'fedcmd'
PARAM_KINDS = ('theta', 'body', 'head')
CONTROL_KINDS = ('vote', 'status')
WIRE_DTYPE = '<f4'


def topic(direction, client_id, kind) -> str:
    return '{}/{}/{}/{}'.format(PREFIX, direction, client_id, kind)


def parse_topic(name):
    """fedcmd/<direction>/<cid>/<kind> -> (direction, cid, kind)"""
    parts = name.split('/')
    if len(parts) != 4 or parts[0] != PREFIX or parts[1] not in ('up', 'down'):
        raise ProtocolError('Unexpected topic {}'.format(name))
    kind = parts[3]
    if kind not in PARAM_KINDS + CONTROL_KINDS:
        raise ProtocolError('Unknown message kind {} on {}'.format(kind, name))
    try:
        return parts[1], int(parts[2]), kind
    except ValueError:
        raise ProtocolError('Bad client id in topic {}'.format(name))


def encode_vector(vector) -> bytes:
    return np.asarray(vector, dtype=WIRE_DTYPE).tobytes()


def decode_vector(payload) -> np.ndarray:
    if len(payload) % 4:
        raise ProtocolError('Parameter payload of {} bytes is not a float32 vector'.format(len(payload)))
    return np.frombuffer(payload, dtype=WIRE_DTYPE).astype(np.float32)


def encode_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True).encode('utf-8')


def decode_json(payload):
    try:
        return json.loads(payload.decode('utf-8'))
    except (UnicodeDecodeError, json.decoder.JSONDecodeError) as ex:
        raise ProtocolError('Control payload is not JSON: {}'.format(ex))


@dataclass(frozen=True, eq=False)
class JournalEntry:
    round: int
    topic: str
    direction: str
    client_id: int
    kind: str
    size: int
    payload: Optional[bytes] = None

    @property
    def accounted(self) -> bool:
        return self.kind in PARAM_KINDS


class Broker:
    """
    subscribe(filter, callback) registers callback(broker, userdata, message)
    the way paho's on_message is called; publish() delivers synchronously to
    every matching subscriber in subscription order.
    """

    def __init__(self, keep_payloads=False):
        self.keep_payloads = keep_payloads
        self.round = 0
        self.journal: List[JournalEntry] = []
        self._subs = []
        self._mid = 0
        self._lock = threading.Lock()

    def subscribe(self, sub, callback: Callable, userdata=None):
        with self._lock:
            self._subs.append((sub, callback, userdata))
        LOGGER.debug('Subscribed to {}'.format(sub))
        return mqtt.MQTT_ERR_SUCCESS, len(self._subs)

    def unsubscribe(self, sub):
        with self._lock:
            self._subs = [s for s in self._subs if s[0] != sub]

    def publish(self, name, payload: bytes):
        direction, client_id, kind = parse_topic(name)
        with self._lock:
            self._mid += 1
            message = mqtt.MQTTMessage(mid=self._mid, topic=name.encode('utf-8'))
            message.payload = payload
            self.journal.append(JournalEntry(self.round, name, direction, client_id, kind, len(payload),
                                             payload if self.keep_payloads else None))
            targets = [(cb, ud) for sub, cb, ud in self._subs if mqtt.topic_matches_sub(sub, name)]
        LOGGER.debug('publish {} ({} bytes) to {} subscribers'.format(name, len(payload), len(targets)))
        if not targets:
            LOGGER.warning('No subscriber for {}'.format(name))
        for callback, userdata in targets:
            callback(self, userdata, message)
        return message.mid

    def round_entries(self, round_no) -> List[JournalEntry]:
        return [e for e in self.journal if e.round == round_no]

    def round_bytes(self, round_no):
        """(up, down, similarity) parameter bytes published during round_no."""
        up = down = similarity = 0
        for e in self.round_entries(round_no):
            if not e.accounted:
                continue
            if e.direction == 'down':
                down += e.size
            elif e.kind == 'head':
                similarity += e.size
            else:
                up += e.size
        return up, down, similarity
