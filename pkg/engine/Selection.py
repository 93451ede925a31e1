"""
fedcmd-sim federated learning simulator

(C) 2024

personalized-layer voting

Three levels: every sampled client votes for its lowest-scoring layer, the
server takes the mode of each round's votes, and after the selection rounds
the mode of the round winners becomes the personalized layer. Ties at every
level go to the layer that comes first in the model.
"""

from collections import Counter
from typing import Dict, List, Optional, Sequence

from engine.Errors import ProtocolError
from engine.FedLogger import LOGGER

FINAL_VOTES = ('round_modes', 'pooled')


def _rank(order):
    return {name: i for i, name in enumerate(order)}


def _mode(names, order=None) -> str:
    counts = Counter(names)
    rank = _rank(order) if order is not None else {}
    # unknown layers sort after known ones, then by name
    return min(counts, key=lambda n: (-counts[n], rank.get(n, len(rank)), n))


def client_vote(scores, order: Optional[Sequence[str]] = None) -> str:
    """Layer with the smallest score; order defaults to the order of scores."""
    scores = list(scores)
    if not scores:
        raise ProtocolError('Cannot vote on an empty score list')
    rank = _rank(order if order is not None else [s.layer for s in scores])
    return min(scores, key=lambda s: (s.s, rank.get(s.layer, len(rank)))).layer


def round_vote(votes: Dict[int, str], order: Optional[Sequence[str]] = None) -> str:
    if not votes:
        raise ProtocolError('Cannot tally a round without votes')
    return _mode(votes.values(), order)


class VoteLedger:
    """Per-round raw votes and winners, and the final personalized layer."""

    def __init__(self, required_rounds: int, order: Sequence[str], final_vote='round_modes'):
        if final_vote not in FINAL_VOTES:
            raise ProtocolError("Unknown final vote '{}', expected one of {}".format(final_vote, FINAL_VOTES))
        self.required_rounds = int(required_rounds)
        self.order = list(order)
        self.final_vote = final_vote
        self.votes: Dict[int, Dict[int, str]] = {}
        self.winners: Dict[int, str] = {}
        self.final: Optional[str] = None

    def record_round(self, round_no: int, votes: Dict[int, str]) -> str:
        if self.final is not None:
            raise ProtocolError('Vote for round {} arrived after the personalized layer was fixed'.format(round_no))
        winner = round_vote(votes, self.order)
        self.votes[round_no] = dict(sorted(votes.items()))
        self.winners[round_no] = winner
        LOGGER.info('round {}: votes {} -> {}'.format(round_no, dict(Counter(votes.values())), winner))
        return winner

    def finalize(self) -> str:
        seen = len(self.winners)
        if seen != self.required_rounds:
            raise ProtocolError('Selection has seen {} rounds, {} required before finalizing'.format(
                seen, self.required_rounds))
        if self.final_vote == 'pooled':
            pool: List[str] = [v for r in sorted(self.votes) for v in self.votes[r].values()]
        else:
            pool = [self.winners[r] for r in sorted(self.winners)]
        self.final = _mode(pool, self.order)
        LOGGER.info('personalized layer fixed: {} (winners {})'.format(
            self.final, [self.winners[r] for r in sorted(self.winners)]))
        return self.final

    def to_dict(self) -> dict:
        return {
            'required_rounds': self.required_rounds,
            'final_vote': self.final_vote,
            'votes': {str(r): {str(c): v for c, v in self.votes[r].items()} for r in sorted(self.votes)},
            'winners': {str(r): self.winners[r] for r in sorted(self.winners)},
            'final': self.final,
        }


def finalize(ledger: VoteLedger) -> str:
    return ledger.finalize()
