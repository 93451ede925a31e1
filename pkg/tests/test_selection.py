import pytest

from engine.Errors import ProtocolError
from engine.FeatDist import LayerScore
from engine.Selection import VoteLedger, client_vote, finalize, round_vote

ORDER = ['conv1', 'conv2', 'fc1', 'fc2', 'classifier']


def test_client_vote_picks_smallest_score():
    scores = [LayerScore('fc1', 0.5), LayerScore('fc2', 0.2), LayerScore('classifier', 0.9)]
    assert client_vote(scores, ORDER) == 'fc2'


def test_client_vote_ties_go_to_earliest_layer():
    assert client_vote([LayerScore('fc2', 0.3), LayerScore('fc1', 0.3)], ORDER) == 'fc1'
    assert client_vote([LayerScore('fc1', 0.3), LayerScore('fc2', 0.3)]) == 'fc1'


def test_client_vote_singleton_and_empty():
    assert client_vote([LayerScore('conv2', 7.0)]) == 'conv2'
    with pytest.raises(ProtocolError):
        client_vote([])


def test_client_vote_is_scale_invariant():
    scores = [LayerScore('conv1', 0.04), LayerScore('fc1', 0.03), LayerScore('fc2', 0.1)]
    scaled = [LayerScore(s.layer, s.s * 250.0) for s in scores]
    assert client_vote(scores, ORDER) == client_vote(scaled, ORDER) == 'fc1'


def test_round_vote():
    assert round_vote({1: 'fc2', 2: 'fc2', 3: 'classifier'}, ORDER) == 'fc2'
    assert round_vote({1: 'fc2', 2: 'fc1'}, ORDER) == 'fc1'
    assert round_vote({c: 'fc2' for c in range(10)}, ORDER) == 'fc2'
    with pytest.raises(ProtocolError):
        round_vote({}, ORDER)


def test_finalize_mode_of_winners():
    ledger = VoteLedger(4, ORDER)
    for r, layer in enumerate(['fc2', 'fc2', 'classifier', 'fc2'], start=1):
        assert ledger.record_round(r, {0: layer}) == layer
    assert finalize(ledger) == 'fc2'
    assert ledger.final == 'fc2'


def test_finalize_tie_goes_to_earliest_layer():
    ledger = VoteLedger(2, ORDER)
    ledger.record_round(1, {0: 'fc2'})
    ledger.record_round(2, {0: 'fc1'})
    assert ledger.finalize() == 'fc1'


def test_finalize_too_early_states_rounds():
    ledger = VoteLedger(3, ORDER)
    ledger.record_round(1, {0: 'fc1'})
    with pytest.raises(ProtocolError) as err:
        ledger.finalize()
    assert '1 rounds, 3 required' in str(err.value)


def test_no_votes_after_final():
    ledger = VoteLedger(1, ORDER)
    ledger.record_round(1, {0: 'fc1'})
    ledger.finalize()
    with pytest.raises(ProtocolError):
        ledger.record_round(2, {0: 'fc2'})


def test_pooled_final_vote_differs_from_round_modes():
    votes = [{0: 'fc1', 1: 'fc1', 2: 'fc2'},
             {0: 'fc1', 1: 'fc1', 2: 'fc2'},
             {0: 'fc2', 1: 'fc2', 2: 'fc2'},
             {0: 'fc2', 1: 'fc2', 2: 'fc2'},
             {0: 'classifier', 1: 'fc1', 2: 'fc1'}]
    modes, pooled = VoteLedger(5, ORDER), VoteLedger(5, ORDER, final_vote='pooled')
    for r, v in enumerate(votes, start=1):
        modes.record_round(r, v)
        pooled.record_round(r, v)
    # winners fc1, fc1, fc2, fc2, fc1; pooled counts fc2 8, fc1 6
    assert modes.finalize() == 'fc1'
    assert pooled.finalize() == 'fc2'
    with pytest.raises(ProtocolError):
        VoteLedger(5, ORDER, final_vote='median')


def test_ledger_to_dict():
    ledger = VoteLedger(1, ORDER)
    ledger.record_round(1, {3: 'fc2', 1: 'fc1', 2: 'fc2'})
    ledger.finalize()
    doc = ledger.to_dict()
    assert doc['votes'] == {'1': {'1': 'fc1', '2': 'fc2', '3': 'fc2'}}
    assert doc['winners'] == {'1': 'fc2'}
    assert doc['final'] == 'fc2'
    assert doc['required_rounds'] == 1
