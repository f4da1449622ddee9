import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cohort.auction import (
    AuctionFailed,
    BidSet,
    collect_bids,
    heuristic_action,
    heuristic_bid,
    heuristic_bidder,
    select_winner,
)
from cohort.config import scenario
from cohort.core import AvailabilityMask, FeatureScales, NetworkTelemetry, ResourceTelemetry, StageContext, build_observation
from cohort.simworld import World

from .conftest import quiet

CTX = StageContext("samA", 400.0, 300_000, flops=60.0)


def bids(values, mask=None):
    mask = mask if mask is not None else [True] * len(values)
    return BidSet(bids=list(values), mask=AvailabilityMask(tuple(mask)), stage=CTX)


def obs(queue=0, soc=1.0, gpu=0.0, cpu=0.0, rtt_host=0.0, is_host=False, slot=0, n=3, peers=None):
    tel = ResourceTelemetry(battery_horizon=1e4, soc=soc, power=10.0, temp=35.0, cpu=cpu, gpu=gpu, ram=0.3, queue=queue)
    peers = peers if peers is not None else {i: 15.0 + i for i in range(n) if i != slot}
    return build_observation(tel, NetworkTelemetry(-55.0, peers), CTX, slot, n, FeatureScales(),
                             rtt_host=rtt_host, is_host=is_host)


def test_lowest_bid_wins():
    assert select_winner(bids([120.0, 80.0, 200.0])).winner_id == 1


def test_masked_robot_cannot_win():
    out = select_winner(bids([120.0, 80.0, 200.0], [True, False, True]))
    assert out.winner_id == 0
    assert out.responded == frozenset({0, 2})


def test_tie_goes_to_lowest_id():
    assert select_winner(bids([50.0, 50.0, 60.0])).winner_id == 0


def test_all_masked_fails():
    with pytest.raises(AuctionFailed):
        select_winner(bids([1.0, 2.0], [False, False]))


def test_out_of_range_bid_rejected():
    with pytest.raises(ValueError):
        bids([401.0, 3.0])
    # masked slots are not checked
    bids([None, 3.0], [False, True])


bid_lists = st.lists(st.floats(0.0, 300.0), min_size=1, max_size=6)


@given(bid_lists, st.floats(0.0, 100.0))
def test_shift_invariance(values, c):
    a = select_winner(bids(values)).winner_id
    shifted = [v + c for v in values]
    b = select_winner(bids(shifted)).winner_id
    # float rounding can only merge near-ties, never reorder distinct bids
    assert values[b] == pytest.approx(values[a], abs=1e-9)


@given(bid_lists, st.data())
def test_masking_a_loser_keeps_winner(values, data):
    w = select_winner(bids(values)).winner_id
    mask = [True] * len(values)
    losers = [i for i in range(len(values)) if i != w]
    if losers:
        mask[data.draw(st.sampled_from(losers))] = False
    assert select_winner(bids(values, mask)).winner_id == w


@given(bid_lists, st.data())
def test_masking_winner_never_improves(values, data):
    w = select_winner(bids(values))
    if len(values) < 2:
        return
    mask = [True] * len(values)
    mask[w.winner_id] = False
    assert select_winner(bids(values, mask)).winning_bid >= w.winning_bid


@given(bid_lists)
def test_selection_is_pure(values):
    bs = bids(values)
    before = list(bs.bids)
    assert select_winner(bs) == select_winner(bs)
    assert bs.bids == before


def test_heuristic_bid_by_hand():
    o = obs(queue=1, soc=0.8, gpu=0.5, cpu=0.35, rtt_host=20.0)
    # 50*1 + 100*0.2 + 0.5*20 + 80*0.5 + 40*0.35
    assert heuristic_bid(o) == pytest.approx(50.0 + 20.0 + 10.0 + 40.0 + 14.0)


def test_heuristic_bid_is_clipped():
    assert heuristic_bid(obs(queue=20, soc=0.0, gpu=1.0, cpu=1.0)) == 400.0


@given(st.integers(0, 6), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 150.0))
def test_heuristic_monotone(queue, soc, gpu, rtt):
    base = heuristic_bid(obs(queue=queue, soc=soc, gpu=gpu, rtt_host=rtt))
    assert heuristic_bid(obs(queue=queue + 1, soc=soc, gpu=gpu, rtt_host=rtt)) >= base
    assert heuristic_bid(obs(queue=queue, soc=soc * 0.5, gpu=gpu, rtt_host=rtt)) >= base
    assert heuristic_bid(obs(queue=queue, soc=soc, gpu=min(1.0, gpu + 0.1), rtt_host=rtt)) >= base
    assert heuristic_bid(obs(queue=queue, soc=soc, gpu=gpu, rtt_host=rtt + 5.0)) >= base


def test_heuristic_discrete_labels():
    mask = AvailabilityMask((True, True, True))
    idle_host = heuristic_action(obs(is_host=True), mask)
    assert idle_host.mode == 0 and idle_host.target is None and idle_host.capacity == 2
    busy_host = heuristic_action(obs(queue=3, is_host=True, peers={1: 30.0, 2: 12.0}), mask)
    assert busy_host.mode == 1 and busy_host.target == 2 and busy_host.capacity == 0
    # unavailable peers are never targeted
    masked = heuristic_action(obs(queue=3, is_host=True, peers={1: 30.0, 2: 12.0}), AvailabilityMask((True, True, False)))
    assert masked.target == 1
    peer = heuristic_action(obs(queue=1, slot=1, rtt_host=15.0), mask)
    assert peer.mode == 2 and peer.capacity == 1
    assert heuristic_action(obs(queue=3, slot=1, rtt_host=15.0), mask).mode == 0


def _world(base_rtt_to_host, seed=0):
    cfg = quiet(scenario("default3", horizon_s=5.0))
    d = cfg.to_dict()
    for link in d["links"]:
        if 0 in (link["a"], link["b"]) and 2 in (link["a"], link["b"]):
            link["base_rtt"] = base_rtt_to_host
    return World(type(cfg).from_dict(d), seed=seed)


def test_collect_bids_masks_slow_responders():
    w = _world(250.0)
    bs = collect_bids(w, CTX, host=0, bidder_fn=heuristic_bidder)
    assert bs.mask.available == (True, True, False)
    assert bs.bids[2] is None and bs.observations[2] is None
    assert bs.observations[0].rtt_host == 0.0 and bs.observations[0].is_host
    # a wider window lets the slow robot bid
    assert collect_bids(w, CTX, host=0, bidder_fn=heuristic_bidder, bid_window_ms=300.0).mask.available[2]


def test_collect_bids_offline_and_all_masked():
    w = _world(16.0)
    w.robots[1].online = False
    assert collect_bids(w, CTX, host=0, bidder_fn=heuristic_bidder).mask.available == (True, False, True)
    w.robots[0].online = w.robots[2].online = False
    with pytest.raises(AuctionFailed):
        collect_bids(w, CTX, host=0, bidder_fn=heuristic_bidder)


def test_collect_bids_clips_policy_output():
    w = _world(16.0)

    def wild(observations, mask):
        acts = heuristic_bidder(observations, mask)
        for a, v in zip(acts, [-50.0, 1e9, 7.0]):
            a.bid = v
        return acts

    bs = collect_bids(w, CTX, host=0, bidder_fn=wild)
    assert bs.bids == [0.0, 400.0, 7.0]
    assert select_winner(bs).winner_id == 0


def test_observation_features_are_finite():
    w = _world(16.0, seed=3)
    bs = collect_bids(w, CTX, host=1, bidder_fn=heuristic_bidder)
    for o in bs.observations:
        assert np.isfinite(o.features).all()
