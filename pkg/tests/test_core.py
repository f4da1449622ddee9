import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cohort.core import (
    DEFAULT_SCALES,
    STAGE_KINDS,
    AvailabilityMask,
    ChainSpec,
    FeatureScales,
    NetworkTelemetry,
    ResourceTelemetry,
    RobotAction,
    RobotProfile,
    StageContext,
    TransitionRecord,
    battery_horizon,
    build_observation,
    clip_bid,
    obs_width,
    observation_from_dict,
)

SCALES = FeatureScales()


def tel(**kw):
    base = dict(battery_horizon=1000.0, soc=0.8, power=50.0, temp=40.0, cpu=0.3, gpu=0.2, ram=0.4, queue=1)
    base.update(kw)
    return ResourceTelemetry(**base)


CTX = StageContext("samB", deadline_ms=500.0, tensor_bytes=250_000, flops=100.0)


def test_profile_invariants():
    with pytest.raises(ValueError):
        RobotProfile(0, "x", compute_throughput=0, gpu_mem=1, battery_capacity=1, idle_power=1, busy_power=2)
    with pytest.raises(ValueError):
        RobotProfile(0, "x", compute_throughput=1, gpu_mem=1, battery_capacity=0, idle_power=1, busy_power=2)
    with pytest.raises(ValueError):
        RobotProfile(0, "x", compute_throughput=1, gpu_mem=1, battery_capacity=1, idle_power=3, busy_power=2)


def test_telemetry_ranges():
    with pytest.raises(ValueError):
        tel(soc=1.2)
    with pytest.raises(ValueError):
        tel(gpu=-0.1)
    with pytest.raises(ValueError):
        tel(queue=-1)
    with pytest.raises(ValueError):
        NetworkTelemetry(rssi=-50, rtt={1: -3.0})


def test_stage_context():
    assert CTX.stage_onehot.sum() == 1.0
    assert CTX.stage_onehot[STAGE_KINDS.index("samB")] == 1.0
    with pytest.raises(ValueError):
        StageContext("yolo", 100.0, 0.0)
    with pytest.raises(ValueError):
        StageContext("samA", 0.0, 0.0)


def test_chain_deadlines_fit_budget():
    s = StageContext("samA", 1000.0, 0.0)
    with pytest.raises(ValueError):
        ChainSpec("c", 0, (s, s), goal_fps=2.0, latency_budget_ms=1800.0)
    ChainSpec("c", 0, (s,), goal_fps=2.0, latency_budget_ms=1800.0)


def test_battery_horizon_formula():
    # 0.5 * 100 Wh * 3600 / 60 W
    assert battery_horizon(0.5, 100.0, 60.0, 10.0) == pytest.approx(3000.0)
    # draw never below idle
    assert battery_horizon(0.5, 100.0, 1.0, 10.0) == pytest.approx(18000.0)


def test_soc_endpoint_normalizes_to_one():
    assert SCALES.normalize("soc", 1.0) == 1.0


def test_queue_zero_is_range_minimum():
    assert SCALES.normalize("queue", 0) == -1.0


def test_observation_matches_hand_normalization():
    t = tel()
    net = NetworkTelemetry(rssi=-58.0, rtt={0: 15.0, 2: 20.0})
    o = build_observation(t, net, CTX, roster_slot=1, n_slots=3, scales=SCALES, rtt_host=15.0)
    f = o.features
    assert f.shape == (obs_width(3),)
    # telemetry block by hand
    expect = [
        (1000.0 - 20000.0) / 20000.0,
        (0.8 - 0.5) * 2.0,
        (50.0 - 125.0) / 125.0,
        (40.0 - 50.0) / 30.0,
        (0.3 - 0.5) * 2.0,
        (0.2 - 0.5) * 2.0,
        (0.4 - 0.5) * 2.0,
        (1 - 4.0) * 0.25,
    ]
    np.testing.assert_allclose(f[:8], expect, rtol=0, atol=1e-12)
    # rssi, min rtt, mean rtt, rtt to host
    np.testing.assert_allclose(f[8:12], [(-58 + 60) / 30, (15 - 100) * 0.01, (17.5 - 100) * 0.01, (15 - 100) * 0.01])
    # per-peer rtt: self reads as far (1.0)
    np.testing.assert_allclose(f[12:15], [(15 - 100) * 0.01, 1.0, (20 - 100) * 0.01])
    onehot = f[15:22]
    assert onehot[STAGE_KINDS.index("samB")] == 1.0 and onehot.sum() == 1.0
    np.testing.assert_allclose(f[22:24], [0.0, (250_000 - 1e6) * 1e-6])
    np.testing.assert_array_equal(f[24:27], [0, 1, 0])
    np.testing.assert_array_equal(o.robot_embed, [0, 1, 0])


def test_unknown_stage_rejected():
    bad = StageContext("samA", 100.0, 0.0)
    object.__setattr__(bad, "stage_kind", "yolo")
    with pytest.raises(ValueError, match="unknown stage_kind"):
        build_observation(tel(), NetworkTelemetry(-50, {}), bad, 0, 1, SCALES)


def test_observation_pure_and_serializable():
    net = NetworkTelemetry(rssi=-50.0, rtt={1: 12.0})
    a = build_observation(tel(), net, CTX, 0, 2, SCALES, rtt_host=0.0, is_host=True)
    b = build_observation(tel(), net, CTX, 0, 2, SCALES, rtt_host=0.0, is_host=True)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    np.testing.assert_array_equal(a.features, b.features)
    c = observation_from_dict(json.loads(json.dumps(a.to_dict())), SCALES)
    np.testing.assert_array_equal(a.features, c.features)


@pytest.mark.parametrize("raw,out", [(-5.0, 0.0), (123.4, 123.4), (1e6, 400.0)])
def test_clip_bid_examples(raw, out):
    assert clip_bid(raw) == out


def test_clip_bid_nan():
    with pytest.raises(ValueError):
        clip_bid(math.nan)


@given(st.floats(-1e9, 1e9))
def test_clip_bid_idempotent_and_bounded(x):
    y = clip_bid(x)
    assert 0.0 <= y <= 400.0
    assert clip_bid(y) == y
    if 0.0 <= x <= 400.0:
        assert y == x


@given(st.sampled_from(sorted(DEFAULT_SCALES)), st.floats(-1e6, 1e6))
def test_normalization_bijective(name, x):
    z = SCALES.normalize(name, x)
    assert SCALES.denormalize(name, z) == pytest.approx(x, rel=1e-9, abs=1e-9)


def test_transition_record_roundtrip():
    net = NetworkTelemetry(rssi=-50.0, rtt={1: 12.0})
    o = build_observation(tel(), net, CTX, 0, 2, SCALES, rtt_host=0.0, is_host=True)
    rec = TransitionRecord(
        t=0, chain_id="0-1", robot_id=0, time_ms=10.0, observations=[o, None], mask=(True, False),
        actions=[RobotAction(bid=10.0, mode=0, capacity=1), None], winner_id=0, reward=1.0, penalized_reward=0.5,
        slack_ms=5.0, rtt_ms=0.0, proc_ms=100.0, xfer_ms=0.0, energy_J=3.0, deadline_miss=False, done=False,
    )
    again = TransitionRecord.from_dict(json.loads(json.dumps(rec.to_dict())), SCALES)
    assert again.to_dict() == rec.to_dict()
    with pytest.raises(ValueError):
        TransitionRecord(**{**rec.__dict__, "winner_id": 1})


def test_mask_any():
    assert AvailabilityMask((False, True)).any
    assert not AvailabilityMask((False, False)).any
