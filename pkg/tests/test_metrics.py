import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cohort.baselines import local_baseline
from cohort.config import scenario
from cohort.metrics import (
    ChainRecord,
    SuccessCriteria,
    aggregate,
    chain_records,
    emit_report,
    offload_rate,
    offload_rate_from_records,
    resource_summary,
    success_rate,
    windowed_fps,
)
from cohort.runner import evaluate_once
from cohort.schedulers import AuctionScheduler
from cohort.simworld import run_world


@pytest.fixture(scope="module")
def auction_world():
    return run_world(scenario("default3", horizon_s=40.0), AuctionScheduler(), seed=4)


def rec(latency, fps, host=0, offloaded=0, n=6, failed=False):
    end = None if failed else 1000.0 + latency
    return ChainRecord("c", host, "full", 1000.0, end, None if failed else latency, [host] * n, offloaded, n, 1.0,
                       failed=failed, fps_at_completion=fps)


def test_fps_examples():
    assert windowed_fps([100, 300, 600, 900], 1.0, at_ms=[1000.0])[0] == 4.0
    assert windowed_fps([], 1.0, at_ms=[500.0])[0] == 0.0
    assert windowed_fps([5000.0], 1.0, at_ms=[100.0])[0] == 0.0
    with pytest.raises(ValueError):
        windowed_fps([1.0], 0.0)


def test_fps_poisson_long_run():
    g = np.random.default_rng(0)
    times = np.cumsum(g.exponential(1000.0 / 3.0, size=30_000))
    q = np.linspace(10_000.0, times[-1], 2000)
    assert windowed_fps(times, 5.0, at_ms=q).mean() == pytest.approx(3.0, rel=0.05)


def test_success_examples():
    crit = SuccessCriteria()
    assert success_rate([rec(100.0, 10.0)] * 5, crit) == 1.0
    assert success_rate([rec(2500.0, 10.0)] * 5, crit) == 0.0
    assert success_rate([rec(100.0, 10.0), rec(100.0, 1.0), rec(0.0, 0.0, failed=True)], crit) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        success_rate([], crit)


@given(st.floats(100.0, 5000.0), st.floats(0.1, 5.0), st.floats(0.0, 2000.0), st.floats(0.0, 3.0))
def test_success_monotone_in_criteria(budget, goal, d_budget, d_goal):
    chains = [rec(lat, fps) for lat, fps in zip(np.linspace(200, 3000, 15), np.linspace(0.5, 4.0, 15))]
    base = success_rate(chains, SuccessCriteria({"full": goal}, budget))
    looser = SuccessCriteria({"full": max(goal - d_goal, 1e-3)}, budget + d_budget)
    assert success_rate(chains, looser) >= base


def test_chain_record_invariants():
    with pytest.raises(ValueError):
        ChainRecord("c", 0, "full", 0.0, 100.0, 50.0, [0], 0, 1, 0.0)
    with pytest.raises(ValueError):
        ChainRecord("c", 0, "full", 0.0, 100.0, 100.0, [1, 1], 3, 2, 0.0)


def test_world_chain_records(auction_world):
    chains = chain_records(auction_world)
    assert len(chains) == len(auction_world.chains)
    for c in chains:
        assert c.offloaded_stage_count == sum(w != c.host for w in c.winners)
        if c.completed:
            assert c.latency_ms == pytest.approx(c.end_ms - c.start_ms)


def test_offload_recount_from_records(auction_world):
    done = [c for c in chain_records(auction_world) if c.completed]
    ids = {c.chain_id for c in done}
    from_chains = offload_rate(done)
    from_records = offload_rate_from_records([r for r in auction_world.records if r.chain_id in ids])
    assert from_chains == pytest.approx(from_records)
    assert all(0.0 <= v <= 1.0 for v in from_chains.values())
    assert any(v > 0.0 for v in from_chains.values())


def test_offload_every_stage():
    assert offload_rate([rec(100.0, 2.0, offloaded=6)]) == {0: 1.0}
    with pytest.raises(ValueError):
        offload_rate([rec(100.0, 2.0, n=0)])


def test_idle_robot_resources():
    cfg = scenario("executor4", horizon_s=20.0)
    w = run_world(cfg, local_baseline(), seed=0)
    linux = cfg.roster[3]
    res = resource_summary(w)["linux"]
    assert res["gpu"] == 0.0
    assert res["energy_Wh"] == pytest.approx(linux.idle_power * w.robots[3].online_ms / 1000.0 / 3600.0)
    win = resource_summary(w, window=(2000.0, 12000.0))["linux"]
    assert win["gpu"] == 0.0
    assert win["energy_Wh"] == pytest.approx(linux.idle_power * 10.0 / 3600.0)
    with pytest.raises(ValueError):
        resource_summary(w, window=(0.0, w.clock + 1000.0))


def test_soc_drop_matches_energy(auction_world):
    res = resource_summary(auction_world)
    for r in auction_world.robots:
        p = r.profile
        expect = 100.0 * r.cum_energy / (p.battery_capacity * 3600.0)
        assert res[p.name]["soc_drop"] == pytest.approx(expect, abs=1e-9)
        assert res[p.name]["energy_Wh"] * 3600.0 == pytest.approx(r.stage_energy + r.idle_energy, rel=1e-6)


def test_report_is_deterministic(tmp_path):
    cfg = scenario("default3", horizon_s=20.0)
    a = emit_report(evaluate_once(cfg, AuctionScheduler(), 3), tmp_path / "a")
    b = emit_report(evaluate_once(cfg, AuctionScheduler(), 3), tmp_path / "b")
    assert a == b
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_report_totals_match_rows():
    cfg = scenario("default3", horizon_s=20.0)
    res = evaluate_once(cfg, AuctionScheduler(), 1)
    out = emit_report(res)
    rows = list(csv.DictReader(io.StringIO(out["chains_csv"])))
    summary = json.loads(out["manifest"])
    assert summary["chains"] == len(rows)
    assert summary["chain_energy_J"] == pytest.approx(sum(float(r["energy_J"]) for r in rows), rel=1e-6)
    per_robot_chains = sum(v["chains"] for v in summary["robots"].values())
    assert per_robot_chains == len(rows)
    assert summary["config_hash"] == cfg.digest() and summary["seed"] == 1
    header = out["robots_csv"].splitlines()[0].split(",")
    assert header[-4:] == ["CPU (%)", "GPU (%)", "Energy (Wh)", "SoC drop (%)"]


def test_aggregate_mean_and_sd():
    cfg = scenario("default3", horizon_s=15.0)
    results = [evaluate_once(cfg, AuctionScheduler(), s) for s in (0, 1, 2)]
    agg = aggregate(results)
    vals = [r.summary()["success_rate"] for r in results]
    assert agg["success_rate"]["mean"] == pytest.approx(np.mean(vals))
    assert agg["success_rate"]["sd"] == pytest.approx(np.std(vals, ddof=1))
    assert agg["seeds"] == [0, 1, 2]
