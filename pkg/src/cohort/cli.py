"""Command line: collect, train, evaluate, scenario.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 missing input artifact,
4 failure while running.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import TEMPLATES, ConfigError, ScenarioConfig, scenario
from .core import TransitionRecord, read_jsonl, write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
SCHEDULERS = ("baseline", "auction", "ga", "rl")

log = logging.getLogger("cohort")


class CliFailure(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def parse_seeds(text: str) -> list:
    """'3' -> [3]; '0,2,5' -> [0, 2, 5]; '0-4' -> [0, 1, 2, 3, 4]."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                a, b = part.split("-", 1) if not part.startswith("-") else (part, "")
                a, b = int(a), int(b)
                if b < a:
                    raise ValueError
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise CliFailure(EXIT_CONFIG, f"cannot parse seeds {text!r}")
    if not out:
        raise CliFailure(EXIT_CONFIG, "no seeds given")
    return out


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    if not p.exists():
        raise CliFailure(EXIT_MISSING, f"config not found: {p}")
    try:
        return ScenarioConfig.load(p)
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        raise CliFailure(EXIT_CONFIG, f"{p}: {exc}")


def load_records(path, cfg: ScenarioConfig) -> list:
    p = Path(path)
    if not p.exists():
        raise CliFailure(EXIT_MISSING, f"dataset not found: {p}")
    scales = cfg.feature_scales
    try:
        return [TransitionRecord.from_dict(d, scales) for d in read_jsonl(p)]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliFailure(EXIT_CONFIG, f"{p}: malformed record ({exc})")


def load_checkpoint(path):
    from .nn import Checkpoint

    p = Path(path)
    if not p.exists():
        raise CliFailure(EXIT_MISSING, f"checkpoint not found: {p}")
    try:
        return Checkpoint.load(p)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliFailure(EXIT_CONFIG, f"{p}: {exc}")


def _run(fn):
    try:
        fn()
    except CliFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Multi-robot DNN stage scheduling: data collection, training and evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, help="Scenario TOML.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, help="Output JSONL file.")
@click.option("--duration", default=600.0, show_default=True, type=float, help="Simulated seconds.")
@click.option("--noise-sd", default=0.0, show_default=True, type=float, help="Gaussian noise added to heuristic bids.")
@click.option("--random-frac", default=0.0, show_default=True, type=float,
              help="Fraction of bids replaced by uniform random bids.")
def collect(config_path, seed, out, duration, noise_sd, random_frac):
    """Record auction transitions under the heuristic bidder."""

    def go():
        from .training.pipeline import collect_records

        cfg = load_config(config_path)
        if duration <= 0 or noise_sd < 0 or not 0 <= random_frac <= 1:
            raise CliFailure(EXIT_CONFIG, "duration must be > 0, noise-sd >= 0, random-frac in [0, 1]")
        recs = collect_records(cfg, seed, duration, noise_sd, random_frac)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        n = write_jsonl(out, recs)
        click.echo(f"wrote {n} records to {out}")

    _run(go)


@main.command()
@click.option("--config", "config_path", required=True, help="Scenario TOML.")
@click.option("--data", "data_path", default=None, help="JSONL from `collect` (phases A and B).")
@click.option("--phases", default="A,B,C", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--checkpoint", "ckpt_path", default=None, help="Start from this checkpoint.")
@click.option("--updates", default=None, type=int, help="Override the number of phase C updates.")
@click.option("--out", required=True, help="Output directory for checkpoints and curves.")
def train(config_path, data_path, phases, seed, ckpt_path, updates, out):
    """Run the training curriculum; writes phase checkpoints and curves.csv."""

    def go():
        from .training.pipeline import PhaseError, three_phase_train

        cfg = load_config(config_path)
        wanted = {p.strip().upper() for p in phases.split(",") if p.strip()}
        records = None
        if wanted & {"A", "B"}:
            if data_path is None:
                raise CliFailure(EXIT_MISSING, "phases A and B need --data")
            records = load_records(data_path, cfg)
            if not records:
                raise CliFailure(EXIT_MISSING, f"{data_path} holds no records")
        ckpt = load_checkpoint(ckpt_path) if ckpt_path else None
        if ckpt is not None and ckpt.actor.n_slots != cfg.n_slots:
            raise CliFailure(EXIT_CONFIG, "checkpoint roster size does not match the config")
        try:
            result = three_phase_train(cfg, records, phases, seed, ckpt, updates)
        except ValueError as exc:
            raise CliFailure(EXIT_CONFIG, str(exc))
        except PhaseError as exc:
            raise CliFailure(EXIT_MISSING, str(exc))
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        for phase, ck in result.checkpoints.items():
            ck.save(d / f"phase{phase}.json")
        (d / "curves.csv").write_text(result.curves_csv())
        click.echo(f"wrote {', '.join('phase' + p for p in result.checkpoints)} and curves.csv to {d}")

    _run(go)


def make_scheduler_factory(name, cfg: ScenarioConfig, ckpt=None):
    from .auction import heuristic_bidder
    from .baselines import GaScheduler, local_baseline
    from .schedulers import AuctionScheduler, policy_scheduler

    if name == "baseline":
        return lambda s: local_baseline()
    if name == "auction":
        return lambda s: AuctionScheduler(heuristic_bidder)
    if name == "ga":
        return lambda s: GaScheduler()
    if name == "rl":
        if ckpt is None:
            raise CliFailure(EXIT_MISSING, "--scheduler rl needs --checkpoint")
        from .core import RobotProfile
        from .training.pipeline import CapacityError, adapt_actor

        roster = [RobotProfile(**p) for p in ckpt.meta.get("roster", [])] or list(cfg.roster[:ckpt.actor.n_slots])
        try:
            actor = adapt_actor(ckpt.actor, roster, cfg)
        except CapacityError as exc:
            raise CliFailure(EXIT_CONFIG, str(exc))
        return lambda s: policy_scheduler(actor.copy(), greedy=True)
    raise CliFailure(EXIT_CONFIG, f"unknown scheduler {name!r}")


@main.command()
@click.option("--config", "config_path", required=True, help="Scenario TOML.")
@click.option("--scheduler", type=click.Choice(SCHEDULERS), required=True)
@click.option("--checkpoint", "ckpt_path", default=None, help="Policy checkpoint (rl scheduler).")
@click.option("--seeds", default="0", show_default=True, help="e.g. 0-9 or 1,3,5")
@click.option("--out", required=True, help="Report directory.")
def evaluate(config_path, scheduler, ckpt_path, seeds, out):
    """Simulate a scheduler over seeds; writes per-seed CSV/JSON and summary.json (env COHORT_THREADS)."""

    def go():
        from .metrics import aggregate, emit_report
        from .runner import evaluate_seeds

        cfg = load_config(config_path)
        seed_list = parse_seeds(seeds)
        ckpt = load_checkpoint(ckpt_path) if ckpt_path else None
        factory = make_scheduler_factory(scheduler, cfg, ckpt)
        results = evaluate_seeds(cfg, factory, seed_list, label=scheduler)
        d = Path(out)
        for r in results:
            emit_report(r, d)
        agg = aggregate(results)
        (d / f"{cfg.name}_{scheduler}_summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        sr = agg["success_rate"]
        click.echo(f"{cfg.name} {scheduler}: success {sr['mean']:.3f} +/- {sr['sd']:.3f} over {len(seed_list)} seeds")

    _run(go)


@main.command(name="scenario")
@click.argument("template", type=click.Choice(TEMPLATES))
@click.option("--out", required=True, help="Output TOML file.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--horizon", default=120.0, show_default=True, type=float, help="Simulated seconds per run.")
def scenario_cmd(template, out, seed, horizon):
    """Write a fully specified scenario config."""

    def go():
        if horizon <= 0:
            raise CliFailure(EXIT_CONFIG, "horizon must be > 0")
        cfg = scenario(template, seed=seed, horizon_s=horizon)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        cfg.save(out)
        click.echo(f"wrote {template} to {out} (hash {cfg.digest()})")

    _run(go)


if __name__ == "__main__":
    main()
