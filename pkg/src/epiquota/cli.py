"""Command-line entry point: data generation, simulation, training, and
evaluation, each writing into a run directory with a manifest."""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, load_run_config, seed_for, seed_int
from .ddpg import AgentPolicy, load_checkpoint, run_training
from .env import QuotaEnv, run_episode
from .experts import (EpHardPolicy, ep_fixed_policy, ep_lockdown_policy,
                      ep_soft_policy, no_intervention_policy,
                      pseudo_expert_policy)
from .metrics import (compute_metrics, export_figure_data,
                      run_baseline_suite, save_report)
from .mobility import (generate_synthetic_city, prolong, save_city_config,
                       save_od_csv)

OUT_ENV_VAR = "EPIQUOTA_OUT"
ABLATIONS = ("gnn-mean", "gnn-softmax", "no-expert", "no-thresholds")


class CommandError(Exception):
    pass


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    t_start = getattr(args, "t_start", None)
    if t_start is not None:
        config.env = replace(config.env, t_start=t_start)
    steps = getattr(args, "steps", None)
    if steps is not None:
        config.agent = replace(config.agent, total_steps=steps)
    ablation = getattr(args, "ablation", None)
    if ablation == "gnn-mean":
        config.agent = replace(config.agent, layer_kind="mean")
    elif ablation == "gnn-softmax":
        config.agent = replace(config.agent, layer_kind="softmax")
    elif ablation == "no-expert":
        config.agent = replace(config.agent, epsilon_start=0.0)
    elif ablation == "no-thresholds":
        config.env = replace(config.env, thresholds_enabled=False)
    return config.validate()


def _run_dir(args, config) -> Path:
    out = args.out or os.environ.get(OUT_ENV_VAR) or config.out_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _generate_city(config):
    params = replace(config.city, seed=seed_int(config.seed, "gen-data"))
    return generate_synthetic_city(params), params


def _episode_series(config):
    """The generated city tiled far enough to cover the env horizon."""
    series, _ = _generate_city(config)
    need = config.env.horizon * 24 + config.env.control_period
    if need > series.horizon:
        series = prolong(series, -(-need // series.horizon))
    return series


def _eval_env_config(config):
    # Extreme-point termination is a training aid; comparisons run without.
    return replace(config.env, thresholds_enabled=False)


def _resolve_policy(config, args):
    name = args.policy
    if args.checkpoint or name == "agent":
        if not args.checkpoint:
            raise CommandError("policy 'agent' requires --checkpoint")
        return AgentPolicy(load_checkpoint(args.checkpoint))
    xp = config.experts
    builders = {
        "no-intervention": no_intervention_policy,
        "ep-fixed": lambda: ep_fixed_policy(xp.x_q),
        "ep-soft": lambda: ep_soft_policy(xp.x_h, xp.x_l),
        "ep-hard": lambda: EpHardPolicy(xp.x_h, xp.x_t_days),
        "ep-lockdown": ep_lockdown_policy,
        "pseudo-expert": pseudo_expert_policy,
    }
    if name not in builders:
        raise CommandError(
            f"unknown policy {name!r}; choose from {sorted(builders)}")
    return builders[name]()


def _write_manifest(run_dir, command, config, outputs):
    payload = {
        "format": "epiquota-manifest",
        "version": 1,
        "package_version": __version__,
        "command": command,
        "seed": config.seed,
        "config": config.to_dict(),
        "outputs": sorted(outputs),
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(config, args, run_dir):
    series, params = _generate_city(config)
    save_od_csv(series, run_dir / "od.csv")
    save_city_config(params, run_dir / "city.json")
    return ["od.csv", "od.csv.meta.json", "city.json"]


def cmd_simulate(config, args, run_dir):
    series = _episode_series(config)
    env = QuotaEnv(series, config.disease, _eval_env_config(config))
    policy = _resolve_policy(config, args)
    log = run_episode(env, policy,
                      rng_seed=seed_for(config.seed, "simulate"))
    log.save(run_dir / "episode.csv")
    log.save_rewards(run_dir / "rewards.csv")
    report = compute_metrics(log)
    payload = dict(policy=policy.name, seed_region=env.seed_region,
                   reward=log.total_reward(),
                   termination_reason=env.termination_reason,
                   **report.as_dict())
    with open(run_dir / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    figures = export_figure_data(log, run_dir,
                                 period_hours=config.env.control_period)
    return (["episode.csv", "rewards.csv", "metrics.json"]
            + [p.name for p in figures.values()])


def cmd_train(config, args, run_dir):
    series = _episode_series(config)
    env = QuotaEnv(series, config.disease, config.env)
    run_training(env, config.agent, seed=seed_for(config.seed, "train"),
                 out_dir=run_dir)
    snapshots = [p.name for p in run_dir.glob("checkpoint_ep*.json")]
    return ["checkpoint.json", "training_log.csv"] + snapshots


def cmd_evaluate(config, args, run_dir):
    series = _episode_series(config)
    xp = config.experts
    policies = [no_intervention_policy(), ep_fixed_policy(xp.x_q),
                ep_soft_policy(xp.x_h, xp.x_l),
                EpHardPolicy(xp.x_h, xp.x_t_days), ep_lockdown_policy()]
    if args.checkpoint:
        policies.append(AgentPolicy(load_checkpoint(args.checkpoint)))
    frame = run_baseline_suite(series, config.disease,
                               _eval_env_config(config), policies,
                               rng_seed=seed_int(config.seed, "evaluate"))
    save_report(frame, csv_path=run_dir / "report.csv",
                json_path=run_dir / "report.json")
    failed = frame[frame.status == "failed"]
    for _, row in failed.iterrows():
        print(f"epiquota: policy {row.policy} failed: {row.error}",
              file=sys.stderr)
    return ["report.csv", "report.json"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="epiquota",
        description="Epidemic control experiments: mobility quotas over a "
                    "synthetic city, expert baselines, and a trainable "
                    "agent.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="run config JSON (defaults apply otherwise)")
        sp.add_argument("--seed", type=int,
                        help="global seed, overrides the config value")
        sp.add_argument("--out", metavar="DIR",
                        help=f"run directory (or set ${OUT_ENV_VAR})")

    sp = sub.add_parser("gen-data", help="generate a synthetic city")
    common(sp)

    sp = sub.add_parser("simulate", help="run one episode under a policy")
    common(sp)
    sp.add_argument("--policy", default="no-intervention",
                    help="baseline name or 'agent' (needs --checkpoint)")
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.add_argument("--t-start", type=int, dest="t_start",
                    help="intervention start day, overrides the config")

    sp = sub.add_parser("train", help="train the control agent")
    common(sp)
    sp.add_argument("--steps", type=int, help="total control steps")
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.add_argument("--t-start", type=int, dest="t_start")

    sp = sub.add_parser("evaluate", help="baseline (and agent) comparison")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH",
                    help="adds an agent row to the table")
    sp.add_argument("--t-start", type=int, dest="t_start")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        run_dir = _run_dir(args, config)
        outputs = COMMANDS[args.command](config, args, run_dir)
        _write_manifest(run_dir, args.command, config, outputs)
    except (CommandError, ValueError, OSError) as exc:
        print(f"epiquota: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
