"""Command-line entry point: ``rtgboost {gen,train,simulate,sweep,importance,bench}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import _jsonfmt, envs, evaluation, gbrt, policy, trajectory
from .errors import RtgBoostError

_U64 = (1 << 64) - 1


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value <= _U64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _add_common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=_seed, default=0, help="the only source of randomness (u64)")
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--threads", type=int, default=0, help="worker threads, 0 = one per CPU")
    p.add_argument("--config", type=Path, help="JSON file of flag values; explicit flags win")


def _add_boost_flags(p: argparse.ArgumentParser) -> None:
    defaults = gbrt.BoostConfig()
    p.add_argument("--n-estimators", type=int, default=defaults.n_estimators)
    p.add_argument("--learning-rate", type=float, default=defaults.learning_rate)
    p.add_argument("--max-depth", type=int, default=defaults.max_depth)
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=defaults.reg_lambda,
                   help="L2 penalty on leaf weights")
    p.add_argument("--gamma-split", type=float, default=defaults.gamma_split,
                   help="minimum gain required to split")
    p.add_argument("--min-child-weight", type=float, default=defaults.min_child_weight)
    p.add_argument("--subsample", type=float, default=defaults.subsample)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", type=Path, help="flat transition JSON or episodic .jsonl")
    p.add_argument("--sparse", action="store_true",
                   help="move each episode's total reward onto its final step")
    p.add_argument("--r-min-ref", type=float, help="return mapped to 0 (default: lowest episode return)")
    p.add_argument("--r-max-ref", type=float, help="return mapped to 1 (default: highest episode return)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="rtgboost",
        description="Offline RL as return-conditioned regression with boosted trees.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen", help="roll out a behavior policy into a dataset file")
    p.add_argument("--env", choices=envs.env_names())
    p.add_argument("--behavior", choices=envs.BEHAVIORS)
    p.add_argument("--episodes", type=int, default=100)
    _add_common(p, "dataset path (.jsonl writes episodic lines, anything else flat JSON)")
    subs["gen"] = p

    p = sub.add_parser("train", help="fit an agent on a dataset")
    _add_data_flags(p)
    p.add_argument("--env", choices=envs.env_names(),
                   help="take action bounds from this environment (default: dataset min/max)")
    _add_boost_flags(p)
    _add_common(p, "agent model path")
    subs["train"] = p

    p = sub.add_parser("simulate", help="run one conditioned episode")
    p.add_argument("--model", type=Path)
    p.add_argument("--env", choices=envs.env_names())
    p.add_argument("--target", type=float, help="initial normalized target return")
    _add_common(p, "optional JSON result path")
    subs["simulate"] = p

    p = sub.add_parser("sweep", help="evaluate across a grid of target returns")
    p.add_argument("--model", type=Path)
    p.add_argument("--env", choices=envs.env_names())
    p.add_argument("--targets", help="grid start:stop:count, both ends inclusive")
    p.add_argument("--target", type=float, help="single-point sweep")
    p.add_argument("--episodes-per-target", type=int, default=5)
    _add_common(p, "CSV path; the JSON summary goes next to it with a .json suffix")
    subs["sweep"] = p

    p = sub.add_parser("importance", help="per-feature split statistics")
    p.add_argument("--model", type=Path)
    p.add_argument("--metric", choices=gbrt.IMPORTANCE_METRICS, default="weight")
    p.add_argument("--dim", type=int, help="restrict to one action dimension")
    _add_common(p, "optional CSV path")
    subs["importance"] = p

    p = sub.add_parser("bench", help="time training and single-step inference")
    _add_data_flags(p)
    p.add_argument("--env", choices=envs.env_names())
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--inference-calls", type=int, default=1000)
    _add_boost_flags(p)
    _add_common(p, "optional JSON report path")
    subs["bench"] = p
    return parser, subs


_REQUIRED = {
    "gen": ("env", "behavior", "out"),
    "train": ("dataset", "out"),
    "simulate": ("model", "env", "target"),
    "sweep": ("model", "env", "out"),
    "importance": ("model",),
    "bench": ("dataset", "env"),
}


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    first = parser.parse_args(argv)
    if first.config is not None:
        sp = subs[first.command]
        try:
            overrides = json.loads(first.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            sp.error(f"cannot read --config {first.config}: {exc}")
        if not isinstance(overrides, dict):
            sp.error("--config must hold a JSON object")
        known = {a.dest for a in sp._actions}
        cleaned = {}
        for key, value in overrides.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest == "lambda":
                dest = "reg_lambda"
            if dest not in known or dest in ("help", "config"):
                sp.error(f"--config: unknown option {key!r}")
            cleaned[dest] = value
        sp.set_defaults(**cleaned)
        first = parser.parse_args(argv)
        for dest in ("out", "model", "dataset"):
            if isinstance(getattr(first, dest, None), str):
                setattr(first, dest, Path(getattr(first, dest)))
    sp = subs[first.command]
    missing = [d for d in _REQUIRED[first.command] if getattr(first, d, None) is None]
    if missing:
        sp.error("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if first.command == "sweep":
        if (first.targets is None) == (first.target is None):
            sp.error("give exactly one of --targets start:stop:count or --target X")
        try:
            first.grid = (
                [first.target] if first.target is not None else evaluation.parse_grid(first.targets)
            )
        except ValueError as exc:
            sp.error(str(exc))
        if first.episodes_per_target < 1:
            sp.error("--episodes-per-target must be at least 1")
    if first.command == "gen" and first.episodes < 1:
        sp.error("--episodes must be at least 1")
    for dest in ("dataset", "model"):
        path = getattr(first, dest, None)
        if path is not None and not Path(path).is_file():
            sp.error(f"--{dest}: no such file {path}")
    out = getattr(first, "out", None)
    if out is not None and not Path(out).resolve().parent.is_dir():
        sp.error(f"--out: directory {Path(out).parent} does not exist")
    return first


def _print_config(args: argparse.Namespace) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    print("config " + _jsonfmt.dumps(resolved))


def _boost_config(args: argparse.Namespace) -> gbrt.BoostConfig:
    return gbrt.BoostConfig(
        n_estimators=args.n_estimators,
        learning_rate=args.learning_rate,
        max_depth=args.max_depth,
        reg_lambda=args.reg_lambda,
        gamma_split=args.gamma_split,
        min_child_weight=args.min_child_weight,
        subsample=args.subsample,
        seed=args.seed,
    )


def _load_training_data(args: argparse.Namespace):
    episodes = trajectory.load_episodes(args.dataset)
    if args.sparse:
        episodes = [trajectory.sparsify_rewards(ep) for ep in episodes]
    if (args.r_min_ref is None) != (args.r_max_ref is None):
        raise RtgBoostError("give both --r-min-ref and --r-max-ref, or neither")
    if args.r_min_ref is None:
        rtg_cfg = trajectory.RtgConfig.from_episodes(episodes)
    else:
        rtg_cfg = trajectory.RtgConfig(args.r_min_ref, args.r_max_ref)
    return episodes, rtg_cfg, trajectory.build_training_matrix(episodes, rtg_cfg)


def cmd_gen(args: argparse.Namespace) -> None:
    env = envs.make_env(args.env)
    flat = envs.generate_dataset(env, args.behavior, args.episodes, args.seed)
    if args.out.suffix == ".jsonl":
        trajectory.save_episodes_jsonl(trajectory.split_episodes(flat), args.out)
    else:
        trajectory.save_flat_log(flat, args.out)
    print(f"wrote {args.episodes} episodes ({len(flat)} transitions) to {args.out}")


def cmd_train(args: argparse.Namespace) -> None:
    episodes, rtg_cfg, matrix = _load_training_data(args)
    if args.env is not None:
        env = envs.make_env(args.env)
        if env.spec.state_dim != matrix.state_dim or env.spec.action_dim != matrix.action_dim:
            raise RtgBoostError(
                f"dataset has state dim {matrix.state_dim} / action dim {matrix.action_dim} but "
                f"{env.name} has {env.spec.state_dim} / {env.spec.action_dim}"
            )
        bounds = env.spec.action_bounds
    else:
        bounds = np.column_stack([matrix.targets.min(axis=0), matrix.targets.max(axis=0)])
    print(
        f"episodes {len(episodes)}  rows {matrix.n_rows}  "
        f"rtg range [{rtg_cfg.r_min_ref!r}, {rtg_cfg.r_max_ref!r}]"
    )
    t0 = time.perf_counter()
    agent = policy.train_agent(matrix, _boost_config(args), bounds, rtg_cfg, threads=args.threads)
    elapsed = time.perf_counter() - t0
    print(f"training time {elapsed:.3f} s")
    for j, ens in enumerate(agent.ensembles):
        mse = float(np.mean((ens.predict(matrix.inputs) - matrix.targets[:, j]) ** 2))
        print(f"action dim {j}: final training MSE {mse:.6g}")
    policy.save_agent(agent, args.out)
    print(f"wrote agent to {args.out}")


def cmd_simulate(args: argparse.Namespace) -> None:
    agent = policy.load_agent(args.model)
    env = envs.make_env(args.env)
    ret, length = evaluation.simulate_policy(agent, env, args.target, args.seed)
    result = {
        "target_rtg": args.target,
        "achieved_return": ret,
        "normalized_score": envs.normalized_score(env.spec, ret),
        "episode_length": length,
        "seed": args.seed,
    }
    text = _jsonfmt.dumps(result)
    print(text)
    if args.out is not None:
        args.out.write_text(text + "\n")


def cmd_sweep(args: argparse.Namespace) -> None:
    agent = policy.load_agent(args.model)
    env = envs.make_env(args.env)
    result = evaluation.rtg_sweep(
        agent, env, args.grid, args.episodes_per_target, args.seed, threads=args.threads
    )
    summary_path = args.out.with_suffix(".json")
    evaluation.write_sweep(result, args.out, summary_path)
    fmt = lambda v: "null" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"records {len(result.records)}")
    print(f"pearson {fmt(result.pearson)}  spearman {fmt(result.spearman)}")
    print(f"mean normalized score {fmt(result.mean_normalized_score)}")
    print(f"wrote {args.out} and {summary_path}")


def cmd_importance(args: argparse.Namespace) -> None:
    agent = policy.load_agent(args.model)
    ensembles = agent.ensembles
    if args.dim is not None:
        if not 0 <= args.dim < agent.action_dim:
            raise RtgBoostError(f"--dim must lie in [0, {agent.action_dim - 1}]")
        ensembles = [ensembles[args.dim]]
    rows = evaluation.importance_rows(gbrt.importance(ensembles), args.metric, agent.feature_names)
    width = max([len(n) for n, _ in rows] + [7])
    print(f"{'feature':<{width}}  {args.metric}")
    for name, value in rows:
        shown = f"{int(value)}" if args.metric == "weight" else f"{value:.6g}"
        print(f"{name:<{width}}  {shown}")
    if args.out is not None:
        evaluation.write_importance(rows, args.metric, args.out)


def cmd_bench(args: argparse.Namespace) -> None:
    _, rtg_cfg, matrix = _load_training_data(args)
    env = envs.make_env(args.env)
    report, _ = evaluation.benchmark(
        _boost_config(args), matrix, env, rtg_cfg,
        trials=args.trials, inference_calls=args.inference_calls, threads=args.threads,
    )
    tr, inf = report.training_time, report.inference_time_per_action
    print(f"training time   mean {tr.mean:.4g} s  std {tr.std:.3g} s  ({tr.n} trials)")
    print(f"inference/act   mean {inf.mean:.4g} s  std {inf.std:.3g} s  ({inf.n} calls)")
    if args.out is not None:
        evaluation.write_timing(report, args.out)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "importance": cmd_importance,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    _print_config(args)
    try:
        COMMANDS[args.command](args)
    except (RtgBoostError, OSError, ValueError) as exc:
        print(f"rtgboost {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
