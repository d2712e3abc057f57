"""Command-line entry points for the benchmark pipeline.

Exit codes: 0 success, 2 configuration error (bad config file, bad paths,
unknown methods), 3 numerical failure (a covariance matrix stayed
non-positive-definite after regularization).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench, recsim
from .bench import ConfigError
from .linalg import NotSPDError
from .variance import DegenerateComponentsError


def _cmd_generate_world(args) -> int:
    world = recsim.generate_world(args.seed, args.topics, args.docs, args.users)
    recsim.save_world(world, args.out)
    print(f"wrote world (K={args.topics}, D={args.docs}) to {args.out}")
    return 0


def _cmd_train_pool(args) -> int:
    world = recsim.load_world(args.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    temperatures = [float(x) for x in args.temperatures.split(",")]
    for k in range(args.size):
        seed_k = args.seed * 1_000_003 + k
        policy = recsim.reinforce_train(
            recsim.initial_policy(world, seed_k, temperature=temperatures[k % len(temperatures)]),
            world,
            episodes=args.episodes + k * args.episode_step,
            lr=args.lr,
            seed=seed_k + 1,
            gamma=args.gamma,
            max_len=args.max_len,
        )
        recsim.save_policy(policy, out / f"policy_{k:02d}.json")
        print(f"trained policy_{k:02d} ({args.episodes + k * args.episode_step} episodes)")
    return 0


def _cmd_collect(args) -> int:
    world = recsim.load_world(args.world)
    policy = recsim.load_policy(args.policy)
    ds = recsim.collect(
        policy, world, args.n, args.max_len, args.seed, policy_id=args.policy_id
    )
    from .core import save_multidataset

    save_multidataset(ds, args.out)
    print(f"wrote {ds.n} trajectories to {args.out}")
    return 0


def _run_report(args, runner) -> int:
    cfg = bench.load_config(args.config)
    if args.seed is not None:
        cfg.world_seed = args.seed
    out = Path(args.out)
    pool = bench.build_pool(cfg, cache_dir=out / "cache")
    report = runner(cfg, pool)
    written = bench.emit_report(report, out, args.format)
    from . import plots

    written.append(plots.render_report(report, out))
    for path in written:
        print(f"wrote {path}")
    if report.sweep == "t":
        for method, t in sorted(bench.best_t(report).items()):
            print(f"best T for {method}: {t}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ope-mix",
        description="Off-policy evaluation benchmark with mixture estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-world", help="sample and save a recommender world")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topics", type=int, default=20)
    p.add_argument("--docs", type=int, default=100)
    p.add_argument("--users", type=int, default=5)
    p.set_defaults(func=_cmd_generate_world)

    p = sub.add_parser("train-pool", help="train a pool of behavior policies")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=10)
    p.add_argument("--episodes", type=int, default=120)
    p.add_argument("--episode-step", type=int, default=160)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--temperatures", default="0.6,1.0,1.5")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=_cmd_train_pool)

    p = sub.add_parser("collect", help="log trajectories from a saved policy")
    p.add_argument("--world", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy-id", default="pi")
    p.set_defaults(func=_cmd_collect)

    for name, runner, help_text in (
        ("evaluate", lambda cfg, pool: bench.run_rotation(cfg, pool),
         "rotation protocol at the configured M"),
        ("sweep-m", lambda cfg, pool: bench.sweep_m(cfg, pool),
         "MSE across the M grid"),
        ("sweep-t", lambda cfg, pool: bench.sweep_t(cfg, pool),
         "MSE across the mixing-horizon grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="reports")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured world seed")
        p.set_defaults(func=lambda args, r=runner: _run_report(args, r))

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NotSPDError, DegenerateComponentsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
