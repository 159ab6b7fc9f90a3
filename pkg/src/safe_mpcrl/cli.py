"""The ``safe-mpcrl`` command line: train, evaluate and check gradients from a config file.

Exit codes: 0 on success, 1 when a quality threshold is breached (solver-failure rate or
gradient check), 2 on configuration or usage errors.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from safe_mpcrl.bundle_utils import ResultBundle, dumps_json, export_bundle
from safe_mpcrl.config import ConfigError, load_config
from safe_mpcrl.gradcheck import run_gradient_checks
from safe_mpcrl.mpc import default_theta
from safe_mpcrl.preset_registry import SAFE_MPCRL_PRESETS, UnknownPresetError
from safe_mpcrl.theta import ThetaVector
from safe_mpcrl.trainer import QLearningTrainer, run_training
from safe_mpcrl.version_utils import package_versions

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "SAFE_MPCRL_LOG_LEVEL"

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_USAGE = 2


def build_parser():
    """The argument parser with one subcommand per action."""
    parser = argparse.ArgumentParser(
        prog="safe-mpcrl",
        description="Q-learning of CBF-constrained MPC controllers.",
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help=f"Logging verbosity (default: ${LOG_LEVEL_ENV} or INFO).",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(s):
        s.add_argument("--config", required=True, help="The experiment YAML file.")
        s.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
        s.add_argument("--out", default=None, help="Overrides the output directory.")

    train = sub.add_parser("train", help="Run Q-learning and write the result bundle.")
    add_common(train)
    train.add_argument("--episodes", type=int, default=None, help="Overrides the episode count.")

    evaluate = sub.add_parser("evaluate", help="Roll out a parameter snapshot without exploration.")
    add_common(evaluate)
    evaluate.add_argument(
        "--snapshot", default=None, help="A theta.json snapshot (initial theta if omitted)."
    )

    check = sub.add_parser("check-gradients", help="Run the finite-difference gradient checks.")
    add_common(check)
    check.add_argument("--instances", type=int, default=20, help="Random instances per suite.")

    sub.add_parser("presets", help="List the built-in presets.")
    return parser


def configure_logging(level=None, environ=None):
    """Configure the root logger from a flag or the environment."""
    environ = os.environ if environ is None else environ
    level = level or environ.get(LOG_LEVEL_ENV, "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load(args):
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if len(updates) > 0:
        cfg = cfg.model_copy(update=updates)
    return cfg


def _meta(cfg, command, runtime, **extra):
    return {
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": package_versions(),
        "runtime_seconds": runtime,
        **extra,
    }


def cmd_train(args):
    """Train, export the bundle and check the solver-failure rate."""
    cfg = _load(args)
    out_dir = cfg.output_dir
    world = cfg.build_world()
    mpc_cfg = cfg.mpc_config(out_dir)
    trainer_cfg = cfg.trainer_config(log_path=os.path.join(out_dir, "training_log.jsonl"))
    theta0 = default_theta(mpc_cfg, world, np.random.default_rng(cfg.seed))

    logger.info(f"Training {cfg.variant} (preset {cfg.preset}) with {len(theta0)} parameters.")
    started = time.perf_counter()
    result = run_training(mpc_cfg, world, theta0, trainer_cfg, n_episodes=args.episodes)
    runtime = time.perf_counter() - started

    final = result.final
    bundle = ResultBundle(
        costs=result.records,
        trajectory=None if final is None else final.trajectory,
        theta=result.theta,
        theta_trace=result.theta_trace,
        meta=_meta(
            cfg,
            "train",
            runtime,
            failure_rate=result.failure_rate,
            final_cumulative_cost=None if final is None else final.cumulative_cost,
        ),
    )
    export_bundle(bundle, out_dir)

    if result.failure_rate > cfg.trainer.max_failure_rate:
        logger.error(
            f"Solver failure rate {result.failure_rate:.3f} exceeds {cfg.trainer.max_failure_rate:.3f}."
        )
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_evaluate(args):
    """Roll out a snapshot (or the initial parameters) and export the bundle."""
    cfg = _load(args)
    out_dir = cfg.output_dir
    world = cfg.build_world()
    mpc_cfg = cfg.mpc_config(out_dir)
    trainer_cfg = cfg.trainer_config()

    theta = default_theta(mpc_cfg, world, np.random.default_rng(cfg.seed))
    if args.snapshot is not None:
        snapshot = ThetaVector.load(args.snapshot)
        if not snapshot.same_layout(theta):
            raise ValueError(
                f"The snapshot {args.snapshot} does not match the {cfg.variant} parameter layout."
            )
        theta = snapshot

    started = time.perf_counter()
    rollout = QLearningTrainer(mpc_cfg, world, trainer_cfg).evaluate(theta)
    runtime = time.perf_counter() - started

    record = {
        "episode": 0,
        "cumulative_cost": rollout.cumulative_cost,
        "slack_penalty": cfg.trainer.w_rl * rollout.slack_total,
        "min_h": rollout.trajectory.min_barrier(),
    }
    failure_rate = rollout.failures / max(len(rollout.trajectory), 1)
    bundle = ResultBundle(
        costs=[record],
        trajectory=rollout.trajectory,
        theta=theta,
        meta=_meta(cfg, "evaluate", runtime, snapshot=args.snapshot, failure_rate=failure_rate),
    )
    export_bundle(bundle, out_dir)
    print(f"cumulative cost {rollout.cumulative_cost:.6g}, min h {record['min_h']:.6g}")

    if failure_rate > cfg.trainer.max_failure_rate:
        logger.error(f"Solver failure rate {failure_rate:.3f} exceeds {cfg.trainer.max_failure_rate:.3f}.")
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_check_gradients(args):
    """Run the gradient suites and report the worst relative errors."""
    cfg = _load(args)
    world = cfg.build_world()
    mpc_cfg = cfg.mpc_config()
    results = run_gradient_checks(mpc_cfg, world, n_instances=args.instances, seed=cfg.seed)

    print(f"{'suite':<14}{'checked':>8}{'skipped':>8}{'max rel err':>14}  status")
    for res in results:
        status = "ok" if res.passed else "FAIL"
        skipped = sum(res.skipped.values())
        print(f"{res.suite:<14}{res.checked:>8}{skipped:>8}{res.max_rel_error:>14.3e}  {status}")

    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "gradcheck.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json({"suites": [res.to_record() for res in results], "seed": cfg.seed}, indent=2))
        fh.write("\n")

    return EXIT_OK if all(res.passed for res in results) else EXIT_THRESHOLD


def cmd_presets(args):
    """Print the registered presets."""
    for name in SAFE_MPCRL_PRESETS.names():
        print(SAFE_MPCRL_PRESETS[name])
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "check-gradients": cmd_check_gradients,
    "presets": cmd_presets,
}


def main(argv=None):
    """Run the command line and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    configure_logging(args.log_level)

    try:
        return COMMANDS[args.cmd](args)
    except (ConfigError, UnknownPresetError, FileNotFoundError) as err:
        logger.error(f"{args.cmd}: {err}")
        return EXIT_USAGE
    except ValueError as err:
        logger.error(f"{args.cmd}: invalid input: {err}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
