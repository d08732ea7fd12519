"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config key,
unknown task, incompatible checkpoint), 3 runtime failure (divergence, I/O).
Log verbosity comes from the ``DIFFPLAN_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from diffplan import datagen, evaluate, finetune, pretrain, rollout, tasks
from diffplan.config import Config, load_config
from diffplan.denoiser import load_checkpoint
from diffplan.errors import ConfigError

log = logging.getLogger("diffplan")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _parse_sets(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, seed_keys: tuple[str, ...] = ()) -> Config:
    overrides = _parse_sets(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        for key in seed_keys:
            overrides[key] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _suite(config: Config | None = None):
    length = config.env.episode_length if config is not None else tasks.DEFAULT_EPISODE_LENGTH
    return tasks.register_default_suite(length)




# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.suite != "default":
        raise ConfigError("suite", f"unknown suite {args.suite!r}; only 'default' exists")
    suite = tasks.register_default_suite(args.episode_length)
    data, stats = datagen.generate_dataset(suite, args.episodes_per_task, args.noise, args.seed)
    datagen.write_dataset(args.out, data, stats)
    for task_id, st in stats.items():
        print(f"{task_id}: episodes={st['episodes']} success_rate={st['success_rate']:.4f} "
              f"mean_return={st['mean_return']:.4f}")
    print(f"wrote {len(data)} records to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _config(args, ("pretrain.seed",))
    data = datagen.read_dataset(args.data)
    suite = _suite(config)
    known = {spec.task_id for spec in suite}
    unknown = sorted(set(data.task_ids) - known)
    if unknown:
        raise ConfigError("data", f"dataset has tasks {unknown} that are not in the suite")
    res = pretrain.pretrain(config, data, suite, out_path=args.out, metrics_path=args.metrics)
    final = res.log_rows[-1]["loss"] if res.log_rows else float("nan")
    print(f"pretrained {config.pretrain.steps} steps, last logged loss {final:.6f}; wrote {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    config = _config(args, ("finetune.seed",))
    spec = tasks.get_task(_suite(config), args.task)
    ckpt = load_checkpoint(args.ckpt)
    evaluate.check_compatible(ckpt, spec)
    res = finetune.finetune_task(ckpt, spec, config, metrics_path=args.metrics, out_path=args.out)
    last = res.rows[-1] if res.rows else {}
    print(
        f"finetuned {spec.task_id} with regularizer={config.finetune.regularizer}: "
        f"rounds={len(res.rows)} rolling_success={last.get('rolling_success', float('nan')):.4f}; wrote {args.out}"
    )
    return EXIT_OK


def _eval_kwargs(config: Config) -> dict:
    d = config.diffusion
    return dict(
        T_a=config.env.T_a,
        ddim_steps=d.ddim_steps,
        eta=0.0 if config.eval.deterministic else d.eta,
        min_std=0.0 if config.eval.deterministic else d.min_std,
        clip_x0=d.clip_x0,
    )


def cmd_eval(args) -> int:
    config = _config(args)
    spec = tasks.get_task(_suite(config), args.task)
    ckpt = load_checkpoint(args.ckpt)
    episodes = args.episodes if args.episodes is not None else config.eval.episodes
    if episodes < 1:
        raise ConfigError("episodes", "must be >= 1")
    res = evaluate.evaluate(ckpt, spec, episodes=episodes, seed=args.seed, **_eval_kwargs(config))
    print(f"task={spec.task_id} episodes={episodes} success_rate={res.success_rate:.4f} "
          f"mean_return={res.mean_return:.4f}")
    return EXIT_OK


def cmd_export_traj(args) -> int:
    config = _config(args)
    spec = tasks.get_task(_suite(config), args.task)
    ckpt = load_checkpoint(args.ckpt)
    evaluate.check_compatible(ckpt, spec)
    if args.n < 0:
        raise ConfigError("n", "must be >= 0")
    kw = _eval_kwargs(config)
    planner = rollout.planner_from_checkpoint(ckpt, kw["ddim_steps"], kw["eta"], kw["min_std"], kw["clip_x0"])
    seeds, rng = evaluate.eval_seeds(args.seed, args.n)
    episodes = rollout.run_episodes(planner, spec, seeds, rng, T_a=kw["T_a"]) if args.n else []
    evaluate.export_trajectories(episodes, args.out, spec.S, spec.A)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    text = evaluate.ablation_report(args.inputs, args.out, metric=args.metric)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffplan", description="Diffusion planner pre-training and RL fine-tuning.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def config_flags(p, seed=True):
        p.add_argument("--config", help="YAML config file with dotted keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            p.add_argument("--seed", type=int, help="seed for all randomness of this command")

    p = sub.add_parser("gen-data", help="generate the sub-optimal multi-task dataset")
    p.add_argument("--suite", default="default")
    p.add_argument("--episodes-per-task", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episode-length", type=int, default=tasks.DEFAULT_EPISODE_LENGTH)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train the planner on a dataset")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="CSV path for the loss log")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on one task")
    config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="CSV path for per-round metrics")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    config_flags(p, seed=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-traj", help="dump evaluation trajectories as CSV")
    config_flags(p, seed=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_traj)

    p = sub.add_parser("report", help="summarize metrics CSVs into a table")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--metric", default="rolling_success")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("DIFFPLAN_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"diffplan: error: {exc}\n")
        return EXIT_USAGE
    except (ConfigError, KeyError) as exc:
        sys.stderr.write(f"diffplan: invalid input: {exc.args[0] if exc.args else exc}\n")
        return EXIT_VALIDATION
    except ValueError as exc:
        sys.stderr.write(f"diffplan: invalid input: {exc}\n")
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("failure", exc_info=True)
        sys.stderr.write(f"diffplan: failed: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
