"""Command-line entry point: ``audio2loco <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

import yaml
from threadpoolctl import threadpool_limits

from . import pipeline
from .config import (
    ABLATION_AXES, RunConfig, apply_overrides, config_from_dict, config_to_dict, load_config, load_yaml,
)
from .errors import ConfigError, MissingArtifact, NumericalFailure

log = logging.getLogger("audio2loco")


def _global_flags():
    # SUPPRESS lets the same flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="YAML run config or a manifest to replay")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (overrides the config)")
    g.add_argument("--out", default=argparse.SUPPRESS, help="run directory (overrides the config)")
    g.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing outputs")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS/OpenMP thread cap (1 = reproducible)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                   help="override one config key, e.g. --set ppo.iterations=5 (repeatable)")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging")
    return p


def build_parser():
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="audio2loco", parents=[common],
                                     description="Audio-driven motion tracking: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic train and held-out corpora")
    sub.add_parser("train-align", parents=[common], help="train the motion VAE and the audio adaptor")
    sub.add_parser("train-teacher", parents=[common], help="PPO training of the mixture-of-experts teacher")
    sub.add_parser("distill", parents=[common], help="DAgger distillation of the diffusion student")

    ev = sub.add_parser("eval", parents=[common], help="closed-loop evaluation of a checkpoint")
    ev.add_argument("--policy", choices=["teacher", "student"], default="student")
    ev.add_argument("--split", choices=["train", "held_out"], default=None)
    ev.add_argument("--clips", type=int, default=None, help="evaluate only the first N clips")
    ev.add_argument("--ablate", metavar="AXIS=VALUE", default=None, help="apply and label one ablation setting")
    ev.add_argument("--label", default=None)
    ev.add_argument("--trajectories", action="store_true", help="dump per-clip trajectories as CSV")
    ev.add_argument("--shuffle-control", action="store_true", help="also evaluate on beat-shuffled audio")

    ab = sub.add_parser("ablate", parents=[common], help="run one ablation axis and write a comparison table")
    ab.add_argument("axis", choices=ABLATION_AXES)
    ab.add_argument("--values", default=None, help="comma-separated grid (default: from the config)")
    ab.add_argument("--seeds", default=None, help="comma-separated seeds (default: from the config)")

    fm = sub.add_parser("filter-motions", parents=[common], help="CoM/CoP stability filter over a corpus")
    fm.add_argument("--input", default=None, help="corpus directory (default: the run's training corpus)")

    bs = sub.add_parser("bas", parents=[common], help="beat alignment of reference clips vs a shuffled control")
    bs.add_argument("--input", default=None, help="corpus directory (default: the run's eval split)")
    return parser


def _parse_scalar(text):
    return load_yaml(text)


def resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    pairs = []
    for item in getattr(args, "set", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        pairs.append((key.strip(), value))
    if pairs:
        cfg = apply_overrides(cfg, pairs)
    raw = config_to_dict(cfg)
    for flag in ("seed", "out", "threads"):
        if hasattr(args, flag):
            raw[flag] = getattr(args, flag)
    if getattr(args, "split", None):
        raw["eval"]["split"] = args.split
    if getattr(args, "clips", None) is not None:
        raw["eval"]["clips"] = args.clips
    if getattr(args, "trajectories", False):
        raw["eval"]["trajectories"] = True
    if getattr(args, "shuffle_control", False):
        raw["eval"]["shuffle_control"] = True
    if getattr(args, "seeds", None):
        raw["ablate"]["seeds"] = [int(s) for s in args.seeds.split(",")]
    return config_from_dict(raw)


def run(args):
    cfg = resolve_config(args)
    with threadpool_limits(limits=cfg.threads):
        return dispatch(args, cfg)


def dispatch(args, cfg):
    layout = pipeline.Layout(cfg.out)
    force = getattr(args, "force", False)
    cmd = args.command
    if cmd == "gen-data":
        return pipeline.gen_data(cfg, layout, force)
    if cmd == "train-align":
        return pipeline.train_align(cfg, layout, force)
    if cmd == "train-teacher":
        return pipeline.cmd_train_teacher(cfg, layout, force)
    if cmd == "distill":
        return pipeline.cmd_distill(cfg, layout, force)
    if cmd == "eval":
        label = args.label
        if args.ablate:
            axis, sep, value = args.ablate.partition("=")
            if not sep or axis not in ABLATION_AXES:
                raise ConfigError("eval.ablate", f"expected AXIS=VALUE with AXIS in {list(ABLATION_AXES)}")
            cfg = pipeline._variant(cfg, axis, _parse_scalar(value))
            label = label or f"{args.policy}_{cfg.eval.split}_{axis}={value}"
        return pipeline.cmd_eval(cfg, layout, args.policy, label)
    if cmd == "ablate":
        values = [_parse_scalar(v) for v in args.values.split(",")] if args.values else None
        return pipeline.cmd_ablate(cfg, layout, args.axis, values)
    if cmd == "filter-motions":
        return pipeline.cmd_filter(cfg, layout, args.input)
    if cmd == "bas":
        return pipeline.cmd_bas(cfg, layout, args.input)
    raise ConfigError("command", f"unknown command {cmd!r}")


EXPECTED_ERRORS = (ConfigError, MissingArtifact, pipeline.OutputExists, pipeline.RateMismatch, NumericalFailure)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if getattr(args, "verbose", 0) > 1 else logging.INFO if getattr(args, "verbose", 0) else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, dict):
        print(yaml.safe_dump(_summary(result), sort_keys=False).rstrip())
    return 0


def _summary(obj):
    if isinstance(obj, dict):
        return {str(k): _summary(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_summary(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


if __name__ == "__main__":
    sys.exit(main())
