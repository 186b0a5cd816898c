"""``dvgen`` command line.

Verbs: ``gen-data``, ``train``, ``generate``, ``evaluate``, ``report``.
Configuration comes from defaults, then ``--config FILE``, then repeated
``--set section.key=value``; ``--seed`` overrides ``run.seed``.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .checkpoint import load as load_checkpoint
from .errors import CheckpointError, ConfigError, DataError, EmptyFrame, NonFiniteValue, NotPositiveDefinite
from .runconfig import RunConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dvgen")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=10")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dvgen", description="Diverse video generation on synthetic walker clips.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="run directory for model.ckpt and train_log.csv")
    s.add_argument("--resume", help="continue from this checkpoint (its config is the base)")

    s = sub.add_parser("generate", parents=[common], help="roll out traces from dataset contexts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("none", "fixed", "gp_variance"), help="shorthand for trigger.mode")
    s.add_argument("--samples", type=int, help="shorthand for generate.samples")
    s.add_argument("--horizon", type=int, help="shorthand for generate.horizon")
    s.add_argument("--workers", type=int, help="shorthand for generate.workers")
    s.add_argument("--ground-truth", action="store_true",
                   help="write the real continuations instead of model rollouts")

    s = sub.add_parser("evaluate", parents=[common], help="score traces against ground truth")
    s.add_argument("--traces", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", parents=[common], help="compare several evaluation reports")
    s.add_argument("reports", nargs="+", help="report directories, optionally LABEL=DIR")
    s.add_argument("--out", required=True)
    return p


def _config(args, base: RunConfig | None = None) -> RunConfig:
    if base is None:
        cfg = load_config(args.config, args.overrides, args.seed)
    else:
        cfg = RunConfig.from_dict(base.to_dict())
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        if args.seed is not None:
            cfg.values["run"]["seed"] = args.seed
        cfg.validate()
    for flag, key in (("mode", "trigger.mode"), ("samples", "generate.samples"),
                      ("horizon", "generate.horizon"), ("workers", "generate.workers")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, str(value))
    return cfg.validate()


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "gen-data":
            out = pipeline.gen_data(_config(args), args.out)
        elif args.verb == "train":
            if args.resume:
                if args.config:
                    raise ConfigError("--resume takes its config from the checkpoint; drop --config")
                cfg = _config(args, load_checkpoint(args.resume).config)
            else:
                cfg = _config(args)
            out = pipeline.train(cfg, args.data, args.out, resume=args.resume)
        elif args.verb == "generate":
            cfg = _config(args)
            if args.ground_truth:
                context = load_checkpoint(args.checkpoint).config["train.context"]
                out = pipeline.ground_truth_traces(cfg, args.data, args.out, context)
            else:
                out = pipeline.generate(cfg, args.checkpoint, args.data, args.out)
        elif args.verb == "evaluate":
            pipeline.evaluate(_config(args), args.traces, args.data, args.out)
            out = args.out
        else:
            _config(args)
            labels, dirs = [], []
            for item in args.reports:
                label, _, d = item.rpartition("=")
                labels.append(label or d)
                dirs.append(d)
            out = pipeline.report(dirs, labels, args.out)
    except ConfigError as exc:
        print(f"dvgen: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteValue as exc:
        where = f" in {exc.component}" if exc.component else ""
        print(f"dvgen: numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NotPositiveDefinite as exc:
        print(f"dvgen: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DataError, EmptyFrame, OSError) as exc:
        print(f"dvgen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
