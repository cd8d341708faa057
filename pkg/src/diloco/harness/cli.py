"""Command line entry point: ``diloco <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 collective abort,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import CollectiveError, ConfigError, NumericError
from . import experiments
from .config import load_config
from .metrics import dumps, export_csv

EXIT_OK, EXIT_CONFIG, EXIT_COLLECTIVE, EXIT_NUMERIC = 0, 2, 3, 4


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must be key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _csv(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diloco", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    def config_args(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--output", help="metrics file (overrides the config)")
        p.add_argument("overrides", nargs="*", metavar="key=value")

    p = sub.add_parser("run", help="run in the mode named by the config")
    config_args(p)
    p.add_argument("--checkpoint-dir", help="write a checkpoint at every outer round")

    p = sub.add_parser("simulate", help="run all workers in virtual time")
    config_args(p)
    p.add_argument("--checkpoint-dir")

    p = sub.add_parser("ablate", help="sweep one axis over several seeds")
    config_args(p)
    p.add_argument("--axis", required=True, choices=sorted(experiments.AXES))
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--output-dir", default="runs/ablation")

    p = sub.add_parser("bench-allreduce", help="time one all-reduce and count its bytes")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--elements", type=int, default=1 << 20)
    p.add_argument("--precision", choices=("fp32", "fp16"), default="fp32")
    p.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    p.add_argument("--bandwidth-mbits", type=float, default=1000.0)
    p.add_argument("--chunk-size", type=int, default=1 << 20)

    p = sub.add_parser("export-csv", help="convert a metrics file to CSV")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--kind", default="inner", choices=("inner", "outer", "summary", "event"))

    p = sub.add_parser("resume", help="continue from a checkpoint directory")
    p.add_argument("checkpoint")
    p.add_argument("--output", help="metrics file to append to")
    p.add_argument("--checkpoint-dir")
    return parser


def _dispatch(args) -> None:
    if args.verb in ("run", "simulate", "ablate"):
        overrides = _overrides(args.overrides)
        if args.verb == "simulate":
            overrides["mode"] = "simulate"
        cfg = load_config(args.config, overrides)
        if args.verb == "ablate":
            result = experiments.ablation_suite(
                cfg, args.axis, _csv(args.values), [int(s) for s in _csv(args.seeds)], args.output_dir,
                progress=lambda axis, v, seed, s: print(f"{axis}={v} seed={seed} "
                                                       f"final_loss={s['final_loss']:.6f}", flush=True))
            for row in result.table():
                print(dumps(row))
            return
        summary = experiments.run_experiment(cfg, output=args.output, checkpoint_dir=args.checkpoint_dir)
        print(dumps(summary))
    elif args.verb == "bench-allreduce":
        print(dumps(experiments.bench_allreduce(args.workers, args.elements, args.precision,
                                                args.transport, args.bandwidth_mbits, args.chunk_size)))
    elif args.verb == "export-csv":
        try:
            n = export_csv(args.src, args.dst, args.kind)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot export {args.src}: {exc}") from None
        print(f"wrote {n} rows to {args.dst}")
    elif args.verb == "resume":
        try:
            summary = experiments.resume_experiment(args.checkpoint, output=args.output,
                                                    checkpoint_dir=args.checkpoint_dir)
        except OSError as exc:
            raise ConfigError(f"cannot resume from {args.checkpoint}: {exc}") from None
        print(dumps(summary))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CollectiveError as exc:
        print(f"collective aborted: {exc}", file=sys.stderr)
        return EXIT_COLLECTIVE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
