"""Command-line entry point: ``flsnn run|sweep|gen-data|baseline <config>``.

Exit status is 0 on success, 2 on configuration errors and 1 on runtime
errors. Set ``FLSNN_LOG_LEVEL`` (e.g. ``INFO``, ``DEBUG``) for progress logs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from flsnn.errors import ConfigurationError
from flsnn.experiment import baseline_config, generate_data, parse_config, run_experiment, sweep

log = logging.getLogger("flsnn")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flsnn", description="Federated training of probabilistic SNNs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides the config)")

    p = sub.add_parser("sweep", help="repeat a run over values of tau or rate")
    p.add_argument("config")
    p.add_argument("--key", required=True, choices=["tau", "rate"])
    p.add_argument("--values", required=True, help="comma-separated, e.g. 5,50,400 or 1/8,1/4")
    p.add_argument("-j", "--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("-o", "--output")

    p = sub.add_parser("gen-data", help="write the synthetic dataset as raster files")
    p.add_argument("config")
    p.add_argument("-o", "--output")

    p = sub.add_parser("baseline", help="separate training (no synchronization)")
    p.add_argument("config")
    p.add_argument("-o", "--output")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FLSNN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.command == "run":
            res = run_experiment(cfg, args.output)
            print(f"mean final accuracy {res.mean_accuracy:.4f}, mean final test loss {res.mean_loss:.4f}")
        elif args.command == "baseline":
            res = run_experiment(baseline_config(cfg).replace(baseline=False), args.output)
            print(f"separate training: mean final accuracy {res.mean_accuracy:.4f}, "
                  f"mean final test loss {res.mean_loss:.4f}")
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            if args.jobs < 1:
                raise ConfigurationError("--jobs must be >= 1")
            for row in sweep(cfg, args.key, values, args.output, jobs=args.jobs):
                print(",".join(str(x) for x in row))
        elif args.command == "gen-data":
            for path in generate_data(cfg, args.output):
                print(path)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        if getattr(exc, "filename", None) == args.config:
            print(f"configuration error: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
