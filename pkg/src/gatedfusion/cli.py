"""Command line entry point: ``gatedfusion {extract,reframe,synth,run}``.

Every subcommand accepts ``--config FILE`` (JSON); explicit flags override
values from the file. Exit codes: 0 success, 2 config error, 3 data error,
4 training error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataError, TrainingError
from .experiment import (
    ABLATIONS,
    SYNTHETIC_DEFAULTS,
    ExperimentConfig,
    load_config,
    run_experiment,
    run_extract,
    run_reframe,
    run_synth,
)

log = logging.getLogger("gatedfusion")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4


def _section(args, allowed: set) -> dict:
    cfg = load_config(args.config) if args.config else {}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required setting '{k}' (flag or config key)")


def cmd_extract(args) -> int:
    cfg = _section(args, {"records", "output"})
    if args.records:
        cfg["records"] = args.records
    if args.output:
        cfg["output"] = args.output
    _require(cfg, "records", "output")
    n = run_extract(cfg["records"], cfg["output"])
    log.info("wrote %d feature rows to %s", n, cfg["output"])
    return EXIT_OK


def cmd_reframe(args) -> int:
    cfg = _section(args, {"clusters", "output", "report"})
    for key in ("clusters", "output", "report"):
        if getattr(args, key):
            cfg[key] = getattr(args, key)
    _require(cfg, "clusters", "output", "report")
    report = run_reframe(cfg["clusters"], cfg["output"], cfg["report"])
    log.info(
        "dominant cluster %s holds %.5f of %d rows",
        report["dominant_cluster_id"], report["class0_fraction"], report["n_rows"],
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _section(args, set(SYNTHETIC_DEFAULTS) | {"seed", "output_dir"})
    cfg = {**SYNTHETIC_DEFAULTS, "seed": 0, **cfg}
    for key in ("n", "d", "separation", "aux_signal", "class0_fraction", "seed", "output_dir"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    _require(cfg, "output_dir")
    try:
        info = run_synth(
            cfg["output_dir"], cfg["n"], cfg["d"], cfg["separation"],
            cfg["aux_signal"], cfg["class0_fraction"], cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    log.info("wrote %s and %s", info["embeddings"], info["features"])
    return EXIT_OK


def cmd_run(args) -> int:
    raw = load_config(args.config) if args.config else {}
    if args.synthetic and "synthetic" not in raw and "data" not in raw:
        raw["synthetic"] = {}
    if args.embeddings or args.features or args.labels:
        data = dict(raw.pop("data", None) or {})
        raw.pop("synthetic", None)
        for key in ("embeddings", "features", "labels"):
            if getattr(args, key):
                data[key] = getattr(args, key)
        if args.dim is not None:
            data["dim"] = args.dim
        raw["data"] = data
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.ablations:
        raw["ablations"] = [a for a in args.ablations.split(",") if a]
    cfg = ExperimentConfig.from_dict(raw)
    reports = run_experiment(cfg)
    for name, r in reports.items():
        log.info(
            "%-15s acc=%.5f f1=%.5f mcc=%.5f brier=%.5f logloss=%.5f ece=%.5f",
            name, r.accuracy, r.macro_f1, r.mcc, r.brier, r.log_loss, r.ece,
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute auxiliary features from an id,popularity,text CSV")
    p.add_argument("--config")
    p.add_argument("--records", help="input CSV with columns id,popularity,text")
    p.add_argument("--output", help="features CSV to write")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("reframe", help="binary labels from cluster labels")
    p.add_argument("--config")
    p.add_argument("--clusters", help="CSV with id and cluster_label columns")
    p.add_argument("--output", help="labels CSV to write (id,label)")
    p.add_argument("--report", help="reframing report JSON to write")
    p.set_defaults(func=cmd_reframe)

    p = sub.add_parser("synth", help="write a synthetic embeddings + features corpus")
    p.add_argument("--config")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--aux-signal", dest="aux_signal", type=float)
    p.add_argument("--class0-fraction", dest="class0_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="train and evaluate the selected configurations")
    p.add_argument("--config")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablations", help=f"comma list from {','.join(ABLATIONS)}")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic generator defaults")
    p.add_argument("--embeddings")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingError as exc:
        log.error("training error: %s", exc)
        return EXIT_TRAINING
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
