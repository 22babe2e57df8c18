"""Command line entry point: train, generate, evaluate, sweep, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import dp
from .pipeline import (
    ConfigError,
    _parse_eps,
    check_budget,
    evaluate_command,
    generate,
    load_config,
    privacy_report,
    report,
    run_experiment,
    train_model,
)
from .schema_io import SchemaError, load_dataset, load_schema, write_dataset
from .vae import ModelCheckpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PRIVACY = 0, 2, 3, 4

log = logging.getLogger("fairsynth")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _eps_list(text: str) -> list[float]:
    return [_parse_eps(v) for v in text.split(",") if v.strip()]


def _apply_overrides(cfg, args):
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.lambdas is not None:
        changes["lambdas"] = args.lambdas
    if args.epsilons is not None:
        changes["epsilons"] = args.epsilons
    if args.no_dp:
        changes["no_dp"] = True
        changes["privacy"] = None
    return replace(cfg, **changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    d = load_dataset(cfg.data, load_schema(cfg.schema))
    out = Path(cfg.out)
    ckpt = train_model(d, cfg, cfg.lambdas[0], cfg.epsilons[0], cfg.seed)
    ckpt.save(out / "checkpoint")
    prep = privacy_report(ckpt, d.group_sizes())
    if prep is not None:
        (out / "privacy.json").write_text(json.dumps(prep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    check_budget(prep)
    print(out / "checkpoint")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    synth = generate(ckpt, args.count, args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(synth, out)
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rep = evaluate_command(args.real, args.synth, args.schema, args.out)
    print(rep.to_json())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    status = run_experiment(cfg)
    print(json.dumps(status, indent=2, sort_keys=True))
    if any(v == "failed:privacy" for v in status.values()):
        return EXIT_PRIVACY
    if any(v.startswith("failed") for v in status.values()):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    print(json.dumps(report(args.run_dir), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairsynth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", required=True, help="RunConfig JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--no-dp", action="store_true", help="train without privacy (reported as epsilon = inf)")
        sp.add_argument("--lambda", dest="lambdas", type=_floats, help="comma-separated lambda grid")
        sp.add_argument("--epsilon", dest="epsilons", type=_eps_list, help="comma-separated epsilon grid; 'inf' = no DP")

    t = sub.add_parser("train", help="train one model on the full dataset (first lambda / epsilon)")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="cross-validated sweep over the lambda x epsilon grid")
    run_flags(s)
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("generate", help="sample a synthetic table from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output CSV")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="audit a synthetic CSV against a real CSV")
    e.add_argument("--real", required=True)
    e.add_argument("--synth", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--out", help="output stem for .json/.csv")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="aggregate a sweep directory into tables and plots")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except dp.PrivacyBudgetError as exc:
        log.error("%s", exc)
        return EXIT_PRIVACY
    except (ConfigError, SchemaError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
