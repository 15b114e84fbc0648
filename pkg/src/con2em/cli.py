"""Command line entry point.

    con2em run --config moons.json [--seed 0 --seed 1] [--target 3] [--method erm]
               [--ablate no_dist_mixup] [--set lr=1e-3] [--out DIR]
    con2em compare RUN_A RUN_B [--label-a con2em --label-b baseline] [--out report.json]
    con2em sweep --config blobs.json --param lambda_mix --values 0.1,0.5,0.9 [--out DIR]
    con2em emit-plot-data LOG.jsonl|RUN_DIR [--out PATH]

Output directories default to ``$CON2EM_OUT/<config name>`` (``runs/`` when
the variable is unset). Exit status: 0 success, 1 run failure, 2 bad config
or arguments.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .experiment import (
    ComparisonError,
    ConfigError,
    ResultsTable,
    compare,
    emit_plot_data,
    format_comparison,
    load_config,
    run_experiment,
    sweep,
)
from .training import read_log

log = logging.getLogger("con2em")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
OUT_ENV = "CON2EM_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.name


def _load(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed:
        changes["seeds"] = args.seed
    if args.target is not None:
        changes["target_domain"] = args.target
    if args.method:
        changes["method"] = args.method
        changes["ablation_sweep"] = False
    if args.ablate:
        changes["ablate"] = args.ablate
        changes["ablation_sweep"] = False
    if args.set:
        changes["train"] = {**cfg.train, **_parse_set(args.set)}
    if changes:
        try:
            cfg = dataclasses.replace(cfg, **changes)
        except ConfigError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    return cfg


def _progress(row, elapsed):
    log.info("%s target=%d seed=%d acc=%.4f best_val=%.4f@%d (%.1fs)", row.label, row.target,
             row.seed, row.target_acc, row.best_val_acc, row.best_iter, elapsed)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    table = run_experiment(cfg, out, progress=_progress)
    print(table.format())
    print(f"results written to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    out = _out_dir(args, cfg)
    summary = sweep(cfg, args.param, values, out, progress=_progress)
    for res in summary["results"]:
        cols = ", ".join(f"{k}={100 * v:.1f}" for k, v in res.items() if k != "value")
        print(f"{args.param}={res['value']}: {cols}")
    print(f"sweep written to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = ResultsTable.read(args.a), ResultsTable.read(args.b)
    report = compare(a, b, args.label_a, args.label_b)
    print(format_comparison(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_emit_plot_data(args) -> int:
    src = Path(args.log)
    if src.is_dir():
        logs = sorted((src / "logs").glob("*.jsonl")) if (src / "logs").is_dir() else sorted(src.glob("*.jsonl"))
        if not logs:
            raise FileNotFoundError(f"no logs under {src}")
        dest = Path(args.out) if args.out else src / "curves"
        dest.mkdir(parents=True, exist_ok=True)
        for path in logs:
            emit_plot_data(read_log(path), dest / f"{path.stem}.tsv")
        print(f"{len(logs)} curve files written to {dest}")
    else:
        dest = Path(args.out) if args.out else src.with_suffix(".tsv")
        emit_plot_data(read_log(src), dest)
        print(f"curve written to {dest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="con2em", description="Distribution-level domain generalization experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_args(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        sp.add_argument("--target", type=int, help="held-out domain id")
        sp.add_argument("--method", choices=["erm", "erm_mixup", "con2em"])
        sp.add_argument("--ablate", action="append", choices=["no_dist_loss", "no_dist_mixup", "no_resample"])
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="training option override")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name>)")

    run = sub.add_parser("run", help="train and evaluate")
    experiment_args(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="repeat a run over values of one training option")
    experiment_args(sw)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, help="comma-separated")
    sw.set_defaults(func=cmd_sweep)

    cmp_ = sub.add_parser("compare", help="paired comparison of two result sets")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--label-a")
    cmp_.add_argument("--label-b")
    cmp_.add_argument("--out")
    cmp_.set_defaults(func=cmd_compare)

    plot = sub.add_parser("emit-plot-data", help="convert training logs to curve files")
    plot.add_argument("log", help="a log .jsonl file or a run directory")
    plot.add_argument("--out")
    plot.set_defaults(func=cmd_emit_plot_data)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"con2em: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"con2em: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ComparisonError, OSError, ValueError, KeyError) as exc:
        print(f"con2em: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception:
        log.exception("run failed")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
