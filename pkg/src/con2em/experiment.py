"""Config-driven experiments: training runs, ablation rows, sweeps and reports.

A config is a JSON object::

    {
      "name": "moons_ablation",
      "dataset": {"generator": "rotated_moons", "params": {"noise_std": 0.2}},
      "method": "con2em",            # erm | erm_mixup | con2em
      "ablate": [],                  # no_dist_loss | no_dist_mixup | no_resample
      "ablation_sweep": false,       # true -> baseline / wo_dist_loss / wo_dist_mixup / con2em
      "preset": "con2em",            # con2em (B=32) | con2em-l (B=88)
      "train": {"lr": 1e-3, "max_iters": 1500},
      "target_domain": 3,            # int or list of ints
      "seeds": [0, 1, 2, 3, 4],
      "log_every": 10
    }

``dataset`` may instead be ``{"path": "file.csv"}`` to load an exported
dataset. When ``params`` has no ``seed`` the dataset is regenerated from each
run seed.

Files written under the output directory:

- ``config.json``: the resolved config.
- ``results.jsonl``: one row per (variant, target, seed).
- ``summary.json``: mean and std of target accuracy per (variant, target).
- ``logs/<variant>__t<target>__s<seed>.jsonl``: training records.
- ``checkpoints/<variant>__t<target>__s<seed>.npz``: best-validation model.
- ``datasets/seed<seed>.csv``: the dataset each seed trained on.
- ``timing.jsonl``: wall-clock seconds per run.

Everything except ``timing.jsonl`` is a pure function of the config.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DomainDataset, generate, load_dataset, save_dataset
from .training import (
    METHODS,
    TrainConfig,
    TrainRecord,
    evaluate,
    fit,
    read_log,
    rng_states,
    save_checkpoint,
    write_log,
)

ABLATIONS = {"no_dist_loss": "dist_loss", "no_dist_mixup": "dist_mixup", "no_resample": "resample"}
PRESETS = {"con2em": {"batch_size": 32}, "con2em-l": {"batch_size": 88}}
ABLATION_ROWS = (
    ("baseline", "erm", ()),
    ("wo_dist_loss", "con2em", ("no_dist_loss",)),
    ("wo_dist_mixup", "con2em", ("no_dist_mixup",)),
    ("con2em", "con2em", ()),
)
CURVE_TAG = "con2em-curve v1"
CURVE_COLUMNS = ("iter", "L_ins", "L_dis", "L_total", "beta", "train_acc", "val_acc")


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


class ComparisonError(ValueError):
    """Result sets cannot be paired."""


@dataclass
class Variant:
    label: str
    method: str
    ablate: tuple[str, ...] = ()

    def train_overrides(self) -> dict:
        out = {"method": self.method}
        for flag in self.ablate:
            out[ABLATIONS[flag]] = False
        return out


@dataclass
class ExperimentConfig:
    dataset: dict
    name: str = "experiment"
    method: str = "con2em"
    ablate: list[str] = field(default_factory=list)
    ablation_sweep: bool = False
    preset: str | None = None
    train: dict = field(default_factory=dict)
    target_domain: int | list[int] = -1
    seeds: list[int] = field(default_factory=lambda: [0])
    log_every: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}; choose from {sorted(ABLATIONS)}")
        if self.ablate and self.method != "con2em":
            raise ConfigError("ablation flags require method 'con2em'")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if "generator" not in self.dataset and "path" not in self.dataset:
            raise ConfigError("dataset needs a 'generator' or a 'path'")
        try:
            self.base_train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    @property
    def targets(self) -> list[int]:
        return list(self.target_domain) if isinstance(self.target_domain, list) else [self.target_domain]

    def variants(self) -> list[Variant]:
        if self.ablation_sweep:
            return [Variant(*row) for row in ABLATION_ROWS]
        label = "+".join([self.method, *self.ablate])
        return [Variant(label, self.method, tuple(self.ablate))]

    def base_train_config(self, **extra) -> TrainConfig:
        values = dict(PRESETS.get(self.preset or "", {}))
        values.update(self.train)
        values.update(extra)
        return TrainConfig.from_dict(values)

    def to_dict(self) -> dict:
        return asdict(self)


def _line_of(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a JSON experiment config; errors carry ``source:line``."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be an object")
    allowed = {f for f in ExperimentConfig.__dataclass_fields__}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{source}:{_line_of(text, key)}: unknown key {key!r}")
    try:
        return ExperimentConfig(**raw)
    except ConfigError as exc:
        key = next((k for k in raw if k in str(exc)), None)
        line = _line_of(text, key) if key else None
        raise ConfigError(f"{source}:{line or 1}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{source}:1: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# -- results -------------------------------------------------------------------
@dataclass
class ResultRow:
    label: str
    method: str
    ablate: list[str]
    target: int
    seed: int
    target_acc: float
    best_val_acc: float
    best_iter: int
    wall_s: float | None = None

    def metrics(self) -> dict:
        """Everything but wall time, which lives in ``timing.jsonl``."""
        out = asdict(self)
        del out["wall_s"]
        return out


class ResultsTable:
    """Raw per-run rows plus their (recomputable) aggregate."""

    def __init__(self, rows: list[ResultRow] | None = None):
        self.rows = list(rows or [])

    def append(self, row: ResultRow) -> None:
        self.rows.append(row)

    def labels(self) -> list[str]:
        return list(dict.fromkeys(r.label for r in self.rows))

    def select(self, label: str) -> list[ResultRow]:
        return [r for r in self.rows if r.label == label]

    def aggregate(self) -> list[dict]:
        groups: dict[tuple[str, int], list[ResultRow]] = {}
        for r in self.rows:
            groups.setdefault((r.label, r.target), []).append(r)
        out = []
        for (label, target), rows in groups.items():
            acc = np.array([r.target_acc for r in rows])
            val = np.array([r.best_val_acc for r in rows])
            out.append({"label": label, "target": target, "n": len(rows),
                        "target_acc_mean": float(acc.mean()),
                        "target_acc_std": float(acc.std(ddof=1)) if len(rows) > 1 else 0.0,
                        "best_val_acc_mean": float(val.mean())})
        return out

    def mean(self, label: str, target: int | None = None) -> float:
        rows = [r for r in self.select(label) if target is None or r.target == target]
        return float(np.mean([r.target_acc for r in rows]))

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "results.jsonl", "w") as fh:
            for r in self.rows:
                fh.write(json.dumps(r.metrics(), sort_keys=True) + "\n")
        with open(out_dir / "timing.jsonl", "w") as fh:
            for r in self.rows:
                fh.write(json.dumps({"run": run_name(r.label, r.target, r.seed), "wall_s": r.wall_s}) + "\n")
        (out_dir / "summary.json").write_text(json.dumps(self.aggregate(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "ResultsTable":
        path = Path(path)
        if path.is_dir():
            path = path / "results.jsonl"
        with open(path) as fh:
            table = cls([ResultRow(**json.loads(line)) for line in fh if line.strip()])
        timing = path.parent / "timing.jsonl"
        if timing.exists():
            with open(timing) as fh:
                wall = {t["run"]: t["wall_s"] for t in map(json.loads, fh)}
            for r in table.rows:
                r.wall_s = wall.get(run_name(r.label, r.target, r.seed))
        return table

    def format(self) -> str:
        lines = [f"{'variant':<16}{'target':>7}{'n':>4}  accuracy (%)"]
        for a in self.aggregate():
            lines.append(f"{a['label']:<16}{a['target']:>7}{a['n']:>4}  "
                         f"{100 * a['target_acc_mean']:.1f} ± {100 * a['target_acc_std']:.1f}")
        return "\n".join(lines)


# -- running ---------------------------------------------------------------------
def build_dataset(cfg: ExperimentConfig, seed: int) -> DomainDataset:
    if "path" in cfg.dataset:
        return load_dataset(cfg.dataset["path"])
    params = dict(cfg.dataset.get("params", {}))
    params.setdefault("seed", seed)
    try:
        return generate(cfg.dataset["generator"], params)
    except TypeError as exc:
        raise ConfigError(f"dataset params: {exc}") from None


def _resolve_target(dataset: DomainDataset, target: int) -> int:
    ids = dataset.domain_ids
    return ids[target] if target < 0 else target


def run_name(label: str, target: int, seed: int) -> str:
    return f"{label}__t{target}__s{seed}"


def run_experiment(cfg: ExperimentConfig, out_dir=None, train_extra: dict | None = None,
                   progress=None) -> ResultsTable:
    """Train every (seed, variant, target) combination and evaluate on the target."""
    table = ResultsTable()
    if out_dir is not None:
        out_dir = Path(out_dir)
        for sub in ("logs", "checkpoints", "datasets"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    for seed in cfg.seeds:
        dataset = build_dataset(cfg, seed)
        if out_dir is not None:
            save_dataset(dataset, out_dir / "datasets" / f"seed{seed}.csv")
        for target in cfg.targets:
            target = _resolve_target(dataset, target)
            holdout = dataset.domain(target)
            for variant in cfg.variants():
                extra = dict(train_extra or {})
                extra.update(variant.train_overrides())
                extra["seed"] = seed
                tcfg = cfg.base_train_config(**extra)
                start = time.perf_counter()
                result = fit(dataset, tcfg, target_domain=target, split_seed=seed)
                acc = evaluate(result.model, holdout.X, holdout.y)
                elapsed = time.perf_counter() - start
                row = ResultRow(variant.label, variant.method, list(variant.ablate), target, seed,
                                acc, result.best_val_acc, result.best_iter, elapsed)
                table.append(row)
                name = run_name(variant.label, target, seed)
                if out_dir is not None:
                    write_log(out_dir / "logs" / f"{name}.jsonl", result.log, every=cfg.log_every)
                    save_checkpoint(out_dir / "checkpoints" / f"{name}.npz", result.model, tcfg,
                                    result.best_bank, result.trainer.kernel, rng_states(result.trainer),
                                    dataset.input_dim)
                if progress:
                    progress(row, elapsed)

    if out_dir is not None:
        table.write(out_dir)
    return table


# -- comparison ------------------------------------------------------------------
def compare(a: ResultsTable, b: ResultsTable, label_a: str | None = None,
            label_b: str | None = None) -> dict:
    """Paired per-target comparison of target accuracy, ``a - b``, across seeds."""
    label_a = label_a or (a.labels()[0] if a.rows else None)
    label_b = label_b or (b.labels()[0] if b.rows else None)
    rows_a = {(r.target, r.seed): r.target_acc for r in a.select(label_a)}
    rows_b = {(r.target, r.seed): r.target_acc for r in b.select(label_b)}
    if not rows_a or set(rows_a) != set(rows_b):
        raise ComparisonError(f"(target, seed) sets differ: {sorted(rows_a)} vs {sorted(rows_b)}")
    report = {"a": label_a, "b": label_b, "targets": []}
    for target in sorted({t for t, _ in rows_a}):
        seeds = sorted(s for t, s in rows_a if t == target)
        diffs = [rows_a[target, s] - rows_b[target, s] for s in seeds]
        report["targets"].append({
            "target": target, "seeds": seeds, "diffs": diffs,
            "mean_diff": float(np.mean(diffs)),
            "wins": sum(d > 0 for d in diffs), "ties": sum(d == 0 for d in diffs),
            "losses": sum(d < 0 for d in diffs)})
    return report


def format_comparison(report: dict) -> str:
    lines = [f"{report['a']} vs {report['b']}"]
    for t in report["targets"]:
        lines.append(f"  target {t['target']}: mean diff {100 * t['mean_diff']:+.2f} pts, "
                     f"wins/ties/losses {t['wins']}/{t['ties']}/{t['losses']} over {len(t['seeds'])} seeds")
    return "\n".join(lines)


# -- plot data --------------------------------------------------------------------
def emit_plot_data(log: list[TrainRecord], path) -> None:
    """Tab-separated curve file: a ``# con2em-curve v1`` line, a header row, one row per record.

    Missing validation accuracy is written as ``nan``.
    """
    if not log:
        raise ValueError("cannot emit plot data for an empty log")
    lines = [f"# {CURVE_TAG}", "\t".join(CURVE_COLUMNS)]
    for r in log:
        vals = [r.iter, r.L_ins, r.L_dis, r.L_total, r.beta, r.train_acc,
                float("nan") if r.val_acc is None else r.val_acc]
        lines.append("\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_plot_data(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if lines[0] != f"# {CURVE_TAG}":
        raise ValueError(f"not a {CURVE_TAG} file")
    header = lines[1].split("\t")
    data = np.array([[float(v) for v in line.split("\t")] for line in lines[2:]]).reshape(-1, len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def mean_curve(logs: list[list[TrainRecord]]) -> list[TrainRecord]:
    """Average several logs that share the same iteration grid."""
    out = []
    for recs in zip(*logs):
        vals = [r.val_acc for r in recs if r.val_acc is not None]
        out.append(TrainRecord(
            recs[0].iter, *(float(np.mean([getattr(r, k) for r in recs]))
                            for k in ("L_ins", "L_dis", "L_total", "beta", "train_acc")),
            float(np.mean(vals)) if vals else None))
    return out


def sweep(cfg: ExperimentConfig, param: str, values: list, out_dir=None, progress=None) -> dict:
    """Re-run ``cfg`` once per value of a training option.

    With an output directory, each value gets its own run directory
    ``<param>=<value>/`` and a mean curve ``curves/<param>=<value>.tsv``;
    ``sweep.json`` lists the mean target accuracy per value and variant.
    """
    for value in values:
        try:
            cfg.base_train_config(**{param: value})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep {param}={value!r}: {exc}") from None
    summary = {"param": param, "values": list(values), "results": []}
    for value in values:
        sub = None if out_dir is None else Path(out_dir) / f"{param}={value}"
        table = run_experiment(cfg, sub, {param: value}, progress=progress)
        summary["results"].append({"value": value, **{lab: table.mean(lab) for lab in table.labels()}})
        if sub is not None:
            logs = [read_log(p) for p in sorted((sub / "logs").glob("*.jsonl"))]
            (Path(out_dir) / "curves").mkdir(exist_ok=True)
            emit_plot_data(mean_curve(logs), Path(out_dir) / "curves" / f"{param}={value}.tsv")
    if out_dir is not None:
        (Path(out_dir) / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


__all__ = [
    "ABLATIONS",
    "ABLATION_ROWS",
    "PRESETS",
    "ConfigError",
    "ComparisonError",
    "ExperimentConfig",
    "ResultRow",
    "ResultsTable",
    "Variant",
    "parse_config",
    "load_config",
    "build_dataset",
    "run_experiment",
    "compare",
    "format_comparison",
    "emit_plot_data",
    "read_plot_data",
    "mean_curve",
    "sweep",
]
