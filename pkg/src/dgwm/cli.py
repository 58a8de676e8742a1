"""``dgwm`` command line: config loading, seeded trials and result files.

Configs are flat ``key=value`` text files (``#`` starts a comment). Every
key is also a ``--key-name`` flag, and flags win over the file. Outputs go
to ``<output_dir>/<run_id>/`` where ``run_id`` is derived from the command
and the config, so repeating a command rewrites the same directory.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import analysis, verify
from .data import ShiftSpec, SplitPlan, export_dataset, generate, import_dataset, split
from .errors import ParameterError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import TrainConfig, accuracy, train

COMMANDS = ("train", "eval", "ablate", "verify", "sweep", "gen-data", "add-domains", "overhead")


# -- value parsers --------------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _word(text: str) -> str:
    return text.strip().replace("-", "_")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    section: str  # data | split | train | model | run
    attr: str
    parse: Callable[[str], Any]


# ``num_classes`` and ``input_dim`` live in the data section and are copied
# into the model config; ``data_seed`` and ``split_seed`` are the generator
# and split seeds, ``seed`` the base training seed.
SCHEMA: dict[str, Key] = {
    "shift_kind": Key("data", "shift_kind", _word),
    "num_domains": Key("data", "num_domains", int),
    "num_classes": Key("data", "num_classes", int),
    "input_dim": Key("data", "input_dim", int),
    "samples_per_class_per_domain": Key("data", "samples_per_class_per_domain", int),
    "shift_strength": Key("data", "shift_strength", float),
    "class_sep": Key("data", "class_sep", float),
    "class_frequencies": Key("data", "class_frequencies", _optional(_floats)),
    "data_seed": Key("data", "seed", int),
    "target_domain": Key("split", "target_domain", _optional(int)),
    "setting": Key("split", "setting", _word),
    "labels_per_class": Key("split", "labels_per_class", int),
    "labeled_domain": Key("split", "labeled_domain", _optional(int)),
    "source_domains": Key("split", "source_domains", _optional(_ints)),
    "split_seed": Key("split", "seed", int),
    **{f.name: Key("train", f.name, {"int": int, "float": float, "bool": _bool, "str": _word}[f.type])
       for f in fields(TrainConfig)},
    "feature_dim": Key("model", "feature_dim", int),
    "latent_dim": Key("model", "latent_dim", _optional(int)),
    "hidden": Key("model", "hidden", _ints),
    "epsilon_sq": Key("model", "epsilon_sq", float),
    "noise_mode": Key("model", "noise_mode", _word),
    "aggregation": Key("model", "aggregation", _word),
    "detach_domain_info": Key("model", "detach_domain_info", _bool),
    "mask_variant": Key("model", "mask_variant", _word),
    "separate_classifiers": Key("model", "separate_classifiers", _bool),
    "trials": Key("run", "trials", int),
    "seed_stride": Key("run", "seed_stride", int),
    "output_dir": Key("run", "output_dir", _optional(str)),
    "dataset": Key("run", "dataset", _optional(str)),
}

RUN_DEFAULTS = {"trials": 5, "seed_stride": 1, "output_dir": None, "dataset": None}


@dataclass
class ExperimentConfig:
    """Flat experiment settings; ``values`` maps schema keys to parsed values (unset keys use defaults)."""

    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise ParameterError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        self.validate()

    def _section(self, name: str) -> dict:
        return {SCHEMA[k].attr: v for k, v in self.values.items() if SCHEMA[k].section == name}

    def get(self, key: str):
        if key in self.values:
            return self.values[key]
        if key in RUN_DEFAULTS:
            return RUN_DEFAULTS[key]
        k = SCHEMA[key]
        cls = {"data": ShiftSpec, "train": TrainConfig, "split": SplitPlan, "model": ModelConfig}[k.section]
        default = {f.name: f.default for f in fields(cls)}.get(k.attr)
        return default

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(**self._section("data"))

    def split_plan(self, num_domains: int | None = None) -> SplitPlan:
        kw = self._section("split")
        if kw.get("target_domain") is None:
            kw["target_domain"] = (num_domains or self.shift_spec().num_domains) - 1
        return SplitPlan(**kw)

    def train_config(self, trial: int = 0) -> TrainConfig:
        cfg = TrainConfig(**self._section("train"))
        return replace(cfg, seed=cfg.seed + trial * self.get("seed_stride"))

    def model_config(self, input_dim: int | None = None, num_classes: int | None = None) -> ModelConfig:
        spec = self.shift_spec()
        return ModelConfig(input_dim=input_dim or spec.input_dim, num_classes=num_classes or spec.num_classes,
                           **self._section("model"))

    def trial_seeds(self) -> list[int]:
        return [self.train_config(i).seed for i in range(self.get("trials"))]

    def validate(self) -> None:
        if self.get("trials") < 1:
            raise ParameterError("trials must be >= 1")
        self.shift_spec()
        self.split_plan()
        self.train_config()
        self.model_config()

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())
                if SCHEMA[k].section != "run" or k in ("trials", "seed_stride", "dataset")}


def parse_assignments(lines: Sequence[str], origin: str = "<config>") -> dict[str, Any]:
    """Parse ``key=value`` lines; raises ParameterError naming the offending line."""
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{origin}:{no}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise ParameterError(f"{origin}:{no}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            raise ParameterError(f"{origin}:{no}: bad value for {key}: {exc}") from None
    return out


def load_config(path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a flat config file; ``overrides`` (already parsed) take precedence."""
    path = Path(path)
    values = parse_assignments(path.read_text().splitlines(), str(path))
    values.update(overrides or {})
    return ExperimentConfig(values)


# -- argument parsing ------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dgwm", description="Domain-guided weight modulation for semi-supervised DG.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "train": "train seeded trials and aggregate their metrics",
        "eval": "evaluate a saved checkpoint on every domain",
        "ablate": "run one trial set per cell of a config grid",
        "verify": "run the exact property checks",
        "sweep": "threshold (tau) or noise-variance (epsilon) sweep",
        "gen-data": "write a synthetic multi-domain dataset as CSV",
        "add-domains": "PL accuracy as source domains are added",
        "overhead": "per-epoch wall time with modulation off vs on",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--run-id", help="output subdirectory name (default: derived from the config)")
        for key in SCHEMA:
            p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="model .npz written by train")
        elif name == "ablate":
            p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2",
                           help="config key and comma-separated values (repeatable)")
        elif name == "verify":
            p.add_argument("--full", action="store_true", help="full-size instance counts")
        elif name == "sweep":
            p.add_argument("--kind", choices=("tau", "epsilon"), default="tau")
            p.add_argument("--values", help="comma-separated thresholds or variances")
        elif name == "overhead":
            p.add_argument("--repeats", type=int, default=3)
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for key in SCHEMA:
        raw = getattr(args, "cfg_" + key)
        if raw is not None:
            try:
                overrides[key] = SCHEMA[key].parse(raw)
            except ValueError as exc:
                raise ParameterError(f"--{key.replace('_', '-')}: {exc}") from None
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig(overrides)


# -- output helpers ----------------------------------------------------------------


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(cfg.get("output_dir") or os.environ.get("DGWM_OUTPUT_DIR") or "runs")


def run_dir(command: str, cfg: ExperimentConfig, args, extra: dict | None = None) -> Path:
    run_id = args.run_id or f"{command}-{analysis.config_hash({'config': cfg.to_dict(), **(extra or {})})}"
    path = output_root(cfg) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(type(v))


def _clean(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def aggregate(per_trial: list[dict]) -> dict:
    """Mean and population std per metric over trials (NaN entries skipped)."""
    out = {}
    for key in per_trial[0]:
        vals = np.array([np.nan if t[key] is None else t[key] for t in per_trial], dtype=float)
        good = vals[np.isfinite(vals)]
        out[key] = {"mean": _clean(good.mean()) if good.size else None,
                    "std": _clean(good.std()) if good.size else None,
                    "values": [_clean(v) for v in vals]}
    return out


def _fmt_stat(stat: dict) -> str:
    if stat["mean"] is None:
        return "n/a"
    return f"{stat['mean']:.4f} +/- {stat['std']:.4f}"


def load_data(cfg: ExperimentConfig):
    return import_dataset(cfg.get("dataset")) if cfg.get("dataset") else generate(cfg.shift_spec())


def _trial_metrics(rec) -> dict:
    pl = rec.series("pl_accuracy")
    tail = pl[4:] if len(pl) > 4 else pl
    return {
        "final_target_accuracy": _clean(rec.final_target_accuracy),
        "mean_pl_accuracy": _clean(float(np.nanmean(pl))) if np.isfinite(pl).any() else None,
        "mean_pl_accuracy_from_epoch_5": _clean(float(np.nanmean(tail))) if np.isfinite(tail).any() else None,
        "mean_pl_utilization": _clean(float(np.mean(rec.series("pl_utilization")))),
        "final_loss_labeled": _clean(float(rec.series("loss_labeled")[-1])),
        "final_loss_unlabeled": _clean(float(rec.series("loss_unlabeled")[-1])),
    }


def run_trials(cfg: ExperimentConfig, out: Path, dataset=None, save_models: bool = True,
               log: Callable[[str], None] = print) -> dict:
    """Train every trial, write per-trial files, return the aggregate."""
    dataset = dataset if dataset is not None else load_data(cfg)
    view = split(dataset, cfg.split_plan(len(dataset.domains)))
    mcfg = cfg.model_config(dataset.input_dim, view.num_classes)
    per_trial, timing = [], {}
    for i in range(cfg.get("trials")):
        tcfg = cfg.train_config(i)
        if tcfg.epochs < 1:
            raise ParameterError("training needs epochs >= 1")
        bundle, rec = train(view, tcfg, mcfg)
        tdir = out / f"trial_{i}"
        tdir.mkdir(exist_ok=True)
        rec.to_csv(tdir / "history.csv", include_wall=False)
        metrics = _trial_metrics(rec)
        write_json(tdir / "metrics.json", {"seed": tcfg.seed, **metrics})
        if save_models:
            save_checkpoint(bundle, tdir / "model.npz")
        timing[f"trial_{i}"] = rec.series("wall_seconds").tolist()
        per_trial.append(metrics)
        log(f"trial {i} (seed {tcfg.seed}): target accuracy {metrics['final_target_accuracy']:.4f}")
    agg = aggregate(per_trial)
    write_json(out / "aggregate.json", {"config": cfg.to_dict(), "seeds": cfg.trial_seeds(), "metrics": agg})
    write_json(out / "timing.json", timing)
    return agg


# -- commands -------------------------------------------------------------------------


def cmd_train(cfg, args) -> int:
    out = run_dir("train", cfg, args)
    agg = run_trials(cfg, out)
    for key, stat in agg.items():
        print(f"{key:32s} {_fmt_stat(stat)}")
    print(f"results in {out}")
    return 0


def cmd_eval(cfg, args) -> int:
    out = run_dir("eval", cfg, args, {"checkpoint": str(Path(args.checkpoint).resolve())})
    bundle = load_checkpoint(args.checkpoint)
    dataset = load_data(cfg)
    if dataset.input_dim != bundle.cfg.input_dim:
        raise ParameterError(f"checkpoint expects {bundle.cfg.input_dim} inputs, data has {dataset.input_dim}")
    plan = cfg.split_plan(len(dataset.domains))
    accs = {str(k): accuracy(bundle, d.x, d.y) for k, d in enumerate(dataset.domains)}
    result = {"checkpoint": str(args.checkpoint), "target_domain": plan.target_domain,
              "target_accuracy": accs[str(plan.target_domain)], "domain_accuracy": accs}
    write_json(out / "eval.json", result)
    for k, a in accs.items():
        print(f"domain {k}{' (target)' if int(k) == plan.target_domain else ''}: {a:.4f}")
    return 0


def _grid(specs: list[str]) -> list[tuple[str, list[Any]]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ParameterError(f"--grid expects KEY=V1,V2, got {spec!r}")
        key, vals = spec.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in SCHEMA or SCHEMA[key].section == "run":
            raise ParameterError(f"cannot sweep over {key!r}")
        # list-valued keys take ';' between grid values since ',' is their own separator
        sep = ";" if key in ("hidden", "source_domains", "class_frequencies") else ","
        try:
            axes.append((key, [SCHEMA[key].parse(v) for v in vals.split(sep)]))
        except ValueError as exc:
            raise ParameterError(f"--grid {key}: {exc}") from None
    return axes


def cmd_ablate(cfg, args) -> int:
    axes = _grid(args.grid)
    out = run_dir("ablate", cfg, args, {"grid": args.grid})
    rows = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        cell = dict(zip((k for k, _ in axes), combo))
        cell_cfg = ExperimentConfig({**cfg.values, **cell})
        name = "_".join(f"{k}-{v}" for k, v in cell.items()).replace(",", "+").replace(" ", "")
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        print(f"cell {name}")
        agg = run_trials(cell_cfg, cdir, save_models=False, log=lambda s: print("  " + s))
        rows.append({**{k: ",".join(map(str, v)) if isinstance(v, tuple) else v for k, v in cell.items()},
                     "target_accuracy_mean": agg["final_target_accuracy"]["mean"],
                     "target_accuracy_std": agg["final_target_accuracy"]["std"],
                     "pl_accuracy_mean": agg["mean_pl_accuracy"]["mean"],
                     "pl_accuracy_std": agg["mean_pl_accuracy"]["std"]})
    _write_table(out / "summary.csv", rows)
    print(_render(rows))
    return 0


def _write_table(path: Path, rows: list[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})


def _render(rows: list[dict]) -> str:
    cols = list(rows[0])
    cells = [[("n/a" if r[c] is None else f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])) for c in cols]
             for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_verify(cfg, args) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        results = verify.run_all(tmp, quick=not args.full)
    table = verify.format_table(results)
    print(table)
    if args.config or args.run_id or cfg.get("output_dir") or os.environ.get("DGWM_OUTPUT_DIR"):
        out = run_dir("verify", cfg, args, {"full": args.full})
        (out / "verify.txt").write_text(table + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_sweep(cfg, args) -> int:
    out = run_dir("sweep", cfg, args, {"kind": args.kind, "values": args.values})
    dataset = load_data(cfg)
    view = split(dataset, cfg.split_plan(len(dataset.domains)))
    mcfg = cfg.model_config(dataset.input_dim, view.num_classes)
    try:
        values = _floats(args.values) if args.values else None
    except ValueError as exc:
        raise ParameterError(f"--values: {exc}") from None
    if args.kind == "epsilon":
        values = values or (0.1, 0.5, 1.0, 2.0)
        res = analysis.epsilon_sweep(view, cfg.train_config(), mcfg, values, cfg.trial_seeds())
        rows = [{"epsilon_sq": e, "mean_target_accuracy": r["mean"], "std_target_accuracy": r["std"],
                 "finite": r["finite"]} for e, r in res.items()]
    else:
        taus = values or analysis.SWEEP_TAUS
        rows = []
        for i in range(cfg.get("trials")):
            tcfg = cfg.train_config(i)
            bundle, _ = train(view, replace(tcfg, modulation=True), mcfg)
            res = analysis.threshold_sweep(bundle, analysis.held_batches(view), taus)
            rows += [{"seed": tcfg.seed, **r} for r in res.to_rows()]
    _write_table(out / "sweep.csv", rows)
    print(_render(rows))
    return 0


def cmd_gen_data(cfg, args) -> int:
    out = run_dir("gen-data", cfg, args)
    path = export_dataset(generate(cfg.shift_spec()), out / "dataset.csv")
    print(f"wrote {path}")
    return 0


def cmd_add_domains(cfg, args) -> int:
    out = run_dir("add-domains", cfg, args)
    dataset = load_data(cfg)
    plan = cfg.split_plan(len(dataset.domains))
    mcfg = cfg.model_config(dataset.input_dim, dataset.spec.num_classes)
    rows = []
    for i in range(cfg.get("trials")):
        tcfg = cfg.train_config(i)
        res = analysis.adding_domains_study(dataset, replace(plan, seed=plan.seed + i), tcfg, mcfg)
        for n in res.prefix_sizes:
            for mod in (False, True):
                rows.append({"seed": tcfg.seed, "n_sources": n, "modulated": mod,
                             "pl_accuracy_first": res.pl_accuracy(n, mod), "pl_accuracy_all":
                             res.pl_accuracy(n, mod, "all"),
                             "target_accuracy": res.runs[(n, mod)].final_target_accuracy})
    _write_table(out / "add_domains.csv", rows)
    print(_render(rows))
    return 0


def cmd_overhead(cfg, args) -> int:
    out = run_dir("overhead", cfg, args, {"repeats": args.repeats})
    dataset = load_data(cfg)
    view = split(dataset, cfg.split_plan(len(dataset.domains)))
    rep = analysis.overhead_report(view, cfg.train_config(), cfg.model_config(dataset.input_dim, view.num_classes),
                                   args.repeats)
    write_json(out / "overhead.json", {"seconds_off": rep.seconds_off, "seconds_on": rep.seconds_on,
                                       "percent": rep.percent})
    print(f"modulation off {rep.seconds_off:.4f} s/epoch, on {rep.seconds_on:.4f} s/epoch, "
          f"overhead {rep.percent:.1f}%")
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "verify": cmd_verify, "sweep": cmd_sweep,
            "gen-data": cmd_gen_data, "add-domains": cmd_add_domains, "overhead": cmd_overhead}


def run_command(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand. 0 on success, 2 on usage or config errors, 1 on runtime failure."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](cfg, args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
