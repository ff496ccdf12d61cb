"""Command-line entry point: gen-data, train, probe, sweep and report.

Output goes to ``--out``, else ``$FAIRDROP_OUT``, else ``./fairdrop-out``.
Every command writes deterministic artifacts plus ``<command>.meta.json``,
the only file that carries timestamps.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .data import SyntheticSpec, generate, group_stats, save_csv, write_group_stats
from .errors import ConfigError, DataFormatError, ShapeError, TrainingDiverged
from .experiment import ExperimentConfig, load_splits, run_probe, run_sweep, run_training
from .fairdropout import MODES, TEST
from .metrics import generalization_gap
from .nn import load_model, save_model
from .seeding import derive_seed
from .tables import SCHEMAS, read_rows, write_json, write_rows

log = logging.getLogger("fairdrop")

ENV_OUT = "FAIRDROP_OUT"
DEFAULT_OUT = "fairdrop-out"

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def output_dir(args) -> Path:
    out = Path(args.out or os.environ.get(ENV_OUT) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def read_config(args) -> dict:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None


def experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(read_config(args))
    return cfg if args.seed is None else cfg.with_seed(args.seed)


def write_metadata(out: Path, command: str, started: dt.datetime, outputs: list[str], extra=None) -> None:
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "started": started.isoformat(timespec="seconds"),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": outputs,
        **(extra or {}),
    }
    write_json(meta, out / f"{command}.meta.json")


def write_schema(out: Path) -> None:
    write_json(SCHEMAS, out / "schema.json")


# ----- commands -----

def cmd_gen_data(args, out: Path) -> list[str]:
    raw = read_config(args)
    if "group_spec" in raw:
        spec = SyntheticSpec.from_dict(raw)
        if args.seed is not None:
            spec.seed = derive_seed(args.seed, "data")
    else:
        cfg = ExperimentConfig.from_dict(raw)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        spec = cfg.synthetic_spec()
        if spec is None:
            raise ConfigError("gen-data needs a synthetic spec, not a CSV directory")
    splits = generate(spec)
    files = []
    for ds in splits:
        save_csv(ds, out / f"{ds.split}.csv")
        files.append(f"{ds.split}.csv")
    write_group_stats(group_stats(splits[0]), out / "group_stats.csv")
    write_json(spec.to_dict(), out / "spec.json")
    write_schema(out)
    return files + ["group_stats.csv", "spec.json", "schema.json"]


def final_metrics(history, splits) -> dict:
    out = {}
    for split in splits:
        for mode in MODES:
            ms = history.get(split, mode)
            if ms:
                m = ms[-1]
                out[f"{split}/{mode}_mode"] = {
                    "average_accuracy": m.average_accuracy,
                    "worst_group_accuracy": m.worst_group_accuracy,
                    "worst_class_accuracy": m.worst_class_accuracy,
                    "loss": m.loss,
                    "per_group_accuracy": {f"{y},{a}": v for (y, a), v in sorted(m.per_group_accuracy.items())},
                }
    return out


def cmd_train(args, out: Path) -> list[str]:
    cfg = experiment(args)
    write_json(cfg.to_dict(), out / "config.json")
    write_schema(out)
    try:
        model, history, _ = run_training(cfg)
    except TrainingDiverged as exc:
        if exc.history is not None:
            write_rows(exc.history.rows(), out / "history.csv")
        raise
    write_rows(history.rows(), out / "history.csv")
    save_model(model, out / "model.json")
    summary = final_metrics(history, ("train", "val", "test"))
    if history.entries:
        gaps = generalization_gap(history.final("train", TEST), history.final("test", TEST))
        summary["generalization_gap_test_mode"] = {f"{y},{a}": v for (y, a), v in sorted(gaps.items())}
    summary["parameter_checksum"] = model.parameter_checksum()
    write_json(summary, out / "final_metrics.json")
    return ["config.json", "schema.json", "history.csv", "model.json", "final_metrics.json"]


def cmd_probe(args, out: Path) -> list[str]:
    cfg = experiment(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.json"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    try:
        model = load_model(ckpt)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{ckpt} is not a valid checkpoint: {exc}") from None
    train_ds, _, test = load_splits(cfg)
    report = run_probe(cfg, model, train_ds, test)
    write_rows(report.table(), out / "probe.csv", list(SCHEMAS["probe.csv"]["columns"]))
    write_json(report.summary(), out / "probe_summary.json")
    write_schema(out)
    return ["probe.csv", "probe_summary.json", "schema.json"]


def cmd_sweep(args, out: Path) -> list[str]:
    cfg = experiment(args)
    grid = cfg.grid
    if args.grid:
        grid = json.loads(Path(args.grid).read_text())
    rows = run_sweep(cfg, grid)
    flat = [r.flat() for r in rows]
    columns = list(SCHEMAS["sweep.csv"]["columns"])
    for row in flat:
        columns += [k for k in row if k not in columns]
    write_rows(flat, out / "sweep.csv", columns)
    write_schema(out)
    failed = sum(r.status != "ok" for r in rows)
    if failed:
        log.warning("%d of %d sweep points failed; see the status column", failed, len(rows))
    return ["sweep.csv", "schema.json"]


def cmd_report(args, out: Path) -> list[str]:
    run = Path(args.run) if args.run else out
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    made, summary = [], {}
    if (run / "history.csv").exists():
        rows = read_rows(run / "history.csv")
        if rows:
            plotting.accuracy_curves(rows, fig_dir / "accuracy_curves.png")
            made.append("figures/accuracy_curves.png")
            last = max(int(r["epoch"]) for r in rows)
            summary["final_epoch"] = {r["split"]: {k: v for k, v in r.items() if k.endswith(("wga", "avg", "wca"))}
                                      for r in rows if int(r["epoch"]) == last}
    if (run / "probe.csv").exists():
        rows = read_rows(run / "probe.csv")
        base = json.loads((run / "probe_summary.json").read_text())
        plotting.removal_counts(rows, fig_dir / "removal_counts.png")
        plotting.wga_after_drop(rows, base["baseline_train_wga"], base["baseline_test_wga"],
                                fig_dir / "wga_after_drop.png")
        made += ["figures/removal_counts.png", "figures/wga_after_drop.png"]
        summary["probe"] = base
    if (run / "sweep.csv").exists():
        rows = read_rows(run / "sweep.csv")
        plotting.sweep_modes(rows, fig_dir / "sweep_modes.png")
        made.append("figures/sweep_modes.png")
        summary["sweep_best"] = rows[0] if rows else None
    if not made:
        raise FileNotFoundError(f"no history.csv, probe.csv or sweep.csv in {run}")
    write_json(summary, out / "report.json")
    return made + ["report.json"]


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate train/val/test CSVs and group statistics"),
    "train": (cmd_train, "train a model and record per-epoch metrics in both modes"),
    "probe": (cmd_probe, "localize critical units for minority and majority examples"),
    "sweep": (cmd_sweep, "train over a hyperparameter grid, ranked by validation worst-class accuracy"),
    "report": (cmd_report, "render figures and a JSON summary from a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdrop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (or synthetic spec for gen-data)")
    common.add_argument("--seed", type=int, help="top-level seed; overrides the config")
    common.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "probe":
            p.add_argument("--checkpoint", help="model JSON (default <out>/model.json)")
        if name == "sweep":
            p.add_argument("--grid", help="JSON grid: axes mapping or list of points")
        if name == "report":
            p.add_argument("--run", help="directory holding run outputs (default <out>)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = dt.datetime.now(dt.timezone.utc)
    func = COMMANDS[args.command][0]
    try:
        out = output_dir(args)
        outputs = func(args, out)
    except TrainingDiverged as exc:
        log.error("training diverged: %s (partial history kept)", exc)
        return EXIT_DIVERGED
    except (ConfigError, ShapeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataFormatError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    write_metadata(out, args.command, started, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
