"""Command-line experiment runner.

Verbs::

    fplsim run --config exp.toml [--seed N] [--subset N] [--out DIR] [--dry-run]
    fplsim report RESULTS_DIR
    fplsim rates --distance 100 --rbs 1 [--direction up|down]
    fplsim traffic --config exp.toml [--epochs 1]

Settings resolve as: command-line flag > config file > built-in default.
The EMNIST directory comes from ``[data] root`` or $FPLSIM_EMNIST_ROOT.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from . import data as datamod
from .engine import train
from .errors import ConfigurationError, FplsimError, IngestionError
from .graph import build_leaf_cnn, load_graph
from .metrics import EnergyModel, CALIBRATED_PUE, predict_traffic, write_json
from .netsim import DOWNLINK, UPLINK, LinkModel, expected_rate
from .strategy import ParadigmConfig, build_structure

log = logging.getLogger("fplsim")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_EMPTY = 0, 1, 2, 3
COMPARISON_COLUMNS = ("strategy", "experiment", "seed", "accuracy", "params", "train_time_s", "comm_bytes",
                      "energy_kwh", "carbon_g", "best_epoch", "epochs_run")
REPORT_METRICS = ("accuracy", "params", "train_time_s", "comm_bytes", "energy_kwh", "carbon_g", "best_epoch")

PARADIGM_KEYS = {f.name for f in fields(ParadigmConfig)} - {"options"}
DATA_DEFAULTS = {"source": "emnist", "root": "", "split": "byclass", "train_subset": 10000,
                 "test_subset": 2000, "num_sources": 5, "overlapping_views": False}
LINK_KEYS = {f.name for f in fields(LinkModel)}
ENERGY_KEYS = {f.name for f in fields(EnergyModel)} | {"preset"}


@dataclass
class ExperimentConfig:
    experiments: dict            # name -> ParadigmConfig
    data: dict
    link: LinkModel
    energy: EnergyModel
    seeds: list
    out: Path
    architecture: str = "leaf"
    num_classes: int = 62
    raw: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {
            "experiments": {k: asdict(v) for k, v in self.experiments.items()},
            "data": self.data,
            "network": asdict(self.link),
            "energy": asdict(self.energy),
            "seeds": self.seeds,
            "model": {"architecture": self.architecture, "num_classes": self.num_classes},
        }


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"{name}: expected a table")
    return value


def _check_keys(table: dict, allowed, path: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{path}.{unknown[0]}: unknown setting")


def parse_config(raw: dict, seed=None, subset=None, out=None, base_dir=".") -> ExperimentConfig:
    """Validate a parsed TOML document; any bad field raises ConfigurationError naming its path."""
    run = _section(raw, "run")
    _check_keys(run, {"seeds", "out"}, "run")
    seeds = [int(seed)] if seed is not None else [int(s) for s in run.get("seeds", [1, 2, 3])]
    if not seeds:
        raise ConfigurationError("run.seeds: need at least one seed")

    data = {**DATA_DEFAULTS, **_section(raw, "data")}
    _check_keys(data, DATA_DEFAULTS, "data")
    if subset is not None:
        data["train_subset"] = int(subset)
    if data["source"] not in ("emnist", "synthetic"):
        raise ConfigurationError(f"data.source: expected 'emnist' or 'synthetic', got {data['source']!r}")
    for key in ("train_subset", "test_subset", "num_sources"):
        if not isinstance(data[key], int) or data[key] < 1:
            raise ConfigurationError(f"data.{key}: expected a positive integer")

    net = _section(raw, "network")
    _check_keys(net, LINK_KEYS, "network")
    try:
        link = LinkModel(**net)
    except ConfigurationError as exc:
        raise ConfigurationError(f"network: {exc}") from None

    energy_raw = dict(_section(raw, "energy"))
    _check_keys(energy_raw, ENERGY_KEYS, "energy")
    preset = energy_raw.pop("preset", None)
    if preset not in (None, "raw", "calibrated"):
        raise ConfigurationError(f"energy.preset: expected 'raw' or 'calibrated', got {preset!r}")
    if preset == "calibrated":
        energy_raw.setdefault("pue", CALIBRATED_PUE)
    try:
        energy = EnergyModel(**energy_raw)
    except ValueError as exc:
        raise ConfigurationError(f"energy: {exc}") from None

    model = _section(raw, "model")
    _check_keys(model, {"architecture", "num_classes"}, "model")
    architecture = str(model.get("architecture", "leaf"))
    num_classes = int(model.get("num_classes", 62))
    if architecture != "leaf":
        path = Path(base_dir) / architecture
        try:
            num_classes = load_graph(path).num_classes
        except OSError as exc:
            raise ConfigurationError(f"model.architecture: cannot read {path}: {exc.strerror}") from None
        except ConfigurationError as exc:
            raise ConfigurationError(f"model.architecture: {exc}") from None
        architecture = str(path)

    defaults = _section(raw, "defaults")
    _check_keys(defaults, PARADIGM_KEYS, "defaults")
    experiments = {}
    for name, table in _section(raw, "experiment").items():
        if not isinstance(table, dict):
            raise ConfigurationError(f"experiment.{name}: expected a table")
        _check_keys(table, PARADIGM_KEYS, f"experiment.{name}")
        merged = {"num_sources": data["num_sources"], "overlapping_views": data["overlapping_views"],
                  **defaults, **table}
        try:
            experiments[name] = ParadigmConfig(**merged)
        except (ConfigurationError, TypeError) as exc:
            raise ConfigurationError(f"experiment.{name}.{exc}") from None
    if not experiments:
        raise ConfigurationError("experiment: no [experiment.<name>] sections")
    out_dir = Path(out or run.get("out", "results"))
    cfg = ExperimentConfig(experiments, data, link, energy, seeds, out_dir, architecture, num_classes, raw)
    _check_structures(cfg)
    return cfg


STRUCTURE_FIELD = {"FPL": "junction_before", "SL": "split_before", "GFL": "averaged_layers"}


def _check_structures(cfg: ExperimentConfig) -> None:
    base = base_graph(cfg)
    for name, pcfg in cfg.experiments.items():
        try:
            build_structure(pcfg, base)
        except ConfigurationError as exc:
            msg = str(exc)
            key = STRUCTURE_FIELD.get(pcfg.kind, "kind")
            if not msg.startswith(key):
                msg = f"{key}: {msg}"
            raise ConfigurationError(f"experiment.{name}.{msg}") from None


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return parse_config(raw, base_dir=Path(path).parent, **overrides)


def base_graph(cfg: ExperimentConfig):
    if cfg.architecture == "leaf":
        return build_leaf_cnn(cfg.num_classes)
    return load_graph(cfg.architecture)


def load_data(cfg: ExperimentConfig, seed: int):
    """Training and test ImageSets for one seed (EMNIST subset, or synthetic glyphs)."""
    d = cfg.data
    if d["source"] == "synthetic":
        both = datamod.synthetic_glyphs(d["train_subset"] + d["test_subset"], cfg.num_classes, seed)
        return both.subset(range(d["train_subset"])), both.subset(range(d["train_subset"], len(both)))
    root = d["root"] or None
    trainset = datamod.load_emnist(root, d["split"], "train", d["train_subset"], seed)
    testset = datamod.load_emnist(root, d["split"], "test", d["test_subset"], seed)
    return trainset, testset


def cell_config(cfg: ExperimentConfig, name: str) -> dict:
    """Resolved config restricted to one experiment, so a cell's outputs do not depend on its siblings."""
    resolved = {**cfg.resolved(), "experiments": {name: asdict(cfg.experiments[name])}}
    del resolved["seeds"]  # the cell records its own seed
    return resolved


def _comment(cfg: ExperimentConfig, name: str, seed: int) -> str:
    return "# " + json.dumps({"experiment": name, "seed": seed, "config": cell_config(cfg, name)},
                             sort_keys=True, default=str)


def run_cell(cfg: ExperimentConfig, name: str, seed: int, cache: dict) -> dict:
    pcfg = cfg.experiments[name]
    if seed not in cache:
        cache.clear()
        cache[seed] = load_data(cfg, seed)
    trainset, testset = cache[seed]
    transforms = datamod.default_transforms(pcfg.num_sources, seed)
    shards = datamod.shard(trainset, pcfg.num_sources, seed, transforms, pcfg.overlapping_views)
    tests = datamod.shard(testset, pcfg.num_sources, seed, transforms, pcfg.overlapping_views)
    model = build_structure(pcfg, base_graph(cfg))
    t0 = time.perf_counter()
    result = train(model, pcfg, shards, cfg.link, seed, test=tests, energy=cfg.energy)
    wall = time.perf_counter() - t0

    run_dir = cfg.out / name / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    row = {
        "strategy": result.strategy, "experiment": name, "seed": seed,
        "accuracy": result.test_accuracy, "params": result.num_parameters,
        "train_time_s": result.train_time_s, "comm_bytes": result.ledger.total_bytes,
        "energy_kwh": result.ledger.energy_kwh, "carbon_g": result.ledger.carbon_g,
        "best_epoch": result.best_epoch, "epochs_run": result.epochs_run,
    }
    summary = {
        **row, "loss_curve": result.loss_curve, "node_accuracies": result.node_accuracies,
        "predicted_bytes": result.predicted_bytes, "traffic_matches_prediction":
            result.predicted_bytes == result.ledger.total_bytes,
        "train_samples": result.train_samples, "views": "overlapping" if pcfg.overlapping_views else "disjoint",
        "data_source": cfg.data["source"], "ledger": result.ledger.summary(),
        "resolved_config": cell_config(cfg, name),
    }
    # measured wall-clock varies run to run; keep it out of the deterministic files
    summary["ledger"].pop("measured_compute_s")
    write_json(run_dir / "summary.json", summary)
    write_json(run_dir / "wallclock.json", {"measured_compute_s": result.ledger.measured_compute_s,
                                            "cell_wall_s": wall})
    with open(run_dir / "ledger.csv", "w", newline="") as fh:
        fh.write(_comment(cfg, name, seed) + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(result.ledger.rows()[0]) if result.ledger.rows() else
                                ["epoch", "phase", "bytes"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(result.ledger.rows())
    with open(run_dir / "epochs.csv", "w", newline="") as fh:
        fh.write(_comment(cfg, name, seed) + "\n")
        fh.write("epoch,val_loss,best\n")
        for e, loss in enumerate(result.loss_curve):
            fh.write(f"{e},{loss!r},{int(e == result.best_epoch)}\n")
    return row


def write_comparison(path: Path, rows: list, cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps({"config": cfg.resolved(), "seeds": cfg.seeds}, sort_keys=True, default=str) + "\n")
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in sorted(rows, key=lambda r: (r["experiment"], r["seed"])):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, seed=args.seed, subset=args.subset, out=args.out)
    except (ConfigurationError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cells = [(name, seed) for seed in cfg.seeds for name in cfg.experiments]
    if args.dry_run:
        print(f"{len(cells)} run(s) planned -> {cfg.out}")
        for name, seed in cells:
            print(f"  {name:24s} {cfg.experiments[name].name:18s} seed={seed}")
        return EXIT_OK
    cache: dict = {}
    rows = []
    try:
        for name, seed in cells:
            log.info("running %s seed=%d", name, seed)
            rows.append(run_cell(cfg, name, seed, cache))
    except (IngestionError, FileNotFoundError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_comparison(cfg.out / "comparison.csv", rows, cfg)
    print(f"wrote {len(rows)} run(s) to {cfg.out}")
    return EXIT_OK


# ------------------------------------------------------------------ report

def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def aggregate(rows: list) -> list:
    """Mean and population std per strategy (one seed gives std 0), sorted by mean accuracy, best first."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r["strategy"], []).append(r)
    out = []
    for strategy, rs in groups.items():
        entry = {"strategy": strategy, "n_seeds": len(rs)}
        for m in REPORT_METRICS:
            vals = np.array([float(r[m]) for r in rs])
            entry[f"{m}_mean"] = float(vals.mean())
            entry[f"{m}_std"] = float(vals.std())
        out.append(entry)
    return sorted(out, key=lambda e: (-e["accuracy_mean"], e["strategy"]))


def format_table(agg: list) -> str:
    def pm(e, m, fmt, scale=1.0):
        return f"{format(e[m + '_mean'] / scale, fmt)}±{format(e[m + '_std'] / scale, fmt)}"

    cols = [("strategy", 18, lambda e: e["strategy"]),
            ("accuracy", 15, lambda e: pm(e, "accuracy", ".4f")),
            ("params", 12, lambda e: f"{e['params_mean']:.0f}"),
            ("train time [s]", 17, lambda e: pm(e, "train_time_s", ".2f")),
            ("comm [MB]", 12, lambda e: f"{e['comm_bytes_mean'] / 1e6:.2f}"),
            ("energy [kWh]", 13, lambda e: f"{e['energy_kwh_mean']:.3e}"),
            ("CO2 [g]", 11, lambda e: f"{e['carbon_g_mean']:.4g}"),
            ("best epoch", 11, lambda e: pm(e, "best_epoch", ".1f")),
            ("seeds", 6, lambda e: str(e["n_seeds"]))]
    head = " ".join(f"{n:<{w}}" if i == 0 else f"{n:>{w}}" for i, (n, w, _) in enumerate(cols))
    lines = [head, "-" * len(head)]
    for e in agg:
        lines.append(" ".join(f"{f(e):<{w}}" if i == 0 else f"{f(e):>{w}}" for i, (_, w, f) in enumerate(cols)))
    return "\n".join(lines)


def cmd_report(args) -> int:
    root = Path(args.results_dir)
    summaries = sorted(root.glob("**/summary.json")) if root.is_dir() else []
    if not summaries:
        print(f"no completed runs under {root}", file=sys.stderr)
        return EXIT_EMPTY
    rows = [json.loads(p.read_text()) for p in summaries]
    agg = aggregate(rows)
    sources = [str(p.relative_to(root)) for p in summaries]
    with open(root / "aggregate.csv", "w", newline="") as fh:
        fh.write("# " + json.dumps({"runs": sources}) + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(agg[0]), lineterminator="\n")
        writer.writeheader()
        for e in agg:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in e.items()})
    table = format_table(agg)
    (root / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# ------------------------------------------------------------ rates/traffic

def cmd_rates(args) -> int:
    link = LinkModel(rb_bandwidth_hz=args.rb_bandwidth, interference_w=args.interference,
                     fading="ergodic" if args.ergodic else "mean")
    direction = DOWNLINK if args.direction == "down" else UPLINK
    for d in args.distance:
        print(f"d={d:g} m  r={args.rbs}  {direction}: {expected_rate(link, d, args.rbs, direction):.6e} bit/s")
    return EXIT_OK


def cmd_traffic(args) -> int:
    try:
        cfg = load_config(args.config, subset=args.subset)
    except (ConfigurationError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    base = base_graph(cfg)
    n_train = cfg.data["train_subset"]
    print(f"{'experiment':24s} {'strategy':18s} {'bytes':>16s}")
    for name, pcfg in cfg.experiments.items():
        model = build_structure(pcfg, base)
        per_source = math.ceil(n_train * (1 - pcfg.validation_fraction) / pcfg.num_sources)
        sizes = [n_train // pcfg.num_sources] * pcfg.num_sources if pcfg.kind == "CENTRAL" else per_source
        nbytes = predict_traffic(pcfg, model, args.epochs, sizes)
        print(f"{name:24s} {pcfg.name:18s} {nbytes:16d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fplsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run the experiment matrix of a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--subset", type=int, help="training subset size")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate finished runs across seeds")
    p.add_argument("results_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rates", help="expected link rate for given distances")
    p.add_argument("--distance", type=float, nargs="+", required=True)
    p.add_argument("--rbs", type=int, default=1)
    p.add_argument("--direction", choices=("up", "down"), default="up")
    p.add_argument("--rb-bandwidth", type=float, default=1.8e5)
    p.add_argument("--interference", type=float, default=0.0)
    p.add_argument("--ergodic", action="store_true", help="expectation outside the log")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("traffic", help="closed-form network bytes per experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--subset", type=int)
    p.set_defaults(func=cmd_traffic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FplsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
