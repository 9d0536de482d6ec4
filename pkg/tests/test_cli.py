import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
import tomli_w

from fplsim.cli import (COMPARISON_COLUMNS, EXIT_CONFIG, EXIT_DATA, EXIT_EMPTY, EXIT_OK, aggregate, load_config,
                        main, parse_config)
from fplsim.errors import ConfigurationError
from fplsim.graph import save_graph
from fplsim.netsim import UPLINK, LinkModel, expected_rate

from _fixtures import tiny_cnn

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EXPERIMENTS = {"sl": {"kind": "SL"}, "fpl": {"kind": "FPL", "junction_before": "F2"},
               "gfl": {"kind": "GFL", "averaged_layers": ["F2"]}}


def write_config(directory: Path, name="exp.toml", experiments=EXPERIMENTS, seeds=(1,), **sections):
    save_graph(tiny_cnn(), directory / "tiny.toml")
    doc = {"run": {"seeds": list(seeds), "out": str(directory / "out")},
           "data": {"source": "synthetic", "train_subset": 240, "test_subset": 60, "num_sources": 2},
           "model": {"architecture": "tiny.toml"},
           "defaults": {"max_epochs": 1},
           "experiment": dict(experiments)}
    for key, value in sections.items():
        doc[key] = {**doc.get(key, {}), **value}
    path = directory / name
    path.write_text(tomli_w.dumps(doc))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


RUN_FILES = ("summary.json", "ledger.csv", "epochs.csv")


# ------------------------------------------------------------------ config

def test_dry_run_prints_plan(tmp_path, capsys):
    cfg = write_config(tmp_path, seeds=(1, 2))
    assert main(["run", "--config", str(cfg), "--dry-run"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "6 run(s) planned" in out and "FPL:J->F2" in out
    assert not (tmp_path / "out").exists()


def test_desk_config_plans_the_six_reference_rows(capsys):
    assert main(["run", "--config", str(CONFIGS / "desk.toml"), "--dry-run"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "18 run(s) planned" in out
    for name in ("SL", "CENTRAL", "GFL:F1/F2", "GFL:C2/F1/F2", "FPL:J->F2", "FPL:J->F1"):
        assert name in out


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    if path.name != "small_cnn.toml":  # a saved graph, not an experiment config
        load_config(path)


@pytest.mark.parametrize("mutation,field", [
    ({"experiment": {"bad": {"kind": "FPL", "junction_before": "F9"}}}, "experiment.bad.junction_before"),
    ({"experiment": {"bad": {"kind": "GFL"}}}, "experiment.bad.averaged_layers"),
    ({"experiment": {"bad": {"kind": "XL"}}}, "experiment.bad.kind"),
    ({"experiment": {"bad": {"kind": "SL", "batch_size": 0}}}, "experiment.bad.batch_size"),
    ({"experiment": {"bad": {"kind": "SL", "colour": 1}}}, "experiment.bad.colour"),
    ({"data": {"source": "mnist"}}, "data.source"),
    ({"data": {"train_subset": -1}}, "data.train_subset"),
    ({"network": {"rb_bandwidth_hz": 5e5}}, "network"),
    ({"energy": {"preset": "green"}}, "energy.preset"),
    ({"run": {"seeds": []}}, "run.seeds"),
])
def test_invalid_config_names_field(tmp_path, capsys, mutation, field):
    path = write_config(tmp_path, **mutation)
    assert main(["run", "--config", str(path), "--dry-run"]) == EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG


def test_flag_overrides_file():
    raw = {"run": {"seeds": [1, 2], "out": "a"}, "data": {"train_subset": 50},
           "experiment": {"c": {"kind": "CENTRAL"}}}
    cfg = parse_config(raw, seed=7, subset=9, out="b")
    assert cfg.seeds == [7] and cfg.data["train_subset"] == 9 and str(cfg.out) == "b"
    cfg = parse_config(raw)
    assert cfg.seeds == [1, 2] and cfg.data["train_subset"] == 50 and cfg.data["test_subset"] == 2000


def test_defaults_section_and_per_experiment_override():
    raw = {"defaults": {"max_epochs": 4, "batch_size": 8},
           "experiment": {"a": {"kind": "SL"}, "b": {"kind": "SL", "batch_size": 16}}}
    cfg = parse_config(raw)
    assert cfg.experiments["a"].batch_size == 8 and cfg.experiments["b"].batch_size == 16
    assert cfg.experiments["b"].max_epochs == 4 and cfg.experiments["a"].num_sources == 5


def test_calibrated_energy_preset():
    cfg = parse_config({"energy": {"preset": "calibrated"}, "experiment": {"c": {"kind": "CENTRAL"}}})
    assert cfg.energy.pue == pytest.approx(1.42)


def test_config_requires_an_experiment():
    with pytest.raises(ConfigurationError, match="experiment"):
        parse_config({})


# --------------------------------------------------------------------- run

def test_missing_dataset_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, data={"source": "emnist", "root": str(tmp_path / "absent")})
    assert main(["run", "--config", str(path)]) == EXIT_DATA
    assert "dataset" in capsys.readouterr().err


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    path = write_config(root, seeds=(1, 2))
    assert main(["run", "--config", str(path)]) == EXIT_OK
    return root


def test_run_writes_every_cell(finished):
    for name in EXPERIMENTS:
        for seed in (1, 2):
            d = finished / "out" / name / f"seed{seed}"
            assert all((d / f).exists() for f in RUN_FILES + ("wallclock.json",))
            summary = json.loads((d / "summary.json").read_text())
            assert summary["traffic_matches_prediction"] is True
            assert summary["resolved_config"]["experiments"].keys() == {name}


def test_comparison_csv(finished):
    path = finished / "out" / "comparison.csv"
    assert path.read_text().startswith("# {")
    rows = read_rows(path)
    assert tuple(rows[0]) == COMPARISON_COLUMNS
    assert [(r["experiment"], r["seed"]) for r in rows] == sorted((n, s) for n in EXPERIMENTS for s in ("1", "2"))
    for r in rows:
        summary = json.loads((finished / "out" / r["experiment"] / f"seed{r['seed']}" / "summary.json").read_text())
        assert float(r["accuracy"]) == summary["accuracy"]
        assert int(r["comm_bytes"]) == summary["comm_bytes"]


def test_repeat_run_is_byte_identical(finished, tmp_path):
    again = tmp_path / "again"
    assert main(["run", "--config", str(finished / "exp.toml"), "--out", str(again)]) == EXIT_OK
    for name in EXPERIMENTS:
        for seed in (1, 2):
            for f in RUN_FILES:
                a = (finished / "out" / name / f"seed{seed}" / f).read_bytes()
                assert (again / name / f"seed{seed}" / f).read_bytes() == a
    assert (again / "comparison.csv").read_bytes() == (finished / "out" / "comparison.csv").read_bytes()


def test_experiment_order_does_not_change_results(finished):
    reordered = dict(reversed(list(EXPERIMENTS.items())))
    path = write_config(finished, name="reordered.toml", experiments=reordered, seeds=(2,))
    other = finished / "reordered"
    assert main(["run", "--config", str(path), "--out", str(other)]) == EXIT_OK
    for name in EXPERIMENTS:
        for f in RUN_FILES:
            assert (other / name / "seed2" / f).read_bytes() == (finished / "out" / name / "seed2" / f).read_bytes()


def test_seed_flag_runs_one_seed(finished, tmp_path):
    out = tmp_path / "one"
    assert main(["run", "--config", str(finished / "exp.toml"), "--seed", "2", "--out", str(out)]) == EXIT_OK
    assert {p.name for p in out.glob("*/seed*")} == {"seed2"}


# ------------------------------------------------------------------ report

def test_report_aggregates_seeds(finished, capsys):
    assert main(["report", str(finished / "out")]) == EXIT_OK
    table = capsys.readouterr().out
    assert "strategy" in table.splitlines()[0]
    agg = read_rows(finished / "out" / "aggregate.csv")
    runs = read_rows(finished / "out" / "comparison.csv")
    assert [float(a["accuracy_mean"]) for a in agg] == sorted((float(a["accuracy_mean"]) for a in agg), reverse=True)
    for a in agg:
        mine = [r for r in runs if r["strategy"] == a["strategy"]]
        accs = [float(r["accuracy"]) for r in mine]
        assert int(a["n_seeds"]) == 2
        assert float(a["accuracy_mean"]) == float(np.mean(accs))
        assert float(a["accuracy_std"]) == pytest.approx(float(np.std(accs)), abs=1e-15)
        assert float(a["comm_bytes_mean"]) == np.mean([int(r["comm_bytes"]) for r in mine])
    assert (finished / "out" / "report.txt").read_text().strip() == table.strip()


def test_report_on_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_EMPTY
    assert "no completed runs" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "missing")]) == EXIT_EMPTY


def test_single_seed_has_zero_std():
    rows = [{"strategy": "X", "accuracy": 0.5, "params": 10, "train_time_s": 1.0, "comm_bytes": 7,
             "energy_kwh": 0.1, "carbon_g": 3.0, "best_epoch": 2}]
    (entry,) = aggregate(rows)
    assert entry["n_seeds"] == 1 and entry["accuracy_mean"] == 0.5
    assert all(entry[k] == 0.0 for k in entry if k.endswith("_std"))


def test_aggregate_sorts_by_accuracy():
    base = {"params": 1, "train_time_s": 1.0, "comm_bytes": 1, "energy_kwh": 0.0, "carbon_g": 0.0, "best_epoch": 0}
    rows = [{"strategy": s, "accuracy": a, **base} for s, a in [("a", 0.2), ("b", 0.9), ("c", 0.5), ("b", 0.7)]]
    agg = aggregate(rows)
    assert [e["strategy"] for e in agg] == ["b", "c", "a"]
    assert agg[0]["accuracy_mean"] == pytest.approx(0.8) and agg[0]["accuracy_std"] == pytest.approx(0.1)


# ---------------------------------------------------------- rates, traffic

def test_rates_verb(capsys):
    assert main(["rates", "--distance", "100", "250"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2
    value = float(lines[0].split(":")[1].split()[0])
    assert value == pytest.approx(expected_rate(LinkModel(), 100.0, 1, UPLINK), rel=1e-6)


def test_rates_verb_rejects_bad_distance(capsys):
    assert main(["rates", "--distance", "-1"]) == EXIT_CONFIG


def test_traffic_verb(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["traffic", "--config", str(path), "--epochs", "2"]) == EXIT_OK
    lines = {l.split()[0]: int(l.split()[-1]) for l in capsys.readouterr().out.splitlines()[1:]}
    per_source = math.ceil(240 * 0.9 / 2)
    assert lines["fpl"] == 2 * 2 * per_source * 32 * 2 * 4  # two cut edges of width 32, both directions
    assert lines["gfl"] == 2 * 2 * 2 * 4 * (32 * 10 + 10)
