import json

import numpy as np
import pytest

from prol.cli import main
from prol.errors import ConfigError, EmitError
from prol.evaluator import MetricsLedger
from prol.experiment import (ExperimentConfig, aggregate, grid_search_lr, load_config, run_experiment,
                             save_config, select_best, validate_config)
from prol.report import emit_plots, emit_tables


def test_short_prompt_message():
    with pytest.raises(ConfigError) as err:
        validate_config({"prompt_length": 1})
    assert "prompt length must be ≥ 2" in err.value.problems


def test_missing_lambda5_is_filled_and_flagged():
    cfg, notes = validate_config({"lambda1": 1.0})
    assert cfg.lambda5 == 1.0
    assert any(n.startswith("lambda5 defaulted") for n in notes)
    assert not any(n.startswith("lambda1") for n in notes)


def test_divisibility_error():
    with pytest.raises(ConfigError, match="not divisible"):
        validate_config({"dim": 65, "heads": 4})


def test_errors_are_aggregated():
    with pytest.raises(ConfigError) as err:
        validate_config({"prompt_length": 1, "dim": 65, "lambda3": -1.0, "nonsense": 3})
    assert len(err.value.problems) >= 1
    with pytest.raises(ConfigError) as err:
        validate_config({"prompt_length": 1, "dim": 65, "lambda3": -1.0})
    assert len(err.value.problems) == 3


def test_layer_range_checked():
    with pytest.raises(ConfigError, match="prompt layers"):
        validate_config({"layers": 2, "prompt_layers": [0, 2]})


def test_toml_round_trip(tmp_path):
    cfg = ExperimentConfig(lr=0.05, prompt_layers=(1, 3), seeds=(4,), outdir=str(tmp_path))
    save_config(cfg, tmp_path / "c.toml", ["a comment"])
    back, _ = load_config(tmp_path / "c.toml")
    assert back == cfg and back.digest() == cfg.digest()


def test_flags_override_file(tmp_path):
    (tmp_path / "c.toml").write_text("lr = 0.1\ntasks = 4\n")
    cfg, _ = load_config(tmp_path / "c.toml", {"lr": 0.001, "tasks": None})
    assert (cfg.lr, cfg.tasks) == (0.001, 4)


def test_outdir_defaults_to_env(monkeypatch, tmp_path):
    monkeypatch.setenv("PROL_OUTDIR", str(tmp_path))
    cfg, _ = validate_config({})
    assert cfg.outdir.startswith(str(tmp_path))


def test_best_lr_selection():
    rows = [{"lr": 0.01, "FAA": 50.0, "FFM": 9.0}, {"lr": 0.05, "FAA": 50.0, "FFM": 4.0},
            {"lr": 0.001, "FAA": 40.0, "FFM": 1.0}]
    assert select_best(rows)["lr"] == 0.05
    assert select_best(rows[:1])["lr"] == 0.01
    tie = [{"lr": 0.1, "FAA": 50.0, "FFM": 4.0}, {"lr": 0.005, "FAA": 50.0, "FFM": 4.0}]
    assert select_best(tie)["lr"] == 0.005


def test_aggregate_mean_matches_seeds():
    per = [{"FAA": 40.0, "CAA": 50.0, "FFM": 5.0, "AA": [60.0, 40.0]},
           {"FAA": 44.0, "CAA": 52.0, "FFM": 3.0, "AA": [62.0, 44.0]}]
    agg = aggregate(per)
    assert agg["FAA"] == 42.0 and agg["FAA_std"] == 2.0 and agg["AA"] == [61.0, 42.0]


def ledgers(T, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [MetricsLedger.from_rows([list(rng.uniform(20, 90, t)) for t in range(1, T + 1)]) for _ in range(n)]


def test_table_has_task_columns_and_avg(tmp_path):
    path = emit_tables({"run": ledgers(10, 1)}, tmp_path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["run", "seed", *(f"task{t}" for t in range(1, 11)), "AVG"]


def test_single_task_plot(tmp_path):
    out = emit_plots({"run": ledgers(1, 1)}, tmp_path)
    assert all(p.stat().st_size > 0 for p in out)


def test_three_seed_band(tmp_path):
    emit_plots({"run": ledgers(4)}, tmp_path, formats=("svg",))
    assert "PolyCollection" in (tmp_path / "accuracy.svg").read_text() or \
        "<path" in (tmp_path / "accuracy.svg").read_text()
    emit_tables({"run": ledgers(4)}, tmp_path)
    rows = [r.split(",")[1] for r in (tmp_path / "accuracy_curve.csv").read_text().splitlines()[1:]]
    assert rows == ["0", "1", "2", "mean", "std"]


def test_incomplete_ledger_names_the_gap(tmp_path):
    led = MetricsLedger(3)
    led.record(1, [50.0])
    led.record(2, [40.0, 45.0])
    with pytest.raises(EmitError, match="task column 3"):
        emit_tables({"partial": [led]}, tmp_path)


SMALL_RUN = dict(cl_classes=4, base_classes=2, per_class=10, tasks=2, image_side=8, patch_size=4, layers=2,
                 heads=2, dim=16, prompt_layers=[0, 1], pretrain_epochs=1, seeds=[0, 1])


def test_run_writes_self_describing_tree(tmp_path):
    cfg, notes = validate_config(dict(SMALL_RUN, outdir=str(tmp_path / "r")))
    res = run_experiment(cfg, notes, log=None)
    root = tmp_path / "r"
    for name in ("config.toml", "metrics.json", "accuracy_curve.csv", "plots/accuracy.svg"):
        assert (root / name).exists(), name
    for seed in (0, 1):
        for name in ("ledger.csv", "metrics.json", "timing.json", "train.log.jsonl"):
            assert (root / f"seed{seed}" / name).exists()
    record = json.loads((root / "seed0" / "train.log.jsonl").read_text().splitlines()[0])
    assert set(record) == {"step", "intra", "inter", "sim", "ort", "gen", "ce", "total", "lr", "mode"}
    doc = json.loads((root / "metrics.json").read_text())
    assert doc["config_hash"] == load_config(root / "config.toml")[0].digest()
    assert doc["FAA"] == pytest.approx(np.mean([s.metrics["FAA"] for s in res.seeds]))


def test_grid_rows(tmp_path):
    cfg, _ = validate_config(dict(SMALL_RUN, outdir=str(tmp_path / "g")))
    best, rows = grid_search_lr(cfg, [0.001, 0.005, 0.01, 0.05, 0.1], log=None)
    assert len(rows) == 5 and best in [r["lr"] for r in rows]
    assert len((tmp_path / "g" / "grid" / "grid.csv").read_text().splitlines()) == 6


def test_cli_run_and_report(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("\n".join(f"{k} = {json.dumps(v)}" for k, v in SMALL_RUN.items()))
    out = tmp_path / "cli"
    assert main(["run", "--config", str(tmp_path / "c.toml"), "--seed", "3", "--outdir", str(out)]) == 0
    assert (out / "seed3" / "ledger.csv").exists()
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["FAA"] >= 0
    assert main(["report", str(out)]) == 0


def test_cli_reports_config_errors(tmp_path, capsys):
    assert main(["run", "--prompt-length", "1", "--outdir", str(tmp_path)]) == 2
    assert "prompt length must be ≥ 2" in capsys.readouterr().err


def test_cli_exit_code_on_failed_seed(tmp_path, monkeypatch):
    import prol.experiment as ex
    from prol.errors import TrainingDiverged

    real = ex.run_seed

    def flaky(cfg, seed, *a, **k):
        if seed == 1:
            raise TrainingDiverged("synthetic failure")
        return real(cfg, seed, *a, **k)

    monkeypatch.setattr(ex, "run_seed", flaky)
    (tmp_path / "c.toml").write_text("\n".join(f"{k} = {json.dumps(v)}" for k, v in SMALL_RUN.items()))
    assert main(["run", "--config", str(tmp_path / "c.toml"), "--outdir", str(tmp_path / "o")]) == 1
    assert (tmp_path / "o" / "seed1" / "error.txt").exists()
