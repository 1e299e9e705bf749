import csv
import json

import pytest
import yaml
from click.testing import CliRunner

from rdistill import evalcli
from rdistill.config import from_dict
from rdistill.errors import TrainingAborted
from rdistill.evalcli import (
    AblationSuite,
    aggregate,
    format_table,
    main,
    read_cost_csv,
    run_ablation,
    run_dir,
    suite_from_dict,
)
from rdistill.trainer import MetricsRecord, train

from conftest import SEPARABLE, separable_cfg


def _write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else yaml.safe_dump(data))
    return str(p)


def test_dry_run_prints_resolved_config(tmp_path):
    cfg = _write(tmp_path, "c.yaml", {"method": "rd_full"})
    res = CliRunner().invoke(main, ["run", "--config", cfg, "--dry-run"])
    assert res.exit_code == 0
    resolved = yaml.safe_load(res.output)
    assert resolved["method"] == "rd_full"
    assert resolved["optimizer"] == {"name": "adamw", "lr": 5e-3, "weight_decay": 1e-4}
    assert from_dict(resolved) == from_dict({"method": "rd_full"})


def test_negative_lr_exits_1(tmp_path):
    cfg = _write(tmp_path, "c.yaml", "optimizer:\n  lr: -1\n")
    res = CliRunner().invoke(main, ["run", "--config", cfg])
    assert res.exit_code == 1
    assert "optimizer.lr" in res.output


def test_unknown_key_exits_1_and_lists_everything(tmp_path):
    cfg = _write(tmp_path, "c.yaml", {"epochz": 3, "batch_size": 1})
    res = CliRunner().invoke(main, ["run", "--config", cfg, "--dry-run"])
    assert res.exit_code == 1
    assert "epochz: unknown key" in res.output and "batch_size" in res.output


def test_minimal_config_runs_student_only(tmp_path):
    cfg = _write(tmp_path, "c.yaml", "{}\n")
    out = tmp_path / "out"
    res = CliRunner().invoke(main, ["run", "--config", cfg, "--out-dir", str(out)])
    assert res.exit_code == 0, res.output
    assert res.output.startswith("student_only: final test acc")
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert len(rows) == 240
    assert (out / "config.yaml").read_text() == "{}\n"


def test_bad_manifest_exits_1(tmp_path):
    (tmp_path / "m.csv").write_text("file,label\nx.png,0\n")
    cfg = _write(tmp_path, "c.yaml", {"data": {"source": "manifest", "path": str(tmp_path / "m.csv")}})
    res = CliRunner().invoke(main, ["run", "--config", cfg, "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 1
    assert "path,label" in res.output


def test_seed_override(tmp_path):
    cfg = _write(tmp_path, "c.yaml", SEPARABLE)
    res = CliRunner().invoke(main, ["run", "--config", cfg, "--seed", "9", "--dry-run"])
    assert yaml.safe_load(res.output)["seed"] == 9


def test_aborted_run_exits_2(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingAborted("non-finite loss", {})

    monkeypatch.setattr(evalcli, "train", boom)
    cfg = _write(tmp_path, "c.yaml", SEPARABLE)
    res = CliRunner().invoke(main, ["run", "--config", cfg, "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 2


def _fixture_run(root, method, seed, acc, aborted=False):
    d = run_dir(root, method, seed)
    d.mkdir(parents=True)
    with (d / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRecord.columns())
        w.writerow([getattr(MetricsRecord(epoch=0, test_acc_s=0.1), c) for c in MetricsRecord.columns()])
        w.writerow([getattr(MetricsRecord(epoch=1, test_acc_s=acc), c) for c in MetricsRecord.columns()])
    (d / "summary.json").write_text("{}")
    if aborted:
        (d / "abort.json").write_text("{}")


def test_table_renders_reference_row_values(tmp_path):
    values = {"student_only": 0.7586, "direct_reprog": 0.8079, "rd_no_cka": 0.8227, "rd_full": 0.8571}
    for m, v in values.items():
        _fixture_run(tmp_path, m, 0, v)
    table = format_table(aggregate(tmp_path, list(reversed(list(values))), [0]), [0])
    assert table[0] == ["method", "di_reprog", "co_reprog", "kd", "cka", "seed_0", "mean", "std"]
    assert [r[0] for r in table[1:]] == ["student_only", "direct_reprog", "rd_no_cka", "rd_full"]
    assert [r[5] for r in table[1:]] == ["75.86", "80.79", "82.27", "85.71"]
    assert table[1][1:5] == ["", "", "", ""]
    assert table[2][1:5] == ["x", "", "x", ""]
    assert table[4][1:5] == ["", "x", "x", "x"]


def test_mean_std_hand_calculation(tmp_path):
    for s, v in enumerate([0.75, 0.80, 0.82]):
        _fixture_run(tmp_path, "rd_full", s, v)
    (row,) = aggregate(tmp_path, ["rd_full"], [0, 1, 2])
    # mean = (75 + 80 + 82) / 3 = 79; sample variance = (16 + 1 + 9) / 2 = 13
    assert row["mean"] == pytest.approx(79.0)
    assert row["std"] == pytest.approx(13**0.5)
    assert format_table([row], [0, 1, 2])[1][-2:] == ["79.00", "3.61"]


def test_failed_cells(tmp_path):
    _fixture_run(tmp_path, "rd_full", 0, 0.9)
    _fixture_run(tmp_path, "rd_full", 1, 0.8, aborted=True)
    table = format_table(aggregate(tmp_path, ["rd_full"], [0, 1, 2]), [0, 1, 2])
    assert table[1][5:] == ["90.00", "FAILED", "FAILED", "90.00", "0.00"]


def test_run_ablation_cells_match_runs(tmp_path, monkeypatch):
    real = evalcli.train

    def flaky(cfg, out_dir, **kw):
        if cfg.method == "direct_reprog" and cfg.seed == 1:
            raise TrainingAborted("forced", {})
        return real(cfg, out_dir, **kw)

    monkeypatch.setattr(evalcli, "train", flaky)
    base = separable_cfg(epochs=3)
    suite = AblationSuite(base, ["rd_full", "student_only", "direct_reprog"], [0, 1])
    table = run_ablation(suite, tmp_path)
    assert [r[0] for r in table[1:]] == ["student_only", "direct_reprog", "rd_full"]
    assert table[2][6] == "FAILED"
    for row in table[1:]:
        for j, s in enumerate([0, 1]):
            d = run_dir(tmp_path, row[0], s)
            if row[5 + j] != "FAILED":
                last = list(csv.DictReader((d / "metrics.csv").open()))[-1]
                assert row[5 + j] == f"{100 * float(last['test_acc_s']):.2f}"
                assert (d / "config.resolved.yaml").exists()
    assert list(csv.reader((tmp_path / "ablation.csv").open())) == table
    assert yaml.safe_load((tmp_path / "suite.resolved.yaml").read_text())["seeds"] == [0, 1]


def test_suite_validation():
    with pytest.raises(Exception) as exc:
        suite_from_dict({"methods": ["rd_full", "nope"], "seeds": "0", "extra": 1, "base": {"epochs": 0}})
    v = exc.value.violations
    assert any("nope" in x for x in v) and any(x.startswith("seeds") for x in v)
    assert "extra: unknown key" in v and any(x.startswith("base.epochs") for x in v)
    s = suite_from_dict({})
    assert s.ordered_methods() == ["student_only", "direct_reprog", "rd_no_cka", "rd_full"]
    assert s.seeds == [0, 1, 2, 3, 4]
    assert all(c.to_dict() == s.base.replace(method=c.method, seed=c.seed).to_dict() for c in s.configs())


def test_ablate_cli_dry_run(tmp_path):
    p = _write(tmp_path, "s.yaml", {"base": SEPARABLE, "methods": ["rd_full"], "seeds": [3]})
    res = CliRunner().invoke(main, ["ablate", "--config", p, "--dry-run"])
    assert res.exit_code == 0
    assert yaml.safe_load(res.output)["methods"] == ["rd_full"]


def test_cost_cli_counts_stable(tmp_path):
    runner = CliRunner()
    rows = []
    for i in range(2):
        res = runner.invoke(main, ["cost", "--runs", "5", "--out-dir", str(tmp_path / str(i))])
        assert res.exit_code == 0, res.output
        rows.append(read_cost_csv(tmp_path / str(i) / "cost.csv"))
        assert (tmp_path / str(i) / "cost.csv").read_text().startswith("# flops = multiply-accumulates")
    for a, b in zip(*rows):
        assert (a["name"], a["params_trainable"], a["params_frozen"], a["flops"]) == (
            b["name"], b["params_trainable"], b["params_frozen"], b["flops"])
    teacher, student = rows[0]
    assert teacher["name"] == "toy_cnn_large+adapter" and student["name"] == "mlp_small"
    t_params = int(teacher["params_trainable"]) + int(teacher["params_frozen"])
    assert int(student["params_trainable"]) < 0.5 * t_params


def test_boundary_cli(tmp_path):
    art = train(separable_cfg(epochs=5), tmp_path / "rd")
    only = train(separable_cfg("student_only", epochs=5), tmp_path / "so")
    res = CliRunner().invoke(
        main,
        ["boundary", "--checkpoint", str(art.checkpoint), "--checkpoint", str(only.checkpoint),
         "--resolution", "16", "--out-dir", str(tmp_path / "b")],
    )
    assert res.exit_code == 0, res.output
    rows = list(csv.DictReader((tmp_path / "b" / "agreement.csv").open()))
    assert {(r["a"], r["b"]) for r in rows} >= {("0_rd/student", "0_rd/teacher_path")}
    assert all(0 <= float(r["agreement"]) <= 1 for r in rows)
    assert (tmp_path / "b" / "0_rd" / "student.png").exists()
    assert (tmp_path / "b" / "1_so" / "config.resolved.yaml").exists()
