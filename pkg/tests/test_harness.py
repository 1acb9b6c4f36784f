import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from koopguard import gpr, harness
from koopguard.cli import main

SCEN = dict(seed=1, pack="pack1", soc0=0.8, protocol=dict(mode="discharge", duration_s=400),
            attack=dict(kind="fdi_bias", start_s=250, duration_s=100, bias_v=-3.0))
SMALL_TRAIN = dict(seed=3, pack="pack1", cycles=1, shadow_every_s=600, shadow_length_s=300,
                   max_rows=30, max_iters=10)


def test_config_errors_name_fields():
    with pytest.raises(harness.ConfigError) as exc:
        harness.validate_config({"pack": "pack7", "attack": {"kind": "spoof"}})
    msg = str(exc.value)
    assert "seed: Field required" in msg
    assert "pack:" in msg and "attack.kind:" in msg


def test_missing_bank_file(tmp_path):
    cfg = dict(SCEN, estimator=dict(correction="gpr", gpr_bank=str(tmp_path / "none.json")))
    with pytest.raises(harness.ConfigError, match="file not found"):
        harness.validate_config(cfg)


def test_unknown_tuning_key():
    with pytest.raises(harness.ConfigError, match="estimator.tuning"):
        harness.validate_config(dict(SCEN, estimator=dict(tuning={"snap": 1})))


def test_load_config_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(SCEN))
    assert harness.load_config(p).attack.bias_v == -3.0
    p.write_text("- a\n- b\n")
    with pytest.raises(harness.ConfigError, match="mapping"):
        harness.load_config(p)


def test_report_recomputable_from_csv(tmp_path):
    res = harness.run_scenario(harness.validate_config(SCEN))
    harness.write_run(res, tmp_path)
    again = harness.report_from_samples(tmp_path / "samples.csv")
    rep = json.loads((tmp_path / "report.json").read_text())
    np.testing.assert_allclose(again["rmse_v"], rep["rmse_v"], rtol=1e-9)
    assert again["max_overestimation_v"] == pytest.approx(rep["max_overestimation_v"], rel=1e-9)
    assert again["max_underestimation_v"] == pytest.approx(rep["max_underestimation_v"], rel=1e-9)
    assert rep["attacked_samples"] == 100
    assert rep["trigger_time_s"] is not None and rep["mean_step_ms"] >= 0
    header = (tmp_path / "samples.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["t_s", "v_true_0"] and header[-4:] == ["soc_est", "region", "mode",
                                                                 "attacked"]


def test_runs_are_deterministic():
    a = harness.run_scenario(harness.validate_config(SCEN)).report
    b = harness.run_scenario(harness.validate_config(SCEN)).report
    assert a.rmse_v == b.rmse_v and a.trigger_time_s == b.trigger_time_s


def test_calibrated_detector_runs():
    cfg = harness.validate_config(dict(SCEN, noise_std_v=0.005, detector=dict(calibrate=True)))
    rep = harness.run_scenario(cfg).report
    assert rep.detector["rd_threshold_v"] > 0.005
    assert rep.trigger_time_s is not None


MC = dict(seed=5, runs=2, packs=["pack1", "pack3"], methods=["heuristic", "stage1"],
          attack_duration_s=120, onset_s=[150, 200])


def test_monte_carlo_deterministic_and_shaped(tmp_path):
    cfg = harness.validate_config(MC, harness.MonteCarloCfg)
    agg, raw = harness.monte_carlo(cfg, tmp_path)
    agg2, raw2 = harness.monte_carlo(cfg)
    assert len(raw) == 2 * 2
    assert [r["run_id"] for r in raw] == [0, 0, 1, 1]
    assert {a["age_cycles"] for a in agg} == {1, 50, 100}
    assert len(agg) == 2 * 3
    # everything but wall-clock timings repeats exactly
    strip = lambda rows: json.dumps([{k: v for k, v in r.items() if "ms" not in k} for r in rows])
    assert strip(agg) == strip(agg2) and strip(raw) == strip(raw2)
    for name in ("aggregate.csv", "runs.csv", "violin.csv"):
        assert (tmp_path / name).is_file()
    assert len((tmp_path / "runs.csv").read_text().splitlines()) == 1 + len(raw)


def test_monte_carlo_records_failures(monkeypatch):
    cfg = harness.validate_config(dict(MC, runs=1, packs=["pack1"]), harness.MonteCarloCfg)
    def boom(*a, **k):
        raise RuntimeError("solver exploded")
    monkeypatch.setattr(harness, "run_scenario", boom)
    agg, raw = harness.monte_carlo(cfg)
    assert raw[0]["heuristic_status"].startswith("failed:RuntimeError")
    assert sum(a["failed"] for a in agg) == 2


def test_harvest_targets_are_definitional():
    cfg = harness.validate_config(SMALL_TRAIN, harness.TrainGprCfg)
    rows = harness.harvest_gpr_rows(cfg)
    # target + V_bar must reproduce the nominal measurement, theta[:, 3] is SOC
    assert rows["theta"].shape[1] == 4
    np.testing.assert_array_equal(rows["theta"][:, 3], rows["soc"])
    assert set(np.unique(rows["module"])) == {0, 1, 2}


def test_train_bank_checksum_reproducible(tmp_path):
    cfg = harness.validate_config(SMALL_TRAIN, harness.TrainGprCfg)
    harness.train_gpr_command(cfg, tmp_path / "a.json")
    harness.train_gpr_command(cfg, tmp_path / "b.json")
    assert harness.file_checksum(tmp_path / "a.json") == harness.file_checksum(tmp_path / "b.json")
    bank = gpr.load_bank(tmp_path / "a.json")
    assert bank.n_regions == 14 and bank.models


def test_insufficient_rows_lists_sparse_regions(monkeypatch, tmp_path):
    cfg = harness.validate_config(SMALL_TRAIN, harness.TrainGprCfg)
    monkeypatch.setattr(harness, "harvest_gpr_rows", lambda c: {
        "module": np.array([0, 1, 2]), "soc": np.array([0.5] * 3),
        "theta": np.zeros((3, 4)), "target": np.zeros(3)})
    with pytest.raises(harness.InsufficientRowsError, match="module 0 region 6 \\(1 rows\\)"):
        harness.train_gpr_command(cfg, tmp_path / "x.json")


def test_cli_run_and_exit_codes(tmp_path):
    runner = CliRunner()
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(SCEN))
    r = runner.invoke(main, ["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "o" / "report.json").is_file()
    r = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(tmp_path / "s.csv")])
    assert r.exit_code == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("pack: pack1\n")
    r = runner.invoke(main, ["run", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert r.exit_code == 2 and "seed" in r.output
    trunc = tmp_path / "bank.json"
    trunc.write_text('{"format": "koopguard-gpr-bank", "ver')
    cfg2 = tmp_path / "g.yaml"
    cfg2.write_text(yaml.safe_dump(dict(SCEN, estimator=dict(correction="gpr",
                                                             gpr_bank=str(trunc)))))
    r = runner.invoke(main, ["run", "--config", str(cfg2), "--out", str(tmp_path / "y")])
    assert r.exit_code == 3 and "byte offset" in r.output


def test_cli_derive_regions(tmp_path):
    cfg = tmp_path / "d.yaml"
    cfg.write_text("smoothing: 5\n")
    r = CliRunner().invoke(main, ["derive-regions", "--config", str(cfg),
                                  "--out", str(tmp_path / "r.json")])
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "r.json").read_text())
    assert len(doc["boundaries"]) == 13 and doc["max_deviation"] < 0.02
