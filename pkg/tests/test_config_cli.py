import csv
import json

import numpy as np
import pytest

from discover.cli import main
from discover.config import (
    ConfigError,
    ExperimentConfig,
    SeedPlan,
    apply_overrides,
    preset,
    preset_names,
)
from discover.objective import LossWeights

FAST = ["--dataset.n", "1500", "--dataset.n_test", "500", "--train.max_epochs", "3"]


# -- configuration ------------------------------------------------------------------------

def test_presets_carry_table_weights():
    assert preset("parametric").weights == LossWeights(rec=0.7, kl_z=0.7, kl_w=0.2, adv=0.8, rec_z=0.3)
    assert preset("swiss_roll").weights == LossWeights(rec=0.9, kl_z=0.2, kl_w=0.2, adv=8.0, rec_z=0.1)
    assert preset("swiss_roll").dataset.noise_rate == 0.3
    assert {f"swiss_roll_rho{r:g}" for r in (0, 0.1, 0.2, 0.3, 0.4)} <= set(preset_names())
    assert preset("swiss_roll_rho0.1").dataset.noise_rate == 0.1


@pytest.mark.parametrize("name", preset_names())
def test_round_trip_lossless(name):
    cfg = preset(name)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_unknown_key_rejected_with_path():
    data = preset("parametric").to_dict()
    data["train"]["learning_rate"] = 0.1
    with pytest.raises(ConfigError, match="train.learning_rate"):
        ExperimentConfig.from_dict(data)


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "seed": 1,\n  "name" "x"\n}')
    with pytest.raises(ConfigError, match="line 3"):
        ExperimentConfig.load(p)


def test_type_errors():
    with pytest.raises(ConfigError, match="seed"):
        ExperimentConfig.from_dict({"seed": "one"})
    with pytest.raises(ConfigError, match="noise_rate"):
        ExperimentConfig.from_dict({"dataset": {"kind": "swiss_roll", "noise_rate": 0.6}})


def test_overrides():
    cfg = apply_overrides(preset("parametric"), {"weights.adv": "0", "train.lr": "1e-4",
                                                 "name": "ablation"})
    assert cfg.weights.adv == 0.0 and cfg.train.lr == 1e-4 and cfg.name == "ablation"
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"weights.advv": "1"})


def test_seed_plan_streams_distinct_and_stable():
    a, b = SeedPlan.from_master(7), SeedPlan.from_master(7)
    assert a == b
    vals = [a.data, a.init, a.train, a.metric, a.test_data]
    assert len(set(vals)) == 5
    assert SeedPlan.from_master(8).data != a.data


# -- CLI ------------------------------------------------------------------------------------

def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("runs") / "p"
    assert main(["train", "--preset", "parametric", "--seed", "3", "--out", str(d), *FAST]) == 0
    return d


def test_train_writes_self_describing_run(trained_run):
    names = {p.name for p in trained_run.iterdir()}
    assert {"config.json", "checkpoint.json", "checkpoint.bin", "epochs.csv", "report.json",
            "checksums.json"} <= names
    cfg = ExperimentConfig.load(trained_run / "config.json")
    assert cfg.seed == 3 and cfg.dataset.n == 1500
    rows = list(csv.DictReader(open(trained_run / "epochs.csv")))
    assert len(rows) == 3


def test_same_seed_identical_checkpoints(trained_run, tmp_path):
    other = tmp_path / "again"
    assert main(["train", "--preset", "parametric", "--seed", "3", "--out", str(other), *FAST]) == 0
    for f in ("checkpoint.bin", "checkpoint.json", "epochs.csv", "report.json"):
        assert (other / f).read_bytes() == (trained_run / f).read_bytes()


def test_eval_twice_identical(trained_run, capsys, tmp_path):
    res = tmp_path / "results.csv"
    args = ["eval", str(trained_run), "--metrics", "nll,kl_analytic,delta_bayes", "--results", str(res)]
    code1, out1, _ = run_cli(args, capsys)
    code2, out2, _ = run_cli(args, capsys)
    assert code1 == code2 == 0 and out1 == out2
    rows = list(csv.DictReader(open(res)))
    assert len(rows) == 1 and rows[0]["seed"] == "3"  # keyed by (experiment, seed)
    rep = json.loads(out1)
    assert np.isfinite(rep["nll"]) and np.isfinite(rep["kl_z"])


def test_eval_unsupported_metric(tmp_path, capsys):
    run = tmp_path / "sr"
    assert main(["train", "--preset", "swiss_roll", "--out", str(run), *FAST,
                 "--model.d_hidden", "8"]) == 0
    code, _, err = run_cli(["eval", str(run), "--metrics", "kl_analytic"], capsys)
    assert code == 2 and "parametric" in err


def test_eval_integrity_error(trained_run, tmp_path, capsys):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(trained_run, broken)
    blob = bytearray((broken / "checkpoint.bin").read_bytes())
    blob[0] ^= 1
    (broken / "checkpoint.bin").write_bytes(bytes(blob))
    code, _, err = run_cli(["eval", str(broken)], capsys)
    assert code == 4 and "checksum" in err.lower()


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"dataset": {"kindd": "parametric"}}')
    code, _, err = run_cli(["train", "--config", str(p), "--out", str(tmp_path / "x")], capsys)
    assert code == 2 and "dataset.kindd" in err
    code, _, _ = run_cli(["train", "--out", str(tmp_path / "x"), "--train.lrr", "1"], capsys)
    assert code == 2


def test_divergence_exit_code(tmp_path, capsys):
    out = tmp_path / "div"
    code, _, err = run_cli(["train", "--out", str(out), *FAST, "--train.divergence_threshold=-1e9",
                            "--train.divergence_epochs", "2"], capsys)
    assert code == 3 and "diverged" in err
    assert (out / "epochs.csv").exists() and (out / "report.json").exists()


def test_adversary_ablation_still_logs_ce(tmp_path):
    out = tmp_path / "noadv"
    assert main(["train", "--out", str(out), *FAST, "--weights.adv", "0"]) == 0
    rows = list(csv.DictReader(open(out / "epochs.csv")))
    assert all(float(r["adv"]) > 0 for r in rows)
    assert json.loads((out / "config.json").read_text())["weights"]["adv"] == 0.0


def test_gen_data_records_spec_and_is_reproducible(tmp_path, capsys):
    args = ["gen-data", "--preset", "parametric", "--seed", "1", "--dataset.n", "20000"]
    code, out1, _ = run_cli([*args, "--out", str(tmp_path / "a")], capsys)
    code2, out2, _ = run_cli([*args, "--out", str(tmp_path / "b")], capsys)
    assert code == code2 == 0
    assert json.loads(out1)["blob_sha256"] == json.loads(out2)["blob_sha256"]
    manifest = json.loads((tmp_path / "a.json").read_text())
    assert manifest["spec"]["dataset"]["n"] == 20000 and manifest["spec"]["seed"] == 1
    assert manifest["spec"]["dataset"]["kind"] == "parametric"


def test_gen_data_rejects_bad_noise_rate(tmp_path, capsys):
    code, _, err = run_cli(["gen-data", "--preset", "swiss_roll", "--dataset.noise_rate", "0.6",
                            "--out", str(tmp_path / "s")], capsys)
    assert code == 2 and "noise_rate" in err


def test_export_swiss_roll_schema(tmp_path):
    run = tmp_path / "sr"
    assert main(["train", "--preset", "swiss_roll", "--out", str(run), *FAST,
                 "--model.d_hidden", "8"]) == 0
    assert main(["export", str(run), "--out", str(tmp_path / "plots")]) == 0
    header = (tmp_path / "plots" / "embedding.csv").read_text().splitlines()[0].split(",")
    assert header == ["x1", "x2", "x3", "y", "z1", "z2", "w1", "w2"]
    assert (tmp_path / "plots" / "curves.csv").exists()


def test_export_parametric_has_posterior_curves(trained_run, tmp_path):
    assert main(["export", str(trained_run), "--out", str(tmp_path / "p")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "p" / "posterior_curves.csv")))
    assert rows and {"x", "y", "q_z_mean", "p_z_mean", "q_w_mean", "p_w_mean"} <= set(rows[0])
    for r in rows:
        assert float(r["p_z_mean"]) == pytest.approx(float(r["x"]) / 2, abs=1e-6)
        # the truncated posterior mean of w lies on the side selected by y
        assert (float(r["p_w_mean"]) > 0) == (r["y"] == "1")


def test_export_empty_run_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _, err = run_cli(["export", str(tmp_path / "empty")], capsys)
    assert code == 4 and "missing" in err.lower()


def test_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DISCOVER_OUT", str(tmp_path))
    assert main(["train", "--seed", "2", *FAST]) == 0
    assert (tmp_path / "parametric-discover-seed2" / "checkpoint.bin").exists()


def test_repro_table1_small(tmp_path, capsys):
    code, out, _ = run_cli(["repro-table1", "--seeds", "2", "--out", str(tmp_path), *FAST], capsys)
    assert code == 0
    table = (tmp_path / "table.md").read_text()
    assert "| discover |" in table and "| plain_vae |" in table and "±" in table
