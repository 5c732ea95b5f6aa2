import json

import pandas as pd
import pytest

from abcf.cli import ConfigError, main, parse_config

SMALL = """\
# tiny study for smoke tests
n_units = 60
n_treated = 20
n_burn = 30
n_draw = 20
n_trees_mu = 10
n_trees_tau = 5
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def simulate(config, out, *extra):
    return main(["simulate", "--config", config, "--seed", "7", "--reps", "2", "--out", str(out), *extra])


def test_simulate_writes_replicates_and_manifest(config, tmp_path):
    assert simulate(config, tmp_path / "sim") == 0
    names = sorted(p.name for p in (tmp_path / "sim").iterdir())
    assert names == ["manifest.json", "rep0000_data.csv", "rep0000_meta.json", "rep0000_truth.csv",
                     "rep0001_data.csv", "rep0001_meta.json", "rep0001_truth.csv"]
    man = json.loads((tmp_path / "sim" / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["seed"] == 7
    assert {"config", "version", "outputs", "wall_clock_seconds"} <= set(man)


def test_simulate_is_byte_identical(config, tmp_path):
    simulate(config, tmp_path / "a")
    simulate(config, tmp_path / "b")
    for p in (tmp_path / "a").glob("rep*"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_simulate_full_residual_share(config, tmp_path):
    simulate(config, tmp_path / "s", "--residual-share", "1.0")
    truth = pd.read_csv(tmp_path / "s" / "rep0000_truth.csv")
    assert (truth.eps == 0).all()
    assert json.loads((tmp_path / "s" / "rep0000_meta.json").read_text())["sigma_eps"] == 0.0


def test_bad_config_key_names_the_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("n_units = 60\nsigma_uu = 3\n")
    with pytest.raises(ConfigError, match="sigma_uu"):
        parse_config(p.read_text(), str(p))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_parse_config_types():
    cfg = parse_config("seed = 3\npsi = 12.5\nmodel = ibcf\nfixed_sigma_u = 0\n")
    assert cfg["seed"] == 3 and cfg["psi"] == 12.5 and cfg["model"] == "ibcf"


def test_fit_and_evaluate_round_trip(config, tmp_path):
    simulate(config, tmp_path / "sim")
    data = str(tmp_path / "sim" / "rep0000_data.csv")
    for m in ("bcf", "abcf"):
        assert main(["fit", data, "--config", config, "--model", m, "--seed", "1",
                     "--out", str(tmp_path / m)]) == 0
    rep = json.loads((tmp_path / "abcf" / "fit_report.json").read_text())
    assert set(rep["acceptance"]) == {"sigma_eps2", "sigma_u"}
    assert main(["evaluate", "--draws", str(tmp_path / "bcf"), str(tmp_path / "abcf"),
                 "--truth", str(tmp_path / "sim"), "--out", str(tmp_path / "ev")]) == 0
    metrics = pd.read_csv(tmp_path / "ev" / "metrics.csv")
    assert set(metrics.model) == {"bcf", "abcf"}
    comp = pd.read_csv(tmp_path / "ev" / "comparison.csv")
    assert {"mean_a", "mean_b", "difference", "SE", "significant"} <= set(comp.columns)


def test_identical_runs_compare_to_zero(config, tmp_path):
    simulate(config, tmp_path / "sim")
    data = str(tmp_path / "sim" / "rep0000_data.csv")
    for name in ("one", "two"):
        main(["fit", data, "--config", config, "--model", "abcf", "--seed", "4", "--out", str(tmp_path / name)])
    assert main(["evaluate", "--draws", str(tmp_path / "one"), str(tmp_path / "two"), "--label-by-dir",
                 "--truth", str(tmp_path / "sim"), "--out", str(tmp_path / "ev")]) == 0
    comp = pd.read_csv(tmp_path / "ev" / "comparison.csv")
    assert (comp.difference == 0).all()


def test_ibcf_fit_with_psi(config, tmp_path):
    simulate(config, tmp_path / "sim")
    assert main(["fit", str(tmp_path / "sim" / "rep0001_data.csv"), "--config", config, "--model", "ibcf",
                 "--psi", "25", "--out", str(tmp_path / "ib")]) == 0
    assert (tmp_path / "ib" / "v.csv").exists()
    man = json.loads((tmp_path / "ib" / "manifest.json").read_text())
    assert man["config"]["psi"] == 25.0


def test_fit_three_unit_toy(tmp_path, config):
    p = tmp_path / "toy.csv"
    p.write_text("unit_id,y,z,w,pi,x1\n1,1.0,1,3,0.5,0.1\n2,2.0,0,5,0.5,0.4\n3,4.0,1,8,0.5,0.9\n")
    assert main(["fit", str(p), "--config", config, "--out", str(tmp_path / "toy")]) == 0
    tau = pd.read_csv(tmp_path / "toy" / "tau.csv")
    assert tau.shape == (20, 3)


def test_missing_truth_names_replicate(config, tmp_path, capsys):
    simulate(config, tmp_path / "sim")
    main(["fit", str(tmp_path / "sim" / "rep0001_data.csv"), "--config", config, "--out", str(tmp_path / "f")])
    (tmp_path / "sim" / "rep0001_truth.csv").unlink()
    code = main(["evaluate", "--draws", str(tmp_path / "f"), "--truth", str(tmp_path / "sim"),
                 "--out", str(tmp_path / "ev")])
    assert code == 2
    assert "rep0001" in capsys.readouterr().err


def test_missing_data_file(tmp_path, config):
    assert main(["fit", str(tmp_path / "none.csv"), "--config", config, "--out", str(tmp_path / "x")]) == 2


def test_invalid_data_row(tmp_path, config):
    p = tmp_path / "bad.csv"
    p.write_text("unit_id,y,z,w,pi,x1\n1,1.0,1,3,0.5,0.1\n2,2.0,0,5,1.0,0.4\n")
    assert main(["fit", str(p), "--config", config, "--out", str(tmp_path / "x")]) == 2


def test_sweep_empty_values(config, tmp_path):
    assert main(["sweep", "--config", config, "--axis", "prior_multiplier", "--values", "",
                 "--out", str(tmp_path / "sw")]) == 1


def test_unknown_subcommand_and_options(tmp_path):
    assert main(["nope"]) == 1
    assert main(["fit", "--model", "bart", "x.csv", "--out", str(tmp_path)]) == 1


def test_sweep_prior_multipliers(config, tmp_path):
    code = main(["sweep", "--config", config, "--axis", "prior_multiplier", "--values", "0.25,0.5,1,2,4",
                 "--models", "abcf", "--reps", "1", "--seed", "3", "--out", str(tmp_path / "sw")])
    assert code == 0
    summary = pd.read_csv(tmp_path / "sw" / "sweep_summary.csv")
    rows = summary[(summary.estimand == "sigma_u") & (summary.metric == "squared_error")]
    assert len(rows) == 5
    assert sorted(p.name for p in (tmp_path / "sw").iterdir() if p.is_dir() and p.name != "cache") == [
        "prior_multiplier=0.25", "prior_multiplier=0.5", "prior_multiplier=1.0", "prior_multiplier=2.0",
        "prior_multiplier=4.0"]


def test_sweep_residual_shares(config, tmp_path):
    code = main(["sweep", "--config", config, "--axis", "residual_share", "--values", "0,0.26,0.7,1.0",
                 "--reps", "2", "--out", str(tmp_path / "sw")])
    assert code == 0
    metrics = pd.read_csv(tmp_path / "sw" / "sweep_metrics.csv")
    assert metrics.scenario.nunique() == 4
    for s in metrics.scenario.unique():
        comp = pd.read_csv(tmp_path / "sw" / s / "comparison.csv")
        assert (comp.model_a == "bcf").all() and (comp.model_b == "abcf").all()
