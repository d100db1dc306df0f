import json

import numpy as np
import pytest

from yieldforge import cli
from yieldforge import qnm as Q
from yieldforge.data import Dataset

FAST_TRAIN = ["--train.epochs=30", "--train.M=3", "--train.hidden_sizes=[6,4]"]
FAST_SR = ["--sr.population_size=40", "--sr.generations=3", "--sr.polish_steps=10", "--sr.samples_per_fn=32"]


def run(tmp_path, *args):
    return cli.main([*args, f"--output_dir={tmp_path}"])


def rows(path):
    return len(path.read_text().splitlines()) - 1


def test_gen_data_counts(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert rows(tmp_path / "data.csv") == 26_400
    assert json.loads((tmp_path / "data.csv.json").read_text())["N_phi"] == 11
    assert run(tmp_path, "gen-data", "--data.generator=matsuoka-nakai") == 0
    assert rows(tmp_path / "data.csv") == 13_200
    assert run(tmp_path, "gen-data", "--data.generator=user-expr", "--data.n_phi=1", "--data.band=[1.0,1.0]") == 0
    assert rows(tmp_path / "data.csv") == 6000


def test_config_errors_exit_2(tmp_path, capsys):
    assert run(tmp_path, "gen-data", "--data.generator=tresca") == cli.EXIT_CONFIG
    assert "unknown generator" in capsys.readouterr().err
    assert run(tmp_path, "gen-data", "--data.nonsense=1") == cli.EXIT_CONFIG
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epoch": 3}}))
    assert run(tmp_path, "train", "--config", str(cfg)) == cli.EXIT_CONFIG
    # missing dataset
    assert run(tmp_path, "train") == cli.EXIT_CONFIG
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG


def test_config_file_and_freeform_sections(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"params": {"n_p": 3, "n_theta": 8}}}))
    assert run(tmp_path, "gen-data", "--config", str(cfg)) == 0
    assert rows(tmp_path / "data.csv") == 3 * 8 * 11


def test_zero_epoch_model_equals_init(tmp_path):
    assert run(tmp_path, "gen-data", "--data.params={\"n_p\":3,\"n_theta\":8}") == 0
    assert run(tmp_path, "train", "--train.epochs=0", "--train.M=3", "--train.hidden_sizes=[5]", "--seed=7") == 0
    got = json.loads((tmp_path / "model.json").read_text())
    init = Q.init_model(3, "NAM", M=3, hidden_sizes=(5,), seed=7)
    for a, b in zip(got["shape_fns"], init.to_dict()["shape_fns"]):
        assert a == b
    assert got["w"] == init.to_dict()["w"]


def test_train_divergence_exit_3(tmp_path):
    ds = Dataset(np.linspace(0, 1, 6)[:, None], np.array([0, 0, 1e308, 1e308, 0, 0]), ["x"], {})
    ds.write_csv(tmp_path / "data.csv")
    assert run(tmp_path, "train", "--train.epochs=5", "--train.scale_target=false", "--train.lr=1e3") == cli.EXIT_TRAIN


def small_pipeline(tmp_path, extra=()):
    # enough training for the assembled surface to depend on rho, so the return map converges
    train = ["--train.epochs=400", "--train.M=6", "--train.hidden_sizes=[12,12]"]
    sr = ["--sr.population_size=200", "--sr.generations=8", "--sr.polish_steps=50", "--sr.samples_per_fn=64"]
    args = ["--data.params={\"n_p\":4,\"n_theta\":24}", *train, *sr, "--simulate.steps=5", *extra]
    args += ["--analyze.n_theta=200", "--analyze.convexity_n_theta=36", "--analyze.benchmark_grid={\"n_theta\":20,\"n_p\":4,\"p_range\":[-500,500]}"]
    return run(tmp_path, "pipeline", *args)


def test_pipeline_runs_and_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert small_pipeline(a) == 0
    assert small_pipeline(b) == 0
    names = ["data.csv", "model.json", "trace.csv", "features.json", "fronts.json", "selection.json",
             "symbolic.json", "history.csv", "analysis.json", "symmetry.csv"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    sym = json.loads((a / "symbolic.json").read_text())
    assert sym["kind"] == "symbolic" and sym["names"] == ["p", "rho", "theta"]
    report = json.loads((a / "analysis.json").read_text())
    assert {"hessian_convexity", "symmetry", "surface_rms"} <= set(report)
    assert rows(a / "history.csv") == 5


def test_max_complexity_override(tmp_path):
    assert small_pipeline(tmp_path) == 0
    assert run(tmp_path, "distill", *FAST_SR, "--max-complexity=1") == 0
    sel = json.loads((tmp_path / "selection.json").read_text())["selection"]
    assert all(s["complexity"] <= 1 for s in sel)
    # per-feature limits through the config
    assert run(tmp_path, "distill", *FAST_SR, "--sr.max_complexity={\"p\":1}") == 0
    sel = {s["feature"]: s for s in json.loads((tmp_path / "selection.json").read_text())["selection"]}
    assert sel["p"]["complexity"] == 1
    assert run(tmp_path, "distill", *FAST_SR, "--max-complexity=0") == cli.EXIT_SR


def test_simulate_symbolic_and_nonconvergence(tmp_path):
    (tmp_path / "vm.json").write_text(json.dumps({"kind": "symbolic", "expr": "sqrt(1.5)*rho - 250", "names": ["p", "rho", "theta"]}))
    assert run(tmp_path, "simulate", "--simulate.model=vm.json", "--simulate.steps=40") == 0
    sig = np.loadtxt(tmp_path / "history.csv", delimiter=",", skiprows=1)[:, 4:7]
    rho = np.linalg.norm(sig - sig.mean(axis=1, keepdims=True), axis=1)
    assert np.allclose(rho[-10:], np.sqrt(2 / 3) * 250, rtol=1e-9)
    assert run(tmp_path, "simulate", "--simulate.model=vm.json", "--simulate.max_iter=0") == cli.EXIT_SIM


def test_analyze_reference_model(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({
        "kind": "symbolic", "expr": "rho - 52.73*sin(3.01*theta - 9.45) - 215.01", "names": ["p", "rho", "theta"]}))
    assert run(tmp_path, "analyze", "--analyze.model=m.json", "--analyze.benchmark=null") == 0
    rep = json.loads((tmp_path / "analysis.json").read_text())
    assert rep["polar_convexity"]["A1"] == pytest.approx(-22410.7, rel=1e-3)
    assert rep["symmetry"]["per_n"][0]["max_error"] == pytest.approx(1.10435, abs=1e-4)
    assert rep["hessian_convexity"]["violation_fraction"] > 0


def test_direct_sr_reports_occurrences(tmp_path):
    assert run(tmp_path, "gen-data", "--data.generator=toy4d", "--data.n=200") == 0
    assert run(tmp_path, "direct-sr", *FAST_SR) == 0
    rep = json.loads((tmp_path / "direct_report.json").read_text())
    assert set(rep["occurrences_best"]) == {"x1", "x2", "x3", "x4"}
    assert rep["generations"] == 3 * 4
    assert rep["n_test"] == 40 and all(e["test_rmse"] is not None for e in rep["front"])


def test_direct_sr_constant_data(tmp_path):
    Dataset(np.random.default_rng(0).uniform(0, 1, (30, 2)), np.full(30, 1.5), ["a", "b"], {}).write_csv(tmp_path / "data.csv")
    assert run(tmp_path, "direct-sr", *FAST_SR) == 0
    rep = json.loads((tmp_path / "direct_report.json").read_text())
    assert len(rep["front"]) == 1 and rep["front"][0]["complexity"] == 1


def test_print_defaults(capsys):
    assert cli.main(["--print-defaults"]) == 0
    assert json.loads(capsys.readouterr().out) == cli.DEFAULTS
