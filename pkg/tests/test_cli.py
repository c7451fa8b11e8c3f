import json

import pytest
from click.testing import CliRunner

from testlab.cli import FAIL_EXIT, main


@pytest.fixture
def runner():
    return CliRunner()


def test_version(runner):
    res = runner.invoke(main, ["--version"])
    assert res.exit_code == 0
    assert "0.1.0" in res.output


def test_gen_paninski(runner, tmp_path):
    out = tmp_path / "p.json"
    res = runner.invoke(main, ["gen", "--family", "Paninski", "--n", "10", "--eps", "0.2", "--lambda", "0.5",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    d = json.loads(out.read_text())
    assert d["lambda"] == 0.5
    assert d["metadata"]["distance"] == pytest.approx(0.2)


def test_gen_hard_instance_stdout(runner):
    res = runner.invoke(main, ["gen", "--family", "UniformityHard", "--n", "2000", "--m", "20", "--eps", "0.05",
                               "--lambda", "0.4", "--X", "1", "--seed", "3"])
    assert res.exit_code == 0, res.output
    assert json.loads(res.stdout)["metadata"]["ground_truth"] == "No"


def test_gen_bad_parameters(runner):
    res = runner.invoke(main, ["gen", "--family", "MaskedFar", "--n", "10", "--eps", "0.3", "--lambda", "0.9"])
    assert res.exit_code != 0
    assert "too large" in res.output


def test_uniformity_command(runner):
    res = runner.invoke(main, ["uniformity", "--n", "100", "--eps", "0.4", "--lambda", "0.5", "--trials", "3"])
    assert res.exit_code == 0, res.output
    d = json.loads(res.stdout)
    (cell,) = d["cells"]
    assert len(cell["records"]) == 3
    assert cell["summary"]["tester"] == "uniformity"


def test_uniformity_adversarial_mode(runner):
    res = runner.invoke(main, ["uniformity", "--n", "100", "--eps", "0.4", "--lambda", "0.5", "--mode", "adv",
                               "--adversary", "point-mass", "--trials", "2"])
    assert res.exit_code == 0, res.output
    assert json.loads(res.stdout)["config"]["instance"]["adversary"] == "point-mass"


def test_identity_and_closeness(runner):
    res = runner.invoke(main, ["identity", "--n", "100", "--eps", "0.4", "--lambda", "0.5", "--family", "Far",
                               "--trials", "2"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["closeness", "--n", "100", "--eps", "0.4", "--lambda1", "0.5", "--lambda2", "0.8",
                               "--trials", "2"])
    assert res.exit_code == 0, res.output
    assert json.loads(res.stdout)["config"]["lam2"] == 0.8


def test_fail_dominated_exit_code(runner):
    args = ["uniformity", "--n", "100", "--eps", "0.3", "--lambda", "0.9", "--family", "MaskedFar", "--trials", "2"]
    assert runner.invoke(main, args).exit_code == FAIL_EXIT
    assert runner.invoke(main, args + ["--no-fail-exit"]).exit_code == 0


def test_bad_config_is_usage_error(runner):
    res = runner.invoke(main, ["uniformity", "--n", "100", "--trials", "0"])
    assert res.exit_code == 2
    assert "trials" in res.output


def test_sweep_and_fit(runner, tmp_path):
    cfg = {"tester": "uniformity", "instance": {"family": "Uniform"}, "n": [400], "m": [50, 100, 200, 400],
           "eps": [0.4], "lam": [0.5], "trials": 3}
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    csv_path = tmp_path / "out.csv"
    res = runner.invoke(main, ["sweep", "--config", str(path), "--csv", str(csv_path)])
    assert res.exit_code == 0, res.output
    assert res.stdout.splitlines()[0].startswith("tester,n,m")
    assert len(res.stdout.strip().splitlines()) == 5
    assert "# slope" in res.stderr
    res = runner.invoke(main, ["fit", str(csv_path)])
    assert res.exit_code == 0, res.output
    fit = json.loads(res.stdout)
    assert fit["slope"] < 0


def test_fit_too_few_rows(runner, tmp_path):
    p = tmp_path / "rows.csv"
    p.write_text("tester,n,m,eps,lambda,mean_queries\nt,1,10,0.4,0.5,3\n")
    res = runner.invoke(main, ["fit", str(p)])
    assert res.exit_code != 0
