import csv
import json

import pytest

from polydec.cli import main
from test_pipeline import tiny  # noqa: F401 - fixture


def test_enumerate(tmp_path, capsys):
    assert main(["enumerate", "--system", "cartpole", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "decompositions.jsonl").read_text().splitlines()
    assert len(lines) == 44
    assert "pi_F(x, pi_tau(theta, thetadot))" in capsys.readouterr().out


def test_estimate_and_rank(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["estimate", "--system", "manip2", "--no-bar", "--out", out]) == 0
    capsys.readouterr()
    assert main(["rank", "--out", out]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("id\tserialization")
    assert table[-1].split("\t")[0] == "2"


def test_config_file_and_flags(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"system": "manip2", "lqr_bar": False, "out": str(tmp_path / "a")}))
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "report.csv").exists()
    assert not (tmp_path / "a").exists()


def test_solve_and_verify(tiny, tmp_path):
    out = str(tmp_path)
    assert main(["verify", "--system", tiny, "--prune", "top:2", "--no-bar", "--out", out]) == 0
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert sum(r["err"] != "" for r in rows) == 3
    assert (tmp_path / "grids" / "0").is_dir()


def test_simulate(tmp_path):
    dec = '{"kind":"cascaded","chain":[{"inputs":[1],"states":[2,3]},{"inputs":[0],"states":[0,1]}]}'
    args = ["simulate", "--system", "cartpole", "--decomposition", dec, "--horizon", "0.5",
            "--x0", "0.1,0,3.0,0", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = list(csv.reader(open(tmp_path / "rollout.csv")))
    assert len(rows) == 501 and rows[0][0] == "t"


@pytest.mark.parametrize("argv", [
    ["estimate", "--system", "quadrotor"],
    ["estimate", "--system", "manip2", "--prune", "top:none"],
    ["estimate"],
])
def test_configuration_errors(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert "polydec: error" in capsys.readouterr().err


def test_thread_variable(monkeypatch, tmp_path):
    monkeypatch.setenv("POLYDEC_THREADS", "zero")
    assert main(["estimate", "--system", "manip2", "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("POLYDEC_THREADS", "2")
    assert main(["estimate", "--system", "manip2", "--no-bar", "--out", str(tmp_path)]) == 0
