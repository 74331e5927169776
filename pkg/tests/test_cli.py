import csv
import json
import subprocess
import sys

import pytest

from diffquant.cli import main

from helpers import data, to_toml


@pytest.fixture
def toy(tmp_path):
    def write(name="toy.toml", **patch):
        p = tmp_path / name
        p.write_text(to_toml(data(**patch)))
        return str(p)
    return write


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_validate_shipped(capsys):
    code, out, _ = run(capsys, "validate", "lq.toml")
    assert code == 0
    report = json.loads(out)
    assert report["criterion"] == "discounted" and report["checks"]["min_eig_a"] > 0


def test_unknown_criterion_exit_1(capsys, toy, tmp_path):
    code, out, err = run(capsys, "eval", toy(), "--criterion", "bogus", "--out-dir", tmp_path)
    assert code == 1 and out == ""
    payload = json.loads(err)
    assert payload["kind"] == "config" and payload["field"] == "criterion.kind"


def test_config_errors_exit_1(capsys, tmp_path, toy):
    code, _, err = run(capsys, "validate", tmp_path / "missing.toml")
    assert code == 1 and json.loads(err)["error"] == "ConfigError"
    code, _, err = run(capsys, "validate", toy(schedule={"reference_n": 6}))
    assert code == 1 and json.loads(err)["error"] == "ScheduleTooCoarse"
    code, _, err = run(capsys, "study", "ergodic", toy(), "--out-dir", tmp_path)
    assert code == 1 and json.loads(err)["field"] == "criterion.kind"


def test_numerical_failure_exit_2(capsys, toy, tmp_path):
    cfg = toy(model={"alpha": None, "exit": {"low": [-1.0], "high": [1.0]}},
              criterion={"kind": "exit"}, grid={"low": None, "high": None, "h": 0.05},
              mc={"t_max": None, "max_time": 0.01, "dt": 0.001})
    code, _, err = run(capsys, "eval", cfg, "--method", "mc", "--out-dir", tmp_path)
    assert code == 2
    payload = json.loads(err)
    assert payload["kind"] == "numerical" and payload["error"] == "MaxTimeExceeded"


def test_study_discounted_shipped(capsys, tmp_path):
    code, out, _ = run(capsys, "study", "discounted", "--config", "lq.toml", "--out-dir", tmp_path)
    assert code == 0 and json.loads(out)["gap_violations"] == 0
    rows = read_rows(tmp_path / "study_discounted.csv")
    action = [r for r in rows if r["kind"] == "action"]
    assert [int(r["resolution"]) for r in action] == [2, 4, 8, 16, 32]
    assert all(float(r["gap"]) >= 0 for r in rows)


def test_threads_do_not_change_output(capsys, toy, tmp_path, monkeypatch):
    cfg = toy(mc={"block_size": 64})
    texts = []
    for i, th in enumerate(["1", "4", None]):
        out = tmp_path / f"o{i}"
        args = ["study", "discounted", cfg, "--out-dir", out] + (["--threads", th] if th else [])
        if th is None:
            monkeypatch.setenv("DIFFQUANT_THREADS", "3")
        assert run(capsys, *args)[0] == 0
        texts.append((out / "study_discounted.csv").read_text().split("\n", 1)[1])
    assert texts[0] == texts[1] == texts[2]
    # a different seed changes the Monte Carlo column
    assert run(capsys, "study", "discounted", cfg, "--out-dir", tmp_path / "s", "--seed", "5")[0] == 0
    assert (tmp_path / "s" / "study_discounted.csv").read_text().split("\n", 1)[1] != texts[0]


def test_solve_quantize_eval_pairing(capsys, toy, tmp_path):
    cfg = toy()
    code, out, _ = run(capsys, "solve", cfg, "--out-dir", tmp_path, "--plot")
    assert code == 0
    written = json.loads(out)["written"]
    assert any(w.endswith(".png") for w in written)
    pol = tmp_path / "policy_discounted.json"
    assert len(read_rows(tmp_path / "value_discounted.csv")) == 121

    q = tmp_path / "q.json"
    assert run(capsys, "quantize", cfg, "--policy", pol, "--n", 2, "--m", 2, "--cells", 4,
               "-o", q)[0] == 0
    assert json.loads(q.read_text())["type"] == "cell"

    code, out, _ = run(capsys, "eval", cfg, "--policy", q, "--method", "both", "--format", "json",
                       "--out-dir", tmp_path)
    assert code == 0
    rows = json.loads((tmp_path / "eval_discounted.json").read_text())
    assert {r["method"] for r in rows} == {"pde", "mc"}
    assert next(r for r in rows if r["method"] == "pde")["std_error"] is None

    code, out, _ = run(capsys, "pairing", cfg, "--policy", pol, "--n", 2, 4, "--out-dir", tmp_path,
                       "--plot")
    assert code == 0 and (tmp_path / "pairing.png").stat().st_size > 0
    prs = read_rows(tmp_path / "pairing.csv")
    assert len(prs) == 12
    assert all(abs(float(r["diff"])) <= float(r["bound"]) + 1e-6 for r in prs)


def test_study_plot_and_json(capsys, toy, tmp_path):
    cfg = toy(mc=None)
    assert run(capsys, "study", "discounted", cfg, "--out-dir", tmp_path, "--format", "json",
               "--plot")[0] == 0
    data_ = json.loads((tmp_path / "study_discounted.json").read_text())
    assert len(data_["rows"]) == 5
    assert (tmp_path / "study_discounted.png").stat().st_size > 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diffquant", "validate", "brownian_exit"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "diffquant", "eval", "lq", "--criterion", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and json.loads(proc.stderr)["field"] == "criterion.kind"
