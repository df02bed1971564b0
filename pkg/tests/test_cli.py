from __future__ import annotations

import json
import os
import subprocess
import sys

import pytest

from lvcons.cli import main
from lvcons.harness import read_csv

DIVERGING = """
[topology]
n = 2
edge 1 2 1
edge 2 1 1
[schedule]
alpha = 5
[initial]
x0 = 1e300 -1e300
[run]
T = 50
strict = false
"""


def _manifest(out):
    with open(os.path.join(out, "manifest.json")) as fh:
        return json.load(fh)


def test_analyze_shipped_scenario(tmp_path, capsys):
    out = str(tmp_path / "a")
    assert main(["analyze", "six-node", "--out-dir", out]) == 0
    text = capsys.readouterr().out
    assert "spanning tree yes" in text
    assert "T(1) [anchor] = 11.400300" in text
    assert "T(0.1) [anchor] = 12.888335" in text
    paths = {a["path"] for a in _manifest(out)["artifacts"]}
    assert {"eigenvalues.csv", "timing.csv", "report.txt", "constants.csv"} <= paths


def test_analyze_edge_list(tmp_path, capsys):
    g = tmp_path / "g.txt"
    g.write_text("n 3\n1 2 1\n2 1 1\n2 3 1\n3 2 1\n")
    assert main(["analyze", str(g), "--x0", "0 3 6", "--out-dir", str(tmp_path / "o")]) == 0
    text = capsys.readouterr().out
    assert "balanced yes" in text and "lower bound" in text
    assert "x* 3" in text


def test_simulate_and_replicate(tmp_path, capsys):
    out = str(tmp_path / "s")
    assert main(["simulate", "six-node", "--seeds", "4", "--threads", "2", "--out-dir", out]) == 0
    assert "seeds 0..3 (4)" in capsys.readouterr().out
    rows = read_csv(open(os.path.join(out, "replication.csv")).read())
    assert [r["seed"] for r in rows] == ["0", "1", "2", "3"]


def test_lb_averaged_deviation_compare(tmp_path):
    assert main(["lb", "six-node-lb", "--out-dir", str(tmp_path / "lb")]) == 0
    assert main(["averaged", "six-node-delayed", "--out-dir", str(tmp_path / "av")]) == 0
    assert main(["deviation", "six-node", "--seeds", "3", "--out-dir", str(tmp_path / "dv")]) == 0
    assert os.path.exists(tmp_path / "av" / "averaged.csv")
    assert os.path.exists(tmp_path / "dv" / "deviation.csv")


def test_sweep_command(tmp_path, capsys):
    assert main(["sweep", "six-node-lb", "--seeds", "2", "--alphas", "0.1 0.2", "--out-dir", str(tmp_path)]) == 0
    assert "alpha=1/t" in capsys.readouterr().out
    assert main(["sweep", "six-node-lb", "--alphas", "0.1", "--one-over-t", "0", "--out-dir", str(tmp_path)]) == 1


def test_invalid_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[topology]\nn = 3\nd_bar = 1\nedge 2 3 1 1 0 0.5 0.6\n")
    assert main(["simulate", str(bad), "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "edge 3->2" in err and "x0 is required" in err
    assert main(["simulate", "six-node", "--threads", "0"]) == 1
    assert main(["lb", "six-node", "--out-dir", str(tmp_path)]) == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    cfg = tmp_path / "div.cfg"
    cfg.write_text(DIVERGING)
    assert main(["simulate", str(cfg), "--out-dir", str(tmp_path / "x")]) == 2
    assert "step" in capsys.readouterr().err


def test_reproduce_is_thread_independent(tmp_path):
    a, b = str(tmp_path / "t1"), str(tmp_path / "t4")
    assert main(["reproduce", "six-node-delayed", "--seeds", "4", "--out-dir", a]) == 0
    assert main(["reproduce", "six-node-delayed", "--seeds", "4", "--threads", "4", "--out-dir", b]) == 0
    assert _manifest(a)["artifacts"] == _manifest(b)["artifacts"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "lvcons", "analyze", "six-node", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "nodes 6" in res.stdout
