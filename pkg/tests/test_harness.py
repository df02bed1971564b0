from __future__ import annotations

import json
import math
import os

import numpy as np
import pytest

from lvcons.core import StepSizeSchedule, run
from lvcons.harness import (
    SeedResult,
    aggregate,
    compare,
    constants_rows,
    first_hit,
    pmap,
    read_csv,
    replicate,
    reproduce,
    step_size_sweep,
    timing_table,
    write_csv,
)
from lvcons.scenario import load_scenario, parse_scenario


def test_csv_helpers():
    text = write_csv(["a", "b"], [[1, 0.5], [2, math.inf]])
    assert text.splitlines()[0] == "a,b"
    rows = read_csv(text)
    assert rows[1]["b"] == "inf"
    assert float(rows[0]["b"]) == 0.5


def test_float_format_roundtrips(rng):
    vals = rng.normal(size=50) * 10.0 ** rng.integers(-8, 8, 50)
    rows = read_csv(write_csv(["v"], ([v] for v in vals)))
    assert [float(r["v"]) for r in rows] == vals.tolist()


def test_pmap_preserves_order():
    assert pmap(lambda x: x * x, list(range(20)), threads=4) == [x * x for x in range(20)]


def test_first_hit():
    c = np.array([3.0, 2.0, 0.4, 1.0, 0.2])
    assert first_hit(c, 0.5) == 2
    assert first_hit(c, 0.5, 3) == 4
    assert first_hit(c, 0.1) is None


def test_single_seed_replication_equals_single_run():
    cfg = load_scenario("six-node")
    rep = replicate(cfg, 1, 7)
    tr = run(cfg.consensus_scenario(), 7)
    assert rep.aggregate["final_err"][0] == float(tr.err()[-1])
    assert math.isnan(rep.aggregate["final_err"][1])
    assert np.array_equal(rep.mean_curve, tr.err())


def test_aggregation_ignores_completion_order():
    rows = [SeedResult(s, {"m": 0.1 * s + 1e-17 * s * s}) for s in range(30)]
    shuffled = list(reversed(rows[::2])) + rows[1::2]
    assert aggregate(rows) == aggregate(shuffled)


def test_thread_count_does_not_change_outputs():
    cfg = load_scenario("six-node-delayed")
    a = replicate(cfg, 12, 0, threads=1)
    b = replicate(cfg, 12, 0, threads=4)
    assert a.per_seed_csv() == b.per_seed_csv()
    assert a.aggregate_csv() == b.aggregate_csv()
    assert a.curve_csv() == b.curve_csv()


def test_replication_reduces_error():
    rep = replicate(load_scenario("six-node"), 100, 0, threads=4)
    assert not rep.failures
    assert rep.mean_curve[200] < rep.mean_curve[10]
    # noisy observations keep a residual spread, but well inside eps = 1
    worst, ok = rep.eps_checks[1.0]
    assert ok and worst < 1.0
    assert "seeds 0..99 (100)" in rep.summary()


def test_failing_seed_is_reported_and_siblings_continue(monkeypatch):
    import lvcons.harness as h

    real = h._consensus_seed

    def flaky(cfg, seed):
        if seed == 1:
            raise FloatingPointError("diverged")
        return real(cfg, seed)

    monkeypatch.setattr(h, "_consensus_seed", flaky)
    rep = replicate(load_scenario("six-node"), 3, 0)
    assert rep.failures == {1: "FloatingPointError: diverged"}
    assert [r.seed for r in rep.rows if r.ok] == [0, 2]
    assert "seed 1 failed" in rep.summary()


def test_sweep_single_schedule_degenerates_to_replication():
    cfg = load_scenario("six-node")
    sw = step_size_sweep(cfg, [StepSizeSchedule("constant", 0.1)], range(0, 5))
    assert len(sw.rows) == 1
    rep = replicate(cfg, 5, 0)
    assert np.array_equal(sw.rows[0].mean_curve, rep.mean_curve)
    assert sw.injection_time is None
    assert read_csv(sw.summary_csv())[0]["schedule"] == "alpha=0.1"


def test_sweep_records_recovery_after_injection():
    cfg = load_scenario("six-node-lb")
    sw = step_size_sweep(cfg, [StepSizeSchedule("constant", 0.2)], range(3))
    assert sw.injection_time == 500
    assert all(0 < r < math.inf for r in sw.rows[0].recovery_times)


def test_compare_on_small_ring():
    cfg = load_scenario("ring")
    cs = compare(cfg, 1, T=400)
    assert cs.steps > 0
    assert cs.frac_d_abs_below > 0.9
    assert "without" in cs.metrics_csv()
    with pytest.raises(ValueError):
        compare(load_scenario("six-node"))


def test_timing_table_contains_anchor_rows():
    rows = timing_table(load_scenario("six-node"))
    anchor = {r[3]: r[4] for r in rows if r[0] == "anchor"}
    assert anchor[1.0] == pytest.approx(11.4003, abs=5e-4)
    assert anchor[0.1] == pytest.approx(12.8883, abs=5e-4)
    assert any(r[0] == "computed" for r in rows)


def test_constants_rows_finite():
    rows = constants_rows(load_scenario("six-node-delayed"))
    vals = {(r[0], r[1]): r[2] for r in rows}
    assert ("eps-consensus", "c3") in vals and ("discrete-deviation", "c3") in vals
    # the bounds themselves overflow; their logarithms do not
    assert np.isfinite(vals[("eps-consensus", "log_bound")])
    assert np.isfinite(vals[("discrete-deviation", "log_bound")])


def test_reproduce_writes_manifest(tmp_path):
    out = str(tmp_path / "delayed")
    summary = reproduce("six-node-delayed", out, seeds=3)
    assert "replication" in summary
    manifest = json.loads(open(os.path.join(out, "manifest.json")).read())
    paths = {a["path"] for a in manifest["artifacts"]}
    assert {"trace.csv", "timing.csv", "summary.json", "averaged_discrete.csv"} <= paths
    assert all(os.path.exists(os.path.join(out, p)) for p in paths)
    assert "six-node-delayed" in manifest["config_sha256"]
    with pytest.raises(ValueError):
        reproduce("nope", out)
