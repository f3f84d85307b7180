import json
import math

import numpy as np
import pytest

from coisac import harness
from coisac.errors import OverheadOrderingError
from coisac.forward import unit_model
from coisac.harness import (
    SUMMARY_COLUMNS, MethodResult, TrialRecord, bootstrap_rmse_ci,
    draw_trial, emit_results, fused_beats_worst_bs, load_records, overhead_report,
    paired_rmse_difference, rmse, rmse_summary, run_trial, scatter_rows, sweep, thread_count,
)

from conftest import make_scene

TRUTH = [60.0, 40.0, 30.0, 50.0]


def fake_record(trial, xi_by_method, snr=0.0, counters=None, converged=True):
    res = {}
    for m, xi in xi_by_method.items():
        c = (counters or {}).get(m, (0, 0, 0))
        res[m] = MethodResult(m, None if xi is None else list(xi), converged=converged,
                              flops=c[0], scalars_uplinked=c[1], scalars_downlinked=c[2],
                              error=None if xi is not None else "RuntimeError: boom")
    return TrialRecord(trial, 7, snr, 1.0, list(TRUTH), [1 + 0j], res)


@pytest.fixture(scope="module")
def tiny():
    return make_scene(n=8, m=8, nt=4, nr=4, n_trials=2, snr_db=[0.0, 10.0])


# ---------------------------------------------------------------------------
# run_trial


def test_repeat_trial_bit_identical(tiny):
    a = run_trial(tiny, 5.0, 3)
    b = run_trial(tiny, 5.0, 3)
    assert json.dumps(a.deterministic_view()) == json.dumps(b.deterministic_view())


def test_different_trials_differ(tiny):
    a, b = run_trial(tiny, 5.0, 0, ["param_fusion"]), run_trial(tiny, 5.0, 1, ["param_fusion"])
    assert a.alphas != b.alphas


def test_single_method_entry(tiny):
    rec = run_trial(tiny, 0.0, 0, ["hgamp"])
    assert list(rec.results) == ["hgamp"]


def test_estimator_error_captured(tiny, monkeypatch):
    def broken(config, echoes):
        raise RuntimeError("synthetic failure")

    monkeypatch.setitem(harness.ESTIMATORS, "single_bs", broken)
    rec = run_trial(tiny, 0.0, 0, ["single_bs", "param_fusion"])
    assert not rec.results["single_bs"].ok
    assert "synthetic failure" in rec.results["single_bs"].error
    assert rec.results["param_fusion"].ok


def test_common_random_numbers(tiny):
    # same standard-normal draws at every SNR, only the noise scale moves
    a1, e1, v1 = draw_trial(tiny, 0.0, 2)
    a2, e2, v2 = draw_trial(tiny, 20.0, 2)
    assert a1 == a2
    assert v1 == pytest.approx(100.0 * v2, rel=1e-12)
    for l, (x, y) in enumerate(zip(e1, e2)):
        clean = a1[l] * unit_model(tiny, l, tiny.truth, x.symbols, x.beamformers)
        np.testing.assert_allclose((x.y - clean) / math.sqrt(v1), (y.y - clean) / math.sqrt(v2),
                                   atol=1e-9)


@pytest.fixture(scope="module")
def noise_free_record(paper):
    return run_trial(paper, 200.0, 0)


@pytest.mark.parametrize("method", ["param_fusion", "hgamp", "signal_ml"])
def test_noise_free_multi_bs(noise_free_record, method):
    r = noise_free_record.results[method]
    assert r.ok and r.position_error(noise_free_record.truth) < 0.5


def test_wire_contract_counts(noise_free_record):
    res = noise_free_record.results
    assert res["hgamp"].scalars_uplinked == 8 * 3 * res["hgamp"].iterations
    assert res["signal_ml"].scalars_uplinked == 2 * 3 * 36 * 8 * 64 == 110592
    assert res["param_fusion"].scalars_uplinked == 9


# ---------------------------------------------------------------------------
# RMSE


def test_rmse_perfect_zero():
    recs = [fake_record(t, {"hgamp": TRUTH}) for t in range(4)]
    row = rmse_summary(recs).cell(0.0, "hgamp")
    assert row.pos_rmse_m == 0.0 and row.vel_rmse_mps == 0.0


def test_rmse_three_four():
    recs = [fake_record(0, {"hgamp": [63.0, 40.0, 30.0, 50.0]}),
            fake_record(1, {"hgamp": [60.0, 44.0, 30.0, 50.0]})]
    assert rmse_summary(recs).cell(0.0, "hgamp").pos_rmse_m == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_rmse_scalar_recomputation():
    rng = np.random.default_rng(11)
    xs = np.asarray(TRUTH) + rng.normal(0, 3, size=(10, 4))
    recs = [fake_record(t, {"hgamp": x}) for t, x in enumerate(xs)]
    row = rmse_summary(recs).cell(0.0, "hgamp")
    sp = sv = 0.0
    for x in xs:
        sp += (x[0] - 60.0) ** 2 + (x[1] - 40.0) ** 2
        sv += (x[2] - 30.0) ** 2 + (x[3] - 50.0) ** 2
    assert abs(row.pos_rmse_m - math.sqrt(sp / 10)) <= 1e-12
    assert abs(row.vel_rmse_mps - math.sqrt(sv / 10)) <= 1e-12


def test_empty_cell_missing():
    recs = [fake_record(t, {"hgamp": None, "param_fusion": TRUTH}) for t in range(3)]
    s = rmse_summary(recs)
    row = s.cell(0.0, "hgamp")
    assert row.pos_rmse_m is None and row.ci_pos is None
    assert (row.n_converged, row.n_nonconverged) == (0, 3)
    assert s.cell(0.0, "param_fusion").n_converged == 3


def test_nonconverged_reported_separately():
    recs = [fake_record(0, {"hgamp": TRUTH}), fake_record(1, {"hgamp": [70.0, 40, 30, 50]}, converged=False)]
    row = rmse_summary(recs).cell(0.0, "hgamp")
    assert row.pos_rmse_m == 0.0 and (row.n_converged, row.n_nonconverged) == (1, 1)


def test_truth_override():
    recs = [fake_record(0, {"hgamp": TRUTH})]
    row = rmse_summary(recs, truth=[63.0, 44.0, 30.0, 50.0]).cell(0.0, "hgamp")
    assert row.pos_rmse_m == pytest.approx(5.0)


def test_bootstrap_ci_coverage():
    # 2-D Gaussian errors with per-axis sd 2 have true RMSE 2*sqrt(2)
    rng = np.random.default_rng(2024)
    true = 2.0 * math.sqrt(2.0)
    hits = 0
    for k in range(200):
        e = np.hypot(*rng.normal(0.0, 2.0, size=(2, 100)))
        lo, hi = bootstrap_rmse_ci(e, n_boot=500, seed=k)
        hits += lo <= true <= hi
    assert hits >= 180


def test_rmse_nonnegative():
    assert rmse([-3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    assert rmse([0.0]) == 0.0


def test_paired_difference():
    rng = np.random.default_rng(5)
    recs = []
    for t in range(40):
        d = rng.normal(0, 1, 2)
        recs.append(fake_record(t, {
            "a": [60 + d[0], 40 + d[1], 30, 50],
            "b": [60 + 3 * d[0], 40 + 3 * d[1], 30, 50],
        }))
    diff, lo, hi, n = paired_rmse_difference(recs, "a", "b", 0.0)
    assert n == 40 and diff < 0 and lo <= diff <= hi < 0
    same = paired_rmse_difference(recs, "a", "a", 0.0)
    assert same[:3] == (0.0, 0.0, 0.0)
    assert paired_rmse_difference(recs, "a", "b", 99.0) == (None, None, None, 0)


# ---------------------------------------------------------------------------
# overhead


def contract_records():
    counters = {"param_fusion": (1, 9, 0), "hgamp": (4, 240, 240), "signal_ml": (9, 110592, 0)}
    return [fake_record(t, {m: TRUTH for m in counters}, counters=counters) for t in range(2)]


def test_overhead_table_means():
    table = {r["method"]: r for r in overhead_report(contract_records())}
    assert table["hgamp"]["mean_scalars_uplinked"] == 240
    assert table["signal_ml"]["mean_scalars_uplinked"] == 110592
    assert table["param_fusion"]["mean_scalars_uplinked"] == 9
    assert table["hgamp"]["n_records"] == 2


def test_overhead_single_method():
    recs = [fake_record(0, {"hgamp": TRUTH}, counters={"hgamp": (4, 240, 240)})]
    assert len(overhead_report(recs)) == 1


@pytest.mark.parametrize("bad", [
    {"param_fusion": (1, 300, 0), "hgamp": (4, 240, 240)},
    {"hgamp": (4, 240, 240), "signal_ml": (9, 100, 0)},
    {"hgamp": (10, 240, 240), "signal_ml": (9, 110592, 0)},
])
def test_overhead_ordering_fires(bad):
    recs = [fake_record(0, {m: TRUTH for m in bad}, counters=bad)]
    with pytest.raises(OverheadOrderingError):
        overhead_report(recs)
    assert len(overhead_report(recs, check=False)) == len(bad)


# ---------------------------------------------------------------------------
# files


def test_empty_sweep_header_only(tmp_path):
    paths = emit_results(rmse_summary([]), [], tmp_path)
    assert paths["summary"].read_text().strip() == ",".join(SUMMARY_COLUMNS)
    assert paths["records"].read_text() == ""


def test_jsonl_round_trip(tiny, tmp_path):
    recs = [run_trial(tiny, 0.0, t, ["single_bs", "param_fusion"]) for t in range(2)]
    recs.append(fake_record(5, {"hgamp": None}))
    paths = emit_results(rmse_summary(recs), recs, tmp_path)
    back = load_records(paths["records"])
    assert back == recs


def test_summary_csv_missing_blank(tmp_path):
    recs = [fake_record(0, {"hgamp": None})]
    paths = emit_results(rmse_summary(recs), recs, tmp_path)
    lines = paths["summary"].read_text().splitlines()
    assert lines[1].split(",")[2] == ""


def test_scatter_rows_content(noise_free_record, tmp_path):
    rows = scatter_rows(noise_free_record)
    kinds = [r["kind"] for r in rows]
    assert kinds.count("truth") == 1
    assert kinds.count("bs_estimate") == 3
    assert sorted(r["method"] for r in rows if r["kind"] == "fused") == ["hgamp", "param_fusion", "signal_ml"]
    paths = emit_results(rmse_summary([noise_free_record]), [noise_free_record], tmp_path,
                         scatter_record=noise_free_record)
    assert len(paths["scatter"].read_text().splitlines()) == 1 + len(rows)


def test_fused_beats_worst_needs_both():
    assert not fused_beats_worst_bs(fake_record(0, {"hgamp": TRUTH}))


def test_unwritable_path_named(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as exc:
        emit_results(rmse_summary([]), [], blocker / "sub")
    assert str(blocker) in str(exc.value)


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_results(rmse_summary([]), [], tmp_path, fmt="parquet")


# ---------------------------------------------------------------------------
# sweep


def test_sweep_writes_and_is_deterministic(tiny, tmp_path):
    s1, r1 = sweep(tiny, tmp_path / "a", methods=["single_bs", "param_fusion"], figures=False)
    s2, r2 = sweep(tiny, tmp_path / "b", methods=["single_bs", "param_fusion"], figures=False)
    assert [r.deterministic_view() for r in r1] == [r.deterministic_view() for r in r2]
    assert (tmp_path / "a" / "summary.csv").read_text() == (tmp_path / "b" / "summary.csv").read_text()
    for name in ("summary.csv", "records.jsonl", "scatter.csv", "overhead.csv", "resolved_config.json"):
        assert (tmp_path / "a" / name).exists()
    assert [(r.snr_db, r.trial) for r in r1] == [(0.0, 0), (0.0, 1), (10.0, 0), (10.0, 1)]
    assert len(s1.rows) == 4


def test_sweep_worker_count_invariant(tiny):
    _, r1 = sweep(tiny, snrs=[0.0], n_trials=2, methods=["param_fusion"], workers=1, figures=False)
    _, r2 = sweep(tiny, snrs=[0.0], n_trials=2, methods=["param_fusion"], workers=2, figures=False)
    assert [r.deterministic_view() for r in r1] == [r.deterministic_view() for r in r2]


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("COISAC_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("COISAC_THREADS", "junk")
    assert thread_count() == 1
    monkeypatch.delenv("COISAC_THREADS")
    assert thread_count() == 1
