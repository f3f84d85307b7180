"""Monte Carlo orchestration, metrics, overhead accounting and result files."""

from __future__ import annotations

import csv
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import run_param_fusion, run_signal_ml, run_single_bs
from .config import SceneConfig, dump_resolved
from .errors import OverheadOrderingError
from .forward import TargetState, noise_variance_for_snr, synthesize_echo
from .hgamp import run_hgamp
from .report import _plain

ESTIMATORS = {
    "single_bs": run_single_bs,
    "param_fusion": run_param_fusion,
    "hgamp": run_hgamp,
    "signal_ml": run_signal_ml,
}

SUMMARY_COLUMNS = ["snr_db", "method", "pos_rmse_m", "vel_rmse_mps", "ci_pos", "ci_vel",
                   "n_converged", "n_nonconverged"]


# ---------------------------------------------------------------------------
# trial records


@dataclass
class MethodResult:
    method: str
    xi_hat: list | None
    alpha_hat: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    flops: int = 0
    scalars_uplinked: int = 0
    scalars_downlinked: int = 0
    runtime_s: float = 0.0
    flags: list = field(default_factory=list)
    error: str | None = None
    per_bs: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.error is None and self.xi_hat is not None

    def position_error(self, truth) -> float:
        return float(math.hypot(self.xi_hat[0] - truth[0], self.xi_hat[1] - truth[1]))

    def velocity_error(self, truth) -> float:
        return float(math.hypot(self.xi_hat[2] - truth[2], self.xi_hat[3] - truth[3]))


@dataclass
class TrialRecord:
    trial: int
    seed: int
    snr_db: float
    noise_variance: float
    truth: list
    alphas: list
    results: dict

    def to_json(self) -> dict:
        d = asdict(self)
        d["alphas"] = [[float(np.real(a)), float(np.imag(a))] for a in self.alphas]
        return _plain(d)

    @classmethod
    def from_json(cls, d: dict) -> "TrialRecord":
        res = {k: MethodResult(**v) for k, v in d["results"].items()}
        alphas = [complex(a[0], a[1]) for a in d["alphas"]]
        return cls(d["trial"], d["seed"], d["snr_db"], d["noise_variance"], d["truth"], alphas, res)

    def deterministic_view(self) -> dict:
        """The record without wall-clock quantities."""
        d = self.to_json()
        for r in d["results"].values():
            r.pop("runtime_s", None)
        return d


def trial_rng(seed: int, trial: int, bs: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, trial, bs]))


def draw_trial(config: SceneConfig, snr_db: float, trial: int):
    """alpha_l ~ CN(0, sigma_l^2) and echoes for every BS from the (seed, trial, BS) streams.

    The alpha and all standard-normal draws are the same at every SNR, only
    the noise scale changes.
    """
    nv = noise_variance_for_snr(config, snr_db)
    alphas, echoes = [], []
    for l, st in enumerate(config.stations):
        rng = trial_rng(config.seed, trial, l)
        sd = math.sqrt(st.rcs_variance / 2.0)
        a = complex(rng.normal(0.0, sd), rng.normal(0.0, sd))
        alphas.append(a)
        echoes.append(synthesize_echo(config, config.truth, a, l, rng, nv))
    return alphas, echoes, nv


def _result_from_report(rep) -> MethodResult:
    xi = [float(v) for v in rep.xi_hat]
    per_bs = _plain(rep.extra.get("per_bs", []))
    return MethodResult(
        method=rep.method, xi_hat=xi,
        alpha_hat=[[float(np.real(a)), float(np.imag(a))] for a in rep.alpha_hat],
        converged=bool(rep.converged) and bool(np.all(np.isfinite(xi))),
        iterations=int(rep.iterations), flops=int(rep.overhead.flops),
        scalars_uplinked=int(rep.overhead.scalars_uplinked),
        scalars_downlinked=int(rep.overhead.scalars_downlinked),
        runtime_s=float(rep.runtime_s), flags=list(rep.flags), per_bs=per_bs,
    )


def run_trial(config: SceneConfig, snr_db: float, trial_idx: int, methods=None) -> TrialRecord:
    """Synthesize once, run every selected method on the same echoes."""
    methods = tuple(config.methods if methods is None else methods)
    alphas, echoes, nv = draw_trial(config, snr_db, trial_idx)
    results = {}
    for m in methods:
        t0 = time.perf_counter()
        try:
            results[m] = _result_from_report(ESTIMATORS[m](config, echoes))
        except Exception as exc:  # an estimator failure must not abort the trial
            results[m] = MethodResult(m, None, error=f"{type(exc).__name__}: {exc}",
                                      runtime_s=time.perf_counter() - t0,
                                      flags=[traceback.format_exc(limit=1).strip().splitlines()[-1]])
    return TrialRecord(trial_idx, config.seed, float(snr_db), nv, config.truth.as_array().tolist(),
                       alphas, results)


# ---------------------------------------------------------------------------
# summaries


@dataclass
class SummaryRow:
    snr_db: float
    method: str
    pos_rmse_m: float | None
    vel_rmse_mps: float | None
    ci_pos: float | None
    ci_vel: float | None
    n_converged: int
    n_nonconverged: int


@dataclass
class SweepSummary:
    rows: list

    def cell(self, snr_db, method) -> SummaryRow | None:
        for r in self.rows:
            if r.snr_db == snr_db and r.method == method:
                return r
        return None


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(e ** 2)))


def bootstrap_rmse_ci(errors, n_boot: int = 1000, level: float = 0.95, seed: int = 0):
    """(lo, hi) percentile bootstrap interval of the RMSE."""
    e = np.asarray(errors, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(e), size=(n_boot, len(e)))
    stats = np.sqrt(np.mean(e[idx] ** 2, axis=1))
    a = (1.0 - level) / 2.0
    return float(np.quantile(stats, a)), float(np.quantile(stats, 1.0 - a))


def _errors(records, method, snr, metric):
    out = []
    for r in records:
        if r.snr_db != snr or method not in r.results:
            continue
        res = r.results[method]
        if res.ok and res.converged:
            out.append(res.position_error(r.truth) if metric == "pos" else res.velocity_error(r.truth))
    return out


def rmse_summary(records, truth=None, n_boot: int = 1000, seed: int = 0) -> SweepSummary:
    """Per (SNR, method) RMSE over converged trials with bootstrap CI half-widths.

    ``truth`` overrides the truth stored in the records.
    """
    if truth is not None:
        t = np.asarray(truth.as_array() if isinstance(truth, TargetState) else truth, dtype=float).tolist()
        records = [TrialRecord(r.trial, r.seed, r.snr_db, r.noise_variance, t, r.alphas, r.results)
                   for r in records]
    snrs = sorted({r.snr_db for r in records})
    methods = []
    for r in records:
        for m in r.results:
            if m not in methods:
                methods.append(m)
    rows = []
    for s in snrs:
        for m in methods:
            total = sum(1 for r in records if r.snr_db == s and m in r.results)
            pe, ve = _errors(records, m, s, "pos"), _errors(records, m, s, "vel")
            if not pe:
                rows.append(SummaryRow(s, m, None, None, None, None, 0, total))
                continue
            lo_p, hi_p = bootstrap_rmse_ci(pe, n_boot, seed=seed)
            lo_v, hi_v = bootstrap_rmse_ci(ve, n_boot, seed=seed + 1)
            rows.append(SummaryRow(s, m, rmse(pe), rmse(ve), 0.5 * (hi_p - lo_p), 0.5 * (hi_v - lo_v),
                                   len(pe), total - len(pe)))
    return SweepSummary(rows)


def paired_rmse_difference(records, method_a, method_b, snr, metric="pos", n_boot: int = 2000,
                           seed: int = 0):
    """RMSE(a) - RMSE(b) on trials where both converged, with a paired
    bootstrap 95% interval. Returns (difference, lo, hi, n_pairs)."""
    ea, eb = [], []
    for r in records:
        if r.snr_db != snr:
            continue
        ra, rb = r.results.get(method_a), r.results.get(method_b)
        if not (ra and rb and ra.ok and rb.ok and ra.converged and rb.converged):
            continue
        if metric == "pos":
            ea.append(ra.position_error(r.truth))
            eb.append(rb.position_error(r.truth))
        else:
            ea.append(ra.velocity_error(r.truth))
            eb.append(rb.velocity_error(r.truth))
    ea, eb = np.asarray(ea), np.asarray(eb)
    if ea.size == 0:
        return None, None, None, 0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, ea.size, size=(n_boot, ea.size))
    d = np.sqrt(np.mean(ea[idx] ** 2, axis=1)) - np.sqrt(np.mean(eb[idx] ** 2, axis=1))
    return rmse(ea) - rmse(eb), float(np.quantile(d, 0.025)), float(np.quantile(d, 0.975)), int(ea.size)


# ---------------------------------------------------------------------------
# overhead


OVERHEAD_COLUMNS = ["method", "mean_flops", "mean_scalars_uplinked", "mean_scalars_downlinked", "n_records"]


def overhead_report(records, check: bool = True) -> list:
    """Per-method mean flops and mean uplinked/downlinked scalars.

    With ``check`` the orderings uplink(param_fusion) < uplink(hgamp) <
    uplink(signal_ml) and flops(hgamp) < flops(signal_ml) are asserted for
    whichever of those methods are present.
    """
    methods = []
    for r in records:
        for m in r.results:
            if m not in methods:
                methods.append(m)
    table = []
    for m in methods:
        res = [r.results[m] for r in records if m in r.results and r.results[m].ok]
        if not res:
            continue
        table.append({
            "method": m,
            "mean_flops": float(np.mean([x.flops for x in res])),
            "mean_scalars_uplinked": float(np.mean([x.scalars_uplinked for x in res])),
            "mean_scalars_downlinked": float(np.mean([x.scalars_downlinked for x in res])),
            "n_records": len(res),
        })
    if check:
        check_overhead_ordering(table)
    return table


def check_overhead_ordering(table) -> None:
    by = {row["method"]: row for row in table}
    up = [m for m in ("param_fusion", "hgamp", "signal_ml") if m in by]
    for a, b in zip(up, up[1:]):
        if not by[a]["mean_scalars_uplinked"] < by[b]["mean_scalars_uplinked"]:
            raise OverheadOrderingError(
                f"uplink ordering violated: {a}={by[a]['mean_scalars_uplinked']} "
                f">= {b}={by[b]['mean_scalars_uplinked']}")
    if "hgamp" in by and "signal_ml" in by and not by["hgamp"]["mean_flops"] < by["signal_ml"]["mean_flops"]:
        raise OverheadOrderingError(
            f"flops ordering violated: hgamp={by['hgamp']['mean_flops']:.3e} "
            f">= signal_ml={by['signal_ml']['mean_flops']:.3e}")


# ---------------------------------------------------------------------------
# scatter data (single trial)


SCATTER_COLUMNS = ["kind", "method", "bs", "x_m", "y_m", "vx_mps", "vy_mps", "pos_error_m"]


def scatter_rows(record: TrialRecord) -> list:
    """One row per BS estimate, one per fusion method, and the truth."""
    t = record.truth
    rows = [{"kind": "truth", "method": "", "bs": "", "x_m": t[0], "y_m": t[1],
             "vx_mps": t[2], "vy_mps": t[3], "pos_error_m": 0.0}]
    src = record.results.get("param_fusion") or record.results.get("single_bs")
    if src is not None and src.ok:
        for b in src.per_bs:
            rows.append({"kind": "bs_estimate", "method": "single_bs", "bs": b["bs"],
                         "x_m": b["x_m"], "y_m": b["y_m"], "vx_mps": "", "vy_mps": "",
                         "pos_error_m": math.hypot(b["x_m"] - t[0], b["y_m"] - t[1])})
    for m in ("param_fusion", "hgamp", "signal_ml"):
        r = record.results.get(m)
        if r is not None and r.ok:
            rows.append({"kind": "fused", "method": m, "bs": "", "x_m": r.xi_hat[0], "y_m": r.xi_hat[1],
                         "vx_mps": r.xi_hat[2], "vy_mps": r.xi_hat[3],
                         "pos_error_m": r.position_error(t)})
    return rows


def fused_beats_worst_bs(record: TrialRecord) -> bool:
    """Every fused estimate is closer to the truth than the worst per-BS estimate."""
    rows = scatter_rows(record)
    bs = [r["pos_error_m"] for r in rows if r["kind"] == "bs_estimate"]
    fused = [r["pos_error_m"] for r in rows if r["kind"] == "fused"]
    if not bs or not fused:
        return False
    return max(fused) < max(bs)


# ---------------------------------------------------------------------------
# files


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, columns, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r[k]) for k in columns})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def emit_results(summary: SweepSummary, records, out_dir, fmt: str = "csv",
                 scatter_record: TrialRecord | None = None) -> dict:
    """summary.csv, records.jsonl and (if a trial is given) scatter.csv in ``out_dir``."""
    if fmt != "csv":
        raise ValueError(f"unsupported summary format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from exc
    paths = {"summary": out / "summary.csv", "records": out / "records.jsonl"}
    _write_csv(paths["summary"], SUMMARY_COLUMNS, [asdict(r) for r in summary.rows])
    try:
        with open(paths["records"], "w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_json()) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {paths['records']}: {exc.strerror}") from exc
    if scatter_record is not None:
        paths["scatter"] = out / "scatter.csv"
        _write_csv(paths["scatter"], SCATTER_COLUMNS, scatter_rows(scatter_record))
    return paths


def write_overhead(table, path) -> None:
    _write_csv(Path(path), OVERHEAD_COLUMNS, table)


def load_records(path) -> list:
    with open(path) as fh:
        return [TrialRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# sweep


def _work(args):
    config, snr, trial, methods = args
    return run_trial(config, snr, trial, methods)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("COISAC_THREADS", "1")))
    except ValueError:
        return 1


def sweep(config: SceneConfig, out_dir=None, snrs=None, n_trials: int | None = None, methods=None,
          workers: int | None = None, figures: bool = True, progress=None):
    """Run every (SNR, trial) cell; optionally write all result files and figures.

    Returns (summary, records). Records are sorted by (SNR, trial), so the
    output does not depend on the number of workers.
    """
    snrs = list(config.snr_db if snrs is None else snrs)
    n_trials = config.n_trials if n_trials is None else n_trials
    workers = thread_count() if workers is None else workers
    jobs = [(config, s, t, methods) for s in snrs for t in range(n_trials)]
    records = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rec in ex.map(_work, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        for job in jobs:
            rec = _work(job)
            records.append(rec)
            if progress:
                progress(rec)
    records.sort(key=lambda r: (r.snr_db, r.trial))
    summary = rmse_summary(records)
    if out_dir is not None:
        out = Path(out_dir)
        scatter = _scatter_choice(records)
        emit_results(summary, records, out, scatter_record=scatter)
        table = overhead_report(records, check=False)
        write_overhead(table, out / "overhead.csv")
        dump_resolved(config, out / "resolved_config.json")
        if figures:
            from .plotting import plot_overhead, plot_rmse, plot_scatter
            plot_rmse(summary, out)
            plot_overhead(table, out / "overhead.png")
            if scatter is not None:
                plot_scatter(scatter_rows(scatter), out / "scatter.png")
    return summary, records


def _scatter_choice(records):
    # the lowest SNR at or above 0 dB, trial 0, mirrors the single-trial figure
    if not records:
        return None
    snrs = sorted({r.snr_db for r in records})
    pick = min((s for s in snrs if s >= 0), default=snrs[0])
    for r in records:
        if r.snr_db == pick and r.trial == min(x.trial for x in records if x.snr_db == pick):
            return r
    return None
