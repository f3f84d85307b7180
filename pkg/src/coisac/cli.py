"""Command-line entry point.

    coisac simulate --config scene.toml --snr 0 --trial 3
    coisac sweep --config scene.toml --out results/
    coisac oracle-check --config tiny.toml

Exit codes: 0 success, 1 oracle check failed, 2 configuration error,
3 an estimator failed in every trial.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict

from .config import load_config
from .errors import ConfigError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ESTIMATOR = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coisac", description="Cooperative multi-BS ISAC estimation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one trial and print its record as JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--snr", type=float, required=True, help="SNR in dB")
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--methods", nargs="+", default=None)

    w = sub.add_parser("sweep", help="Monte Carlo sweep; writes CSV, JSON lines and PNG figures")
    w.add_argument("--config", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--trials", type=int, default=None, help="override the trial count")
    w.add_argument("--snr", type=float, nargs="+", default=None, help="override the SNR list")
    w.add_argument("--methods", nargs="+", default=None)
    w.add_argument("--no-figures", action="store_true")

    o = sub.add_parser("oracle-check", help="exact SPA versus enumeration on tiny instances")
    o.add_argument("--config", required=True)
    o.add_argument("--json", default=None, help="write per-instance results to this file")
    return p


def _all_failed(records, methods) -> list:
    bad = []
    for m in methods:
        res = [r.results[m] for r in records if m in r.results]
        if res and all(not x.ok for x in res):
            bad.append(m)
    return bad


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "methods", None):
        from .harness import ESTIMATORS

        unknown = [m for m in args.methods if m not in ESTIMATORS]
        if unknown:
            print(f"config error: unknown method(s) {', '.join(unknown)}; "
                  f"choose from {', '.join(ESTIMATORS)}", file=sys.stderr)
            return EXIT_CONFIG

    if args.command == "simulate":
        from .harness import run_trial

        methods = args.methods or list(config.methods)
        rec = run_trial(config, args.snr, args.trial, methods)
        json.dump(rec.to_json(), sys.stdout, indent=2)
        sys.stdout.write("\n")
        return EXIT_ESTIMATOR if _all_failed([rec], methods) else EXIT_OK

    if args.command == "sweep":
        from .harness import SUMMARY_COLUMNS, sweep

        if args.snr is not None:
            try:
                config = config.replace(snr_db=tuple(args.snr))
            except ConfigError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
        methods = args.methods or list(config.methods)

        def progress(rec):
            print(f"snr={rec.snr_db:g} trial={rec.trial} done", file=sys.stderr)

        summary, records = sweep(config, args.out, n_trials=args.trials, methods=methods,
                                 figures=not args.no_figures, progress=progress)
        w = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in summary.rows:
            w.writerow({k: ("" if v is None else v) for k, v in asdict(row).items()})
        failed = _all_failed(records, methods)
        if failed:
            print(f"estimators failed in every trial: {', '.join(failed)}", file=sys.stderr)
            return EXIT_ESTIMATOR
        return EXIT_OK

    if args.command == "oracle-check":
        from .spa import dump_json, oracle_check

        results = oracle_check(config)
        for r in results:
            status = "PASS" if r["passed"] else "FAIL"
            print(f"{status} instance={r['instance']} converged={r['converged']} "
                  f"iterations={r['iterations']} tv_xi={r['tv_xi']:.3e} tv_alpha={r['tv_alpha']:.3e} "
                  f"runtime_s={r['runtime_s']:.2f}")
        if args.json:
            dump_json(results, args.json)
        return EXIT_OK if all(r["passed"] for r in results) else EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
