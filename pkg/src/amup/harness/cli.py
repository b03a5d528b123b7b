"""Command-line front end: ``amup {probe,sweep,fit,predict,axioms,report}``.

Exit codes: 0 on success, 2 on a validation error, 3 on a runtime error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace

import numpy as np

from amup.aggregators import axioms
from amup.harness.config import ConfigError, load_config
from amup.harness.report import emit_report, summarize
from amup.harness.runner import load_record, probe_depth, run_experiment, with_seed

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def cmd_probe(args) -> None:
    cfg = _config(args)
    rows = []
    print("L      S_bar        stderr      calibrated eta")
    for L in cfg.depths:
        rep = probe_depth(cfg, L)
        rows.append((L, rep.S_bar))
        print(f"{L:<6d} {rep.S_bar:.5e}  {rep.S_bar_stderr:.3e}   {cfg.probe_eta / math.sqrt(rep.S_bar):.4g}")
    if len(rows) >= 2:
        x, y = np.log([r[0] for r in rows]), np.log([r[1] for r in rows])
        print(f"slope of log S_bar vs log L: {np.polyfit(x, y, 1)[0]:.3f}")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    record = run_experiment(cfg, workers=args.workers)
    print(f"{len(record.rows)} rows in {cfg.out}/runs.csv ({'complete' if record.complete else 'partial'})")


def _summary(args):
    cfg = _config(args)
    return cfg, load_record(cfg)


def cmd_fit(args) -> None:
    cfg, record = _summary(args)
    summary = summarize(record)
    if not summary.fits:
        raise RuntimeError("need eta* at two or more depths; run 'sweep' first")
    for kind, f in summary.fits.items():
        lo, hi = f.alpha_ci
        print(f"{kind}: alpha {f.alpha:.4f}  intercept {f.intercept:.4f}  R^2 {f.r2:.4f}  CI [{lo:.4f}, {hi:.4f}]")


def cmd_predict(args) -> None:
    cfg, record = _summary(args)
    summary = summarize(record)
    if not summary.segments:
        raise RuntimeError("no segment has measured anchors; set 'segments' and run 'sweep'")
    for anchors, preds in summary.segments:
        print(f"anchors {anchors}")
        for p in preds:
            err = "" if p.err_dex is None else f"  error {p.err_dex:+.3f} dex"
            print(f"  L={int(p.L)} predicted {p.eta_pred:.4g}{err}")


def cmd_axioms(args) -> None:
    rows = axioms(seed=args.seed or 0)
    for r in rows:
        print(f"{r.axiom}  {'PASS' if r.passed else 'FAIL'}  {r.claim}\n      witness: {r.witness}")
    if not all(r.passed for r in rows):
        raise RuntimeError("an axiom check failed")


def cmd_report(args) -> None:
    cfg, record = _summary(args)
    emit_report(record)
    print(f"wrote runs.csv, fit.csv, plotdata.txt, report.txt to {cfg.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amup", description="Depth and learning-rate laboratory for arithmetic-mean muP.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config, text in (
        ("probe", cmd_probe, True, "S_bar per depth and the closed-form calibrated rate"),
        ("sweep", cmd_sweep, True, "run (or resume) the learning-rate sweep"),
        ("fit", cmd_fit, True, "fit the depth law to the finished sweep"),
        ("predict", cmd_predict, True, "segmented zero-shot predictions"),
        ("axioms", cmd_axioms, False, "check the aggregator axiom table"),
        ("report", cmd_report, True, "write runs.csv, fit.csv, plotdata.txt and report.txt"),
    ):
        p = sub.add_parser(name, help=text, description=text)
        if needs_config:
            p.add_argument("config", help="experiment configuration file")
        else:
            p.add_argument("config", nargs="?", help="ignored; accepted for a uniform interface")
        p.add_argument("--seed", type=int, default=None, help="replace the config seed list with this seed")
        p.add_argument("--out", default=None, help="output directory (default: the config's out)")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=1, help="parallel training jobs")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 -- any failure of a job maps to exit 3
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
