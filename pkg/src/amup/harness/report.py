"""Summaries and report files for a finished (or partial) run."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

from amup.harness.runner import RUNS_HEADER, RunRecord, _rewrite
from amup.scaling import (
    PowerLawFit,
    Prediction,
    depth_points,
    fit_power_law,
    plot_lines,
    segmented_predict,
    select_eta_star,
)

FIT_HEADER = ("fit_kind", "alpha", "intercept", "r2", "alpha_ci_lo", "alpha_ci_hi")


@dataclass
class Summary:
    eta_stars: dict[int, dict[int, float]]
    points: list[tuple[int, float, float]]
    fits: dict[str, PowerLawFit] = field(default_factory=dict)
    segments: list[tuple[tuple[int, ...], list[Prediction]]] = field(default_factory=list)
    calibrated: dict[int, float] = field(default_factory=dict)


def eta_stars(record: RunRecord) -> dict[int, dict[int, float]]:
    """Selected ``eta*`` per depth and seed (missing when every point diverged)."""
    groups: dict[tuple[int, int], list] = {}
    for r in record.rows:
        groups.setdefault((r.L, r.seed), []).append(r)
    out: dict[int, dict[int, float]] = {}
    for (L, seed), rows in sorted(groups.items()):
        star = select_eta_star([r.eta for r in rows], [r.metric for r in rows], [r.diverged for r in rows])
        if star is not None:
            out.setdefault(L, {})[seed] = star
    return out


def summarize(record: RunRecord) -> Summary:
    cfg = record.config
    stars = eta_stars(record)
    points = depth_points({L: list(v.values()) for L, v in stars.items()}, cfg.grid.step_dex)
    summary = Summary(stars, points)
    if len(points) >= 2:
        summary.fits["WLS"] = fit_power_law(points, "WLS")
        summary.fits["OLS"] = fit_power_law(points, "OLS")
    means = {L: 10**m for L, m, _ in points}
    for anchors, targets in cfg.segments:
        if all(a in means for a in anchors):
            preds = segmented_predict([(a, means[a]) for a in anchors], targets, means)
            summary.segments.append((anchors, preds))
    for p in record.probe_rows:
        if p["statistic"] == "S_bar" and p["value"] > 0:
            summary.calibrated[p["L"]] = cfg.probe_eta / math.sqrt(p["value"])
    return summary


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(record: RunRecord, out: str | None = None) -> Summary:
    """Write ``runs.csv`` (sorted), ``fit.csv``, ``plotdata.txt`` and ``report.txt``."""
    cfg = record.config
    out = out or cfg.out
    summary = summarize(record)
    fit = summary.fits.get(cfg.fit_kind)
    if fit is None:
        raise ValueError("the record has no completed fit (need eta* at two or more depths)")
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")

    _rewrite(os.path.join(out, "runs.csv"), RUNS_HEADER, [",".join(r.cells()) for r in record.sorted_rows()])

    lines = []
    for kind in ("WLS", "OLS"):
        f = summary.fits[kind]
        lo, hi = f.alpha_ci
        lines.append(",".join([kind, _fmt(f.alpha), _fmt(f.intercept), _fmt(f.r2), _fmt(lo), _fmt(hi)]))
    _rewrite(os.path.join(out, "fit.csv"), FIT_HEADER, lines)

    pts, curve = plot_lines(summary.points, fit)
    with open(os.path.join(out, "plotdata.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# block 1: measured points\n# log10_L log10_eta_star\n")
        for x, y in pts:
            fh.write(f"{x:.10g} {y:.10g}\n")
        fh.write(f"\n\n# block 2: {fit.kind} fit and {int(fit.level * 100)}% band\n")
        fh.write("# log10_L log10_eta_fit log10_eta_lo log10_eta_hi\n")
        for row in curve:
            fh.write(" ".join(f"{v:.10g}" for v in row) + "\n")

    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_text(record, summary))
    return summary


def render_text(record: RunRecord, summary: Summary) -> str:
    cfg = record.config
    out = [
        f"version      {record.version}",
        f"config hash  {record.config_hash}",
        f"family       {cfg.family}  width {cfg.width}  rule {cfg.rule}",
        f"complete     {'yes' if record.complete else 'no (partial run)'}",
        "",
        "depth  eta* per seed                          mean log10 eta*   S_bar = 1 eta (closed form)",
    ]
    for L, mean, var in summary.points:
        seeds = " ".join(f"{s}:{e:.3g}" for s, e in sorted(summary.eta_stars[L].items()))
        cal = summary.calibrated.get(L)
        out.append(f"{L:5d}  {seeds:38s} {mean:8.3f} +- {math.sqrt(var):.3f}   "
                   + (f"{cal:.3g}" if cal else "-"))
    out.append("")
    for kind, f in summary.fits.items():
        lo, hi = f.alpha_ci
        flag = "  (two depths: band degenerate)" if f.degenerate else ""
        out.append(f"{kind}: slope {f.slope:.4f} (alpha {f.alpha:.4f}), intercept {f.intercept:.4f}, "
                   f"R^2 {f.r2:.4f}, alpha {int(f.level * 100)}% CI [{lo:.4f}, {hi:.4f}]{flag}")
    for anchors, preds in summary.segments:
        out.append("")
        out.append(f"segment anchored at L = {', '.join(map(str, anchors))}")
        errs = []
        for p in preds:
            err = "" if p.err_dex is None else f"  error {p.err_dex:+.3f} dex"
            if p.err_dex is not None:
                errs.append(abs(p.err_dex))
            out.append(f"  L={int(p.L):3d} predicted eta* {p.eta_pred:.4g}{err}")
        if errs:
            out.append(f"  max |error| {max(errs):.3f} dex")
    return "\n".join(out) + "\n"
