"""Experiment execution with append-only, resumable CSV persistence.

Each job is one ``(L, eta, seed)`` training run. Completed rows are
appended and flushed to ``runs.csv`` as they finish, so a killed run keeps
its finished work; running again with the same configuration skips those
rows. A copy of the configuration (``config.txt``) guards against resuming
into a directory that belongs to a different experiment.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from amup import __version__
from amup.harness.config import ConfigError, ExperimentConfig, parse_config
from amup.harness.data import make_dataset
from amup.probes import probe
from amup.scaling import train_run

RUNS_HEADER = ("L", "eta", "seed", "metric", "diverged", "sbar", "wall_ms")
PROBES_HEADER = ("L", "layer", "statistic", "value", "stderr")


@dataclass(frozen=True)
class Row:
    L: int
    eta: float
    seed: int
    metric: float
    diverged: bool
    sbar: float
    wall_ms: float

    @property
    def key(self) -> tuple[int, str, int]:
        return self.L, _num(self.eta), self.seed

    def cells(self) -> list[str]:
        return [str(self.L), _num(self.eta), str(self.seed), _num(self.metric), str(int(self.diverged)),
                _num(self.sbar), f"{self.wall_ms:.1f}"]


@dataclass
class RunRecord:
    config: ExperimentConfig
    config_hash: str
    version: str
    rows: list[Row] = field(default_factory=list)
    probe_rows: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    complete: bool = False

    def sorted_rows(self) -> list[Row]:
        return sorted(self.rows, key=lambda r: (r.L, r.eta, r.seed))


def _num(x: float) -> str:
    return repr(float(x))


def version_string() -> str:
    return f"amup-{__version__}"


# ---------------------------------------------------------------- persistence


def _read_complete_lines(path: str) -> list[str]:
    """Lines of ``path`` that were fully written; a torn last line is dropped."""
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    return lines[:-1]  # the element after the final newline is empty or torn


def _rewrite(path: str, header, lines: list[str]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for line in lines:
            fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _load_rows(path: str) -> list[Row]:
    lines = _read_complete_lines(path)
    if not lines:
        return []
    if tuple(lines[0].split(",")) != RUNS_HEADER:
        raise ConfigError(f"{path} has an unexpected header")
    rows = []
    for rec in csv.reader(lines[1:]):
        if len(rec) != len(RUNS_HEADER):
            continue
        rows.append(Row(int(rec[0]), float(rec[1]), int(rec[2]), float(rec[3]), rec[4] == "1",
                        float(rec[5]), float(rec[6])))
    return rows


def _load_probe_rows(path: str) -> list[dict]:
    lines = _read_complete_lines(path)
    out = []
    for rec in csv.reader(lines[1:]):
        if len(rec) == len(PROBES_HEADER):
            out.append({"L": int(rec[0]), "layer": int(rec[1]), "statistic": rec[2],
                        "value": float(rec[3]), "stderr": float(rec[4])})
    return out


class _Appender:
    def __init__(self, path: str, header):
        self.path = path
        if not os.path.exists(path):
            _rewrite(path, header, [])
        self.fh = open(path, "a", encoding="utf-8", newline="")

    def write(self, cells: list[str]) -> None:
        self.fh.write(",".join(cells) + "\n")
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self) -> None:
        self.fh.close()


def prepare_output(cfg: ExperimentConfig, out: str) -> None:
    """Create ``out`` and pin the configuration, or check it matches a pinned one."""
    os.makedirs(out, exist_ok=True)
    pinned = os.path.join(out, "config.txt")
    if os.path.exists(pinned):
        with open(pinned, encoding="utf-8") as fh:
            old = parse_config(fh.read())
        if old.hash() != cfg.hash():
            raise ConfigError(f"{out} holds results of a different configuration")
    else:
        with open(pinned, "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
    # drop a torn trailing line left by an interrupted writer
    for name, header in (("runs.csv", RUNS_HEADER), ("probes.csv", PROBES_HEADER)):
        path = os.path.join(out, name)
        lines = _read_complete_lines(path)
        if lines:
            _rewrite(path, header, lines[1:])


# ------------------------------------------------------------------ execution


def _job(args):
    spec, data, eta, seed, epochs, batch, rule = args
    t0 = time.perf_counter()
    val_loss, val_acc, diverged = train_run(spec, data, eta, seed, epochs, batch)
    metric = val_acc if rule == "val_acc" else -val_loss
    return metric, diverged, (time.perf_counter() - t0) * 1e3


def probe_depth(cfg: ExperimentConfig, L: int, out_dim: int = 10):
    """Probe report for depth ``L`` at the configured probe learning rate."""
    return probe(cfg.spec_for(L, out_dim), cfg.probe_eta, cfg.replicates, cfg.seeds[0],
                 cfg.probe_batch, "mse", cfg.sigma_y)


def run_experiment(
    cfg: ExperimentConfig,
    out: str | None = None,
    workers: int = 1,
    stop_after: int | None = None,
) -> RunRecord:
    """Run every missing ``(L, eta, seed)`` job of ``cfg`` and persist it under ``out``.

    ``stop_after`` limits how many new jobs run in this call, which is how
    interruption is exercised in tests; a later call resumes the remainder.
    """
    out = out or cfg.out
    prepare_output(cfg, out)
    runs_path = os.path.join(out, "runs.csv")
    probes_path = os.path.join(out, "probes.csv")
    record = RunRecord(cfg, cfg.hash(), version_string())
    record.rows = _load_rows(runs_path)
    record.probe_rows = _load_probe_rows(probes_path)
    done = {r.key for r in record.rows}
    probed = {p["L"] for p in record.probe_rows if p["statistic"] == "S_bar"}

    data = make_dataset(cfg.task, cfg.seeds[0], path=cfg.data_path or None)
    budget = math.inf if stop_after is None else stop_after
    runs = _Appender(runs_path, RUNS_HEADER)
    probes = _Appender(probes_path, PROBES_HEADER)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for L in cfg.depths:
            spec = cfg.spec_for(L, data.n_classes)
            if L not in probed:
                if budget <= 0:
                    break
                rep = probe_depth(cfg, L, data.n_classes)
                for row in rep.rows():
                    cells = [str(L), str(row["layer"]), row["statistic"], _num(row["value"]), _num(row["stderr"])]
                    probes.write(cells)
                    record.probe_rows.append({"L": L, "layer": row["layer"], "statistic": row["statistic"],
                                              "value": float(cells[3]), "stderr": float(cells[4])})
                budget -= 1
            sbar = next(p["value"] for p in record.probe_rows if p["L"] == L and p["statistic"] == "S_bar")
            todo = []
            for seed in cfg.seeds:
                for eta in cfg.grid.values:
                    if (L, _num(eta), seed) not in done and len(todo) < budget:
                        todo.append((float(eta), seed))
            args = [(spec, data, eta, seed, cfg.epochs, cfg.batch, cfg.rule) for eta, seed in todo]
            results = pool.map(_job, args) if pool else map(_job, args)
            for (eta, seed), res in zip(todo, results):
                metric, diverged, wall = res
                row = Row(L, eta, seed, metric, diverged, sbar * (eta / cfg.probe_eta) ** 2, wall)
                runs.write(row.cells())
                record.rows.append(row)
                done.add(row.key)
                budget -= 1
            if budget <= 0:
                break
    finally:
        runs.close()
        probes.close()
        if pool:
            pool.shutdown()
    expected = len(cfg.depths) * len(cfg.seeds) * cfg.grid_count
    record.complete = len(done) >= expected and set(cfg.depths) <= {p["L"] for p in record.probe_rows}
    return record


def load_record(cfg: ExperimentConfig, out: str | None = None) -> RunRecord:
    """Rebuild a record from an output directory without running anything."""
    out = out or cfg.out
    prepare_output(cfg, out)
    record = RunRecord(cfg, cfg.hash(), version_string())
    record.rows = _load_rows(os.path.join(out, "runs.csv"))
    record.probe_rows = _load_probe_rows(os.path.join(out, "probes.csv"))
    keys = {r.key for r in record.rows}
    record.complete = len(keys) >= len(cfg.depths) * len(cfg.seeds) * cfg.grid_count
    return record


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seeds=(int(seed),))
