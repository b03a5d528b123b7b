"""Learning-rate sweeps, AM-muP calibration and depth power-law fitting.

Two notions of the maximal-update learning rate are produced here:

* the sweep argmax ``eta*`` after a one-epoch budget (:func:`sweep`), and
* the calibrated rate solving ``S_bar(eta) = 1`` (:func:`calibrate_amup`).

Depth laws are fitted as ``log10 eta* = beta0 - alpha * log10 L``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from amup import rng
from amup.harness.data import Dataset, as_input
from amup.init import initialize
from amup.netcore import (
    ArchSpec,
    NonFiniteError,
    backward,
    forward,
    loss_value,
    sgd_step,
)
from amup.probes import PROBE_BATCH, probe

RULES = ("val_acc", "val_loss")
FIT_KINDS = ("OLS", "WLS")
DIVERGENCE_FACTOR = 10.0
TRANSFER_EXPONENT = 1.5

_INIT, _ORDER = 31, 32


class GridRangeWarning(UserWarning):
    """The selected learning rate sits on an end of the sweep grid."""


@dataclass(frozen=True)
class SweepGrid:
    count: int = 40
    lo: float = 1e-4
    hi: float = 1e1

    def __post_init__(self):
        if self.count < 1 or not 0 < self.lo < self.hi:
            raise ValueError("grid needs count >= 1 and 0 < lo < hi")

    @property
    def values(self) -> np.ndarray:
        if self.count == 1:
            return np.array([self.lo])
        return np.geomspace(self.lo, self.hi, self.count)

    @property
    def step_dex(self) -> float:
        return math.log10(self.hi / self.lo) / max(self.count - 1, 1)


@dataclass(frozen=True)
class SweepResult:
    etas: tuple[float, ...]
    metrics: tuple[float, ...]
    diverged: tuple[bool, ...]
    eta_star: float | None
    rule: str
    L: int
    seed: int
    wall_ms: tuple[float, ...] = ()

    @property
    def at_edge(self) -> bool:
        return self.eta_star is not None and self.eta_star in (self.etas[0], self.etas[-1])


def select_eta_star(etas: Sequence[float], metrics: Sequence[float], diverged: Sequence[bool]) -> float | None:
    """Argmax of the metric over non-diverged points; ties go to the smaller eta."""
    best, best_eta = -math.inf, None
    for eta, m, d in sorted(zip(etas, metrics, diverged)):
        if not d and math.isfinite(m) and m > best:
            best, best_eta = m, float(eta)
    return best_eta


def _evaluate(model, x: np.ndarray, y: np.ndarray, loss: str, chunk: int = 1024) -> tuple[float, float]:
    """Mean loss and accuracy (nan for regression) over a split."""
    total, correct = 0.0, 0
    for s in range(0, len(x), chunk):
        out = forward(model, x[s : s + chunk]).out
        yb = y[s : s + chunk]
        total += loss_value(out, yb, loss) * len(out)
        if loss == "ce":
            correct += int(np.sum(out.argmax(axis=1) == yb))
    acc = correct / len(x) if loss == "ce" else float("nan")
    return total / len(x), acc


def train_run(
    spec: ArchSpec,
    data: Dataset,
    eta: float,
    seed: int = 0,
    epochs: int = 1,
    batch: int = PROBE_BATCH,
) -> tuple[float, float, bool]:
    """Train a fresh model with plain SGD; returns ``(val_loss, val_acc, diverged)``.

    The initial weights and the sample order depend on ``seed`` only, so
    every learning rate of a sweep starts from the same point.
    """
    x_tr = as_input(data.x_train, spec.input_shape)
    x_va = as_input(data.x_val, spec.input_shape)
    model = initialize(spec, rng.derive(seed, _INIT))
    order = rng.stream(seed, _ORDER)
    # overflow on the way to divergence is expected; it is detected below
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(model, order, x_tr, x_va, data, eta, epochs, batch)


def _train(model, order, x_tr, x_va, data, eta, epochs, batch):
    try:
        init_loss, _ = _evaluate(model, x_va, data.y_val, data.loss)
        for _ in range(epochs):
            perm = order.permutation(len(x_tr))
            for s in range(0, len(perm) - batch + 1, batch):
                idx = perm[s : s + batch]
                trace = forward(model, x_tr[idx])
                model = sgd_step(model, backward(model, trace, data.y_train[idx], data.loss), eta)
        val_loss, val_acc = _evaluate(model, x_va, data.y_val, data.loss)
    except NonFiniteError:
        return float("nan"), float("nan"), True
    diverged = not math.isfinite(val_loss) or val_loss > DIVERGENCE_FACTOR * init_loss
    return val_loss, val_acc, diverged


def sweep(
    spec: ArchSpec,
    grid: SweepGrid,
    data: Dataset,
    seed: int = 0,
    rule: str = "val_acc",
    epochs: int = 1,
    batch: int = PROBE_BATCH,
) -> SweepResult:
    """One-epoch training at every grid point and the selected ``eta*``.

    ``rule`` is ``val_acc`` (validation accuracy) or ``val_loss`` (the
    negated validation loss). Emits :class:`GridRangeWarning` when ``eta*``
    lands on a grid end.
    """
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    if rule == "val_acc" and data.loss != "ce":
        raise ValueError("val_acc needs a classification task")
    metrics, flags, walls = [], [], []
    for eta in grid.values:
        t0 = time.perf_counter()
        vl, va, div = train_run(spec, data, float(eta), seed, epochs, batch)
        walls.append((time.perf_counter() - t0) * 1e3)
        metrics.append(va if rule == "val_acc" else -vl)
        flags.append(div)
    eta_star = select_eta_star(grid.values, metrics, flags)
    result = SweepResult(tuple(map(float, grid.values)), tuple(metrics), tuple(flags), eta_star, rule,
                         spec.depth, seed, tuple(walls))
    if result.at_edge:
        warnings.warn(f"eta* = {eta_star:g} sits on the grid edge at L={spec.depth}", GridRangeWarning)
    return result


# ---------------------------------------------------------------- calibration


def calibrate_amup(
    spec: ArchSpec,
    probe_eta: float = 1e-4,
    replicates: int = 64,
    seed: int = 0,
    batch: int = PROBE_BATCH,
    loss: str = "mse",
    sigma_y: float = 1.0,
    tol: float = 0.2,
    max_iter: int = 30,
    part: str = "full",
) -> float:
    """Learning rate with ``S_bar = 1``.

    The closed form ``probe_eta / sqrt(S_bar(probe_eta))`` assumes the
    leading quadratic dependence on ``eta``. If the re-probed ``S_bar`` is
    off by more than ``tol``, a bisection on ``log eta`` refines it. All
    probes share the same replicates, so ``S_bar(eta)`` is a deterministic
    function during the search. ``part="B"`` calibrates on the label-driven
    term alone (see :func:`amup.probes.probe`).
    """

    def s_bar(eta: float) -> float:
        rep = probe(spec, eta, replicates, seed, batch, loss, sigma_y, part)
        return rep.S_bar if rep.diverged == 0 else math.inf

    s0 = s_bar(probe_eta)
    if not math.isfinite(s0):
        raise ValueError("probe_eta diverged; choose a smaller probe learning rate")
    if s0 <= 0:
        raise ValueError("S_bar is zero at probe_eta; inputs or labels are degenerate")
    eta = probe_eta / math.sqrt(s0)
    s = s_bar(eta)
    if abs(s - 1.0) <= tol:
        return eta
    lo, hi = (eta, eta * 2) if s < 1 else (eta / 2, eta)
    for _ in range(max_iter):
        s_lo, s_hi = s_bar(lo), s_bar(hi)
        if s_lo <= 1 <= s_hi:
            break
        lo, hi = (hi, hi * 2) if s_hi < 1 else (lo / 2, lo)
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        s = s_bar(mid)
        if abs(s - 1.0) <= tol:
            return mid
        lo, hi = (mid, hi) if s < 1 else (lo, mid)
    return math.sqrt(lo * hi)


# ------------------------------------------------------------------- fitting


@dataclass(frozen=True)
class PowerLawFit:
    """``log10 eta* = intercept - alpha * log10 L`` with a t-based 95% band."""

    alpha: float
    intercept: float
    r2: float
    weights: tuple[float, ...]
    kind: str
    n: int
    cov: tuple[tuple[float, float], tuple[float, float]]  # of (intercept, slope)
    t_crit: float
    sigma2: float
    degenerate: bool = False
    level: float = 0.95

    @property
    def slope(self) -> float:
        return -self.alpha

    @property
    def alpha_ci(self) -> tuple[float, float]:
        if self.degenerate:
            return float("nan"), float("nan")
        half = self.t_crit * math.sqrt(self.cov[1][1])
        return self.alpha - half, self.alpha + half

    def predict(self, log10_L):
        return self.intercept - self.alpha * np.asarray(log10_L, dtype=float)

    def band(self, log10_L) -> tuple[np.ndarray, np.ndarray]:
        """Confidence band of the regression line at ``log10_L``."""
        x = np.atleast_1d(np.asarray(log10_L, dtype=float))
        y = self.predict(x)
        if self.degenerate:
            return y.copy(), y.copy()
        c = np.asarray(self.cov)
        var = c[0, 0] + 2 * x * c[0, 1] + x * x * c[1, 1]
        half = self.t_crit * np.sqrt(np.maximum(var, 0.0))
        return y - half, y + half


def fit_power_law(points: Sequence[tuple[float, float, float | None]], kind: str = "WLS",
                  level: float = 0.95) -> PowerLawFit:
    """Least-squares line through ``(log10 L, log10 eta*)``.

    ``points`` holds ``(L, log10 eta*, variance)``; WLS weights are
    ``1 / variance``. Two points give an exact line whose band is flagged
    as degenerate.
    """
    if kind not in FIT_KINDS:
        raise ValueError(f"kind must be one of {FIT_KINDS}")
    L = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    if len(set(L.tolist())) < 2:
        raise ValueError("need at least 2 distinct depths")
    if np.any(L <= 0):
        raise ValueError("depths must be positive")
    if kind == "WLS":
        var = np.array([np.nan if p[2] is None else p[2] for p in points], dtype=float)
        if not np.all(var > 0):
            raise ValueError("WLS needs strictly positive variances")
        w = 1.0 / var
    else:
        w = np.ones_like(y)
    x = np.log10(L)
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    A = XtW @ X
    beta = np.linalg.solve(A, XtW @ y)
    resid = y - X @ beta
    ybar = np.sum(w * y) / np.sum(w)
    ss_res = float(np.sum(w * resid**2))
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    if ss_tot > 0:
        r2 = min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    else:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    n = len(y)
    dof = n - 2
    degenerate = dof < 1
    sigma2 = ss_res / dof if not degenerate else 0.0
    cov = np.linalg.inv(A) * sigma2
    t_crit = float(stats.t.ppf(0.5 + level / 2, dof)) if not degenerate else float("nan")
    return PowerLawFit(
        alpha=float(-beta[1]),
        intercept=float(beta[0]),
        r2=float(r2),
        weights=tuple(map(float, w)),
        kind=kind,
        n=n,
        cov=((float(cov[0, 0]), float(cov[0, 1])), (float(cov[1, 0]), float(cov[1, 1]))),
        t_crit=t_crit,
        sigma2=float(sigma2),
        degenerate=degenerate,
        level=level,
    )


def depth_points(eta_stars: dict[int, Sequence[float]], grid_step_dex: float = 0.0):
    """``(L, mean log10 eta*, variance of the mean)`` per depth.

    Each seed's ``eta*`` is a grid member, so its log has an extra
    quantisation variance of ``step**2 / 12``; adding it keeps the WLS
    weights finite when all seeds pick the same grid point.
    """
    out = []
    for L in sorted(eta_stars):
        logs = np.log10(np.asarray(eta_stars[L], dtype=float))
        k = len(logs)
        var = float(np.var(logs, ddof=1)) if k > 1 else 0.0
        var += grid_step_dex**2 / 12.0
        out.append((int(L), float(np.mean(logs)), var / k))
    return out


# --------------------------------------------------------- prediction/transfer


def transfer(eta_star_L0: float, L0: float, L: float, exponent: float = TRANSFER_EXPONENT) -> float:
    """``eta*(L) = eta*(L0) * (L / L0) ** -exponent``."""
    if eta_star_L0 <= 0 or L0 <= 0 or L <= 0:
        raise ValueError("transfer needs positive inputs")
    return eta_star_L0 * (L / L0) ** (-exponent)


@dataclass(frozen=True)
class Prediction:
    L: float
    eta_pred: float
    err_dex: float | None = None  # log10(pred) - log10(measured)


def segmented_predict(
    anchors: Sequence[tuple[float, float]],
    targets: Sequence[float],
    measured: dict[float, float] | None = None,
) -> list[Prediction]:
    """Fit a log-log line through the anchors and extrapolate to ``targets``."""
    if len(anchors) < 2:
        raise ValueError("need at least 2 anchors")
    Ls = [a[0] for a in anchors]
    if len(set(Ls)) != len(Ls):
        raise ValueError("anchors must sit at distinct depths")
    fit = fit_power_law([(L, math.log10(e), None) for L, e in anchors], "OLS")
    out = []
    for L in targets:
        pred = 10 ** float(fit.predict(math.log10(L)))
        err = None
        if measured is not None and L in measured:
            err = math.log10(pred) - math.log10(measured[L])
        out.append(Prediction(float(L), pred, err))
    return out


def plot_lines(points, fit: PowerLawFit, samples: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Point table ``(log10 L, log10 eta*)`` and line table ``(log10 L, fit, lo, hi)``."""
    pts = np.array([(math.log10(p[0]), p[1]) for p in points])
    x = np.linspace(pts[:, 0].min(), pts[:, 0].max(), samples)
    lo, hi = fit.band(x)
    return pts, np.column_stack([x, fit.predict(x), lo, hi])
