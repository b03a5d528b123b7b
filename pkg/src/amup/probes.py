"""Monte-Carlo probes of one-step update moments and directional statistics.

A *replicate* is a fresh weight draw plus a fresh probe batch. Inputs are
i.i.d. standard normal; MSE targets are i.i.d. ``N(0, sigma_y^2)`` and CE
targets are uniform class labels. Replicate ``r`` of an experiment seeded by
``seed`` always sees the same weights and data, so every estimate here is a
deterministic function of its arguments.

Reductions over replicates use ``math.fsum`` so results do not depend on the
order in which replicate values arrive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from amup import rng
from amup.init import initialize
from amup.netcore import (
    ArchSpec,
    ForwardTrace,
    Model,
    NonFiniteError,
    activate_prime,
    backward,
    coverage_count,
    forward,
    jvp,
    linear,
    sgd_step,
)

PROBE_BATCH = 128
PARTS = ("full", "A", "B")

_WEIGHTS, _DATA, _DIRECTION = 11, 12, 13


# ------------------------------------------------------------------ plumbing


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def _mean_stderr(values) -> tuple[float, float]:
    """Mean and ``sd / sqrt(n)`` (sample sd, ``ddof=1``); stderr is nan for n < 2."""
    values = [float(v) for v in values]
    n = len(values)
    m = math.fsum(values) / n
    if n < 2:
        return m, float("nan")
    var = math.fsum((v - m) ** 2 for v in values) / (n - 1)
    return m, math.sqrt(var / n)


def replicate_model(spec: ArchSpec, seed: int, r: int) -> Model:
    return initialize(spec, rng.derive(seed, _WEIGHTS, r))


def probe_batch(
    spec: ArchSpec,
    seed: int,
    r: int,
    batch: int = PROBE_BATCH,
    loss: str = "mse",
    sigma_y: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and targets for replicate ``r``."""
    g = rng.stream(seed, _DATA, r)
    x = rng.normal(g, (batch, *spec.input_shape))
    if loss == "mse":
        y = rng.normal(g, (batch, spec.out_dim), sigma_y)
    elif loss == "ce":
        y = g.integers(0, spec.out_dim, size=batch)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return x, y


# ------------------------------------------------------------- update moments


def one_step_delta(
    model: Model,
    data: np.ndarray,
    targets: np.ndarray,
    eta: float,
    loss: str = "mse",
) -> list[np.ndarray]:
    """Per-unit change of the pre-activations after one SGD step on ``data``.

    Raises :class:`NonFiniteError` when the step or the re-evaluation
    produces non-finite values.
    """
    trace = forward(model, data)
    stepped = sgd_step(model, backward(model, trace, targets, loss), eta)
    after = forward(stepped, data)
    deltas = [b - a for a, b in zip(trace.z, after.z)]
    for unit, d in enumerate(deltas, start=1):
        if not np.all(np.isfinite(d)):
            raise NonFiniteError("non-finite pre-activation change", unit)
    return deltas


@dataclass(frozen=True)
class ProbeReport:
    """Per-unit second moments ``S_l`` and their arithmetic mean ``S_bar``."""

    S: tuple[float, ...]
    S_bar: float
    replicates: int
    stderr: tuple[float, ...]
    eta: float
    fingerprint: str
    seed: int
    S_bar_stderr: float = float("nan")
    diverged: int = 0
    part: str = "full"

    @property
    def divergence_rate(self) -> float:
        total = self.replicates + self.diverged
        return self.diverged / total if total else 0.0

    def rows(self) -> list[dict]:
        """One record per (layer, statistic) for tabular output."""
        out = [
            {"layer": l, "statistic": "S", "value": s, "stderr": e}
            for l, (s, e) in enumerate(zip(self.S, self.stderr), start=1)
        ]
        out.append({"layer": 0, "statistic": "S_bar", "value": self.S_bar, "stderr": self.S_bar_stderr})
        return out


def second_moments(
    samples: Sequence[Sequence[float] | None],
    eta: float = float("nan"),
    fingerprint: str = "",
    seed: int = 0,
    part: str = "full",
) -> ProbeReport:
    """Reduce per-replicate per-unit mean squared deltas to a :class:`ProbeReport`.

    ``None`` entries mark diverged replicates: they are counted but excluded
    from the moments. ``S_bar`` is the arithmetic mean of the per-unit means,
    and its stderr comes from the per-replicate layer averages.
    """
    kept = [list(map(float, s)) for s in samples if s is not None]
    diverged = len(samples) - len(kept)
    if len(kept) < 2:
        raise ValueError("need at least 2 finite replicates")
    depth = len(kept[0])
    if any(len(s) != depth for s in kept):
        raise ValueError("replicates disagree on depth")
    per_layer = [_mean_stderr(s[l] for s in kept) for l in range(depth)]
    S = tuple(m for m, _ in per_layer)
    s_bar = math.fsum(S) / depth
    _, s_bar_err = _mean_stderr(math.fsum(s) / depth for s in kept)
    return ProbeReport(
        S=S,
        S_bar=s_bar,
        replicates=len(kept),
        stderr=tuple(e for _, e in per_layer),
        eta=float(eta),
        fingerprint=fingerprint,
        seed=int(seed),
        S_bar_stderr=s_bar_err,
        diverged=diverged,
        part=part,
    )


def _part_targets(out: np.ndarray, y: np.ndarray, part: str) -> np.ndarray:
    # MSE residual is out - y. "A" keeps only the network output, "B" only -y.
    if part == "full":
        return y
    if part == "A":
        return np.zeros_like(out)
    return y + out


def replicate_moments(
    spec: ArchSpec,
    eta: float,
    r: int,
    seed: int = 0,
    batch: int = PROBE_BATCH,
    loss: str = "mse",
    sigma_y: float = 1.0,
    part: str = "full",
) -> list[float] | None:
    """Per-unit mean of ``dz**2`` for one replicate, or ``None`` if it diverged."""
    model = replicate_model(spec, seed, r)
    x, y = probe_batch(spec, seed, r, batch, loss, sigma_y)
    if part != "full":
        y = _part_targets(forward(model, x).out, y, part)
    try:
        deltas = one_step_delta(model, x, y, eta, loss)
    except NonFiniteError:
        return None
    return [float(np.mean(d * d)) for d in deltas]


def probe(
    spec: ArchSpec,
    eta: float,
    replicates: int = 64,
    seed: int = 0,
    batch: int = PROBE_BATCH,
    loss: str = "mse",
    sigma_y: float = 1.0,
    part: str = "full",
) -> ProbeReport:
    """Monte-Carlo estimate of ``S_l`` and ``S_bar`` at learning rate ``eta``.

    ``part`` splits the MSE label model into the term driven by the network's
    own output at init (``"A"``) and the term driven by the labels (``"B"``);
    to first order in ``eta`` the full update is their sum.
    """
    if part not in PARTS:
        raise ValueError(f"part must be one of {PARTS}")
    if part != "full" and loss != "mse":
        raise ValueError("the A/B split is defined for the MSE loss only")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    samples = [
        replicate_moments(spec, eta, r, seed, batch, loss, sigma_y, part) for r in range(replicates)
    ]
    return second_moments(samples, eta, spec.fingerprint(), seed, part)


# ------------------------------------------------------- directional statistic


@dataclass(frozen=True)
class TStatSample:
    h: int
    value: float
    structural_zero: bool = False  # a direction only touches layers above h


def tensor_units(spec: ArchSpec) -> list[int]:
    """Depth unit of every weight tensor (0 for a ResNet stem, L+1 for the head)."""
    return [layer.unit for layer in spec.layers()]


def direction(model: Model, tensor: int, seed: int = 0, key: int = 0) -> list[np.ndarray | None]:
    """Unit-norm Gaussian direction supported on one weight tensor."""
    params = model.params
    if not 0 <= tensor < len(params):
        raise IndexError("tensor index out of range")
    d = rng.normal(rng.stream(seed, _DIRECTION, tensor, key), params[tensor].shape)
    d /= np.linalg.norm(d)
    tangent: list[np.ndarray | None] = [None] * len(params)
    tangent[tensor] = d
    return tangent


def basis_direction(model: Model, tensor: int, index: tuple[int, ...]) -> list[np.ndarray | None]:
    """Coordinate direction for a single scalar weight."""
    tangent: list[np.ndarray | None] = [None] * len(model.params)
    e = np.zeros_like(model.params[tensor])
    e[index] = 1.0
    tangent[tensor] = e
    return tangent


def _lowest_unit(spec: ArchSpec, tangent) -> int:
    units = tensor_units(spec)
    touched = [units[i] for i, t in enumerate(tangent) if t is not None and np.any(t)]
    return min(touched) if touched else spec.depth + 2


def t_statistic(
    model: Model,
    trace: ForwardTrace,
    mu1,
    mu2,
    h: int,
    dz: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
) -> TStatSample:
    """Channel-position average of ``d_mu1 z_h * d_mu2 z_h``, also averaged over the batch.

    ``mu1``/``mu2`` are tangents aligned with ``model.params``. Precomputed
    JVP outputs can be passed as ``dz`` to avoid repeating the forward-mode
    pass when many layers are read from the same pair.
    """
    spec = model.spec
    if not 1 <= h <= spec.depth:
        raise ValueError(f"h must lie in 1..{spec.depth}")
    if dz is None:
        dz1 = jvp(model, trace, mu1)[0]
        dz2 = dz1 if mu2 is mu1 else jvp(model, trace, mu2)[0]
    else:
        dz1, dz2 = dz
    zero = max(_lowest_unit(spec, mu1), _lowest_unit(spec, mu2)) > h
    return TStatSample(h, float(np.mean(dz1[h - 1] * dz2[h - 1])), zero)


def _stem_derivative(model: Model, trace: ForwardTrace, tangent) -> np.ndarray:
    layer = model.spec.layers()[0]
    t = tangent[0]
    if t is None:
        return np.zeros_like(trace.z0)
    return linear(layer, t, trace.x, model.spec.padding == "circular")


def _conditional_t(model: Model, trace: ForwardTrace, dz1, dz2, h: int) -> float:
    """``E[T_h | layers below h]``: the weights of unit ``h`` integrated out.

    Valid for chain families when neither direction touches unit ``h``.
    """
    spec = model.spec
    layer = spec.layers()[h - 1]
    var = model.policies[h - 1].variance
    gate = activate_prime(trace.z[h - 2], spec.activation)
    prod = np.sum((gate * dz1[h - 2]) * (gate * dz2[h - 2]), axis=-1)
    if layer.kind == "conv":
        cov = coverage_count(spec, h)
        return float(var * np.mean(prod * cov))
    return float(var * np.mean(prod))


def t_profile(
    spec: ArchSpec,
    replicates: int,
    seed: int = 0,
    batch: int = 8,
    tensors: tuple[int, int] = (0, 0),
    same_direction: bool = True,
    conditional: bool = False,
) -> np.ndarray:
    """``T_l`` for every unit and replicate, shape ``(R, L)`` (``(R, L+1)`` for ResNets).

    Directions are drawn once and held fixed across replicates. For ResNets
    column 0 is the stem output. With ``conditional`` the entries for units
    ``l >= 2`` are replaced by ``E[T_l | layers below l]`` (chain families).
    """
    if conditional and spec.family == "resnet":
        raise ValueError("conditional estimator is implemented for chain families only")
    base = replicate_model(spec, seed, 0)
    mu1 = direction(base, tensors[0], seed, 1)
    mu2 = mu1 if same_direction and tensors[0] == tensors[1] else direction(base, tensors[1], seed, 2)
    rows = []
    for r in range(replicates):
        model = replicate_model(spec, seed, r)
        x, _ = probe_batch(spec, seed, r, batch)
        trace = forward(model, x)
        dz1 = jvp(model, trace, mu1)[0]
        dz2 = dz1 if mu2 is mu1 else jvp(model, trace, mu2)[0]
        row = [float(np.mean(a * b)) for a, b in zip(dz1, dz2)]
        if conditional:
            row = row[:1] + [_conditional_t(model, trace, dz1, dz2, h) for h in range(2, spec.depth + 1)]
        if spec.family == "resnet":
            s1 = _stem_derivative(model, trace, mu1)
            s2 = s1 if mu2 is mu1 else _stem_derivative(model, trace, mu2)
            row = [float(np.mean(s1 * s2))] + row
        rows.append(row)
    return np.asarray(rows)


class Gap(NamedTuple):
    gap: float
    stderr: float
    t_prev: float
    t_h: float


def invariance_gap(
    spec: ArchSpec,
    h: int,
    replicates: int = 256,
    seed: int = 0,
    batch: int = 8,
    conditional: bool = False,
    same_direction: bool = True,
    profile: np.ndarray | None = None,
) -> Gap:
    """Estimate ``E[T_h] - E[T_{h-1}]`` with both directions in the first layer.

    The difference is taken within each replicate (same weights and data),
    which cancels most of the shared noise. A precomputed :func:`t_profile`
    can be supplied to read several ``h`` from one set of replicates.
    """
    if replicates < 16:
        raise ValueError("invariance_gap needs at least 16 replicates")
    if spec.family == "resnet":
        raise ValueError("use resnet_ratio for residual networks")
    if not 2 <= h <= spec.depth:
        raise ValueError(f"h must lie in 2..{spec.depth}")
    if profile is None:
        profile = t_profile(spec, replicates, seed, batch, same_direction=same_direction, conditional=conditional)
    diff = profile[:, h - 1] - profile[:, h - 2]
    gap, err = _mean_stderr(diff)
    return Gap(gap, err, _mean(profile[:, h - 2]), _mean(profile[:, h - 1]))


# ------------------------------------------------------------ overlap structure


def min_overlap_check(ell: int) -> tuple[np.ndarray, int]:
    """Matrix ``M[h1-1, h2-1] = min(h1, h2)`` and its exact integer sum."""
    if ell < 1:
        raise ValueError("ell must be >= 1")
    idx = np.arange(1, ell + 1)
    mat = np.minimum.outer(idx, idx)
    total = int(mat.sum(dtype=np.int64))
    if total != ell * (ell + 1) * (2 * ell + 1) // 6:
        raise ArithmeticError("overlap sum disagrees with the closed form")
    return mat, total


def empirical_min_structure(
    spec: ArchSpec,
    h1: int,
    h2: int,
    replicates: int = 256,
    seed: int = 0,
    batch: int = 8,
) -> tuple[float, float]:
    """Monte-Carlo ``E[T_L^2]`` (and stderr) at the top unit ``L`` of ``spec``.

    ``h1``/``h2`` count layers downward from the probed unit: ``h = 1`` is
    unit ``L`` itself and ``h = L`` is the first layer. Each replicate uses
    fresh random unit directions inside the two layers.
    """
    L = spec.depth
    if spec.family == "resnet":
        raise ValueError("min structure is probed on chain families")
    if not (1 <= h1 <= L and 1 <= h2 <= L):
        raise ValueError(f"h1, h2 must lie in 1..{L}")
    if replicates < 16:
        raise ValueError("need at least 16 replicates")
    t1, t2 = L - h1, L - h2
    values = []
    for r in range(replicates):
        model = replicate_model(spec, seed, r)
        x, _ = probe_batch(spec, seed, r, batch)
        trace = forward(model, x)
        mu1 = direction(model, t1, rng.derive(seed, r), 1)
        mu2 = direction(model, t2, rng.derive(seed, r), 2)
        values.append(t_statistic(model, trace, mu1, mu2, L).value ** 2)
    return _mean_stderr(values)


# ------------------------------------------------------------------- residual


def resnet_ratio(
    spec: ArchSpec,
    h: int,
    replicates: int = 256,
    seed: int = 0,
    batch: int = 8,
    profile: np.ndarray | None = None,
) -> tuple[float, float]:
    """``E[T_h] / E[T_{h-1}]`` for a ResNet, directions in the stem.

    ``h`` runs over blocks ``1..K`` with ``T_0`` the stem output. The stderr
    uses the delta method on the paired replicate values.
    """
    if spec.family != "resnet":
        raise ValueError("resnet_ratio needs a resnet spec")
    if not 1 <= h <= spec.depth:
        raise ValueError(f"h must lie in 1..{spec.depth}")
    if profile is None:
        profile = t_profile(spec, replicates, seed, batch)
    return _ratio(profile[:, h], profile[:, h - 1])


def resnet_cumulative(spec: ArchSpec, replicates: int = 256, seed: int = 0, batch: int = 8,
                      profile: np.ndarray | None = None) -> tuple[float, float]:
    """``E[T_K] / E[T_0]`` across all ``K`` blocks."""
    if profile is None:
        profile = t_profile(spec, replicates, seed, batch)
    return _ratio(profile[:, -1], profile[:, 0])


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    b, b_err = _mean_stderr(den)
    if not abs(b) > 3 * b_err:
        raise ValueError("denominator is statistically indistinguishable from zero")
    a = _mean(num)
    ratio = a / b
    _, err = _mean_stderr(np.asarray(num) - ratio * np.asarray(den))
    return ratio, err / abs(b)


# ------------------------------------------------------------ cross-entropy


def ce_gradient_norm(C: int) -> tuple[float, float]:
    """Analytic ``1 - 1/C`` and the measured ``||softmax(0) - e_0||^2``."""
    if C < 2:
        raise ValueError("need at least two classes")
    p = np.full(C, 1.0 / C)
    y = np.zeros(C)
    y[0] = 1.0
    return 1.0 - 1.0 / C, math.fsum((p - y) ** 2)


# ------------------------------------------------------------------ boundary


def boundary_fraction(offsets, spatial: Sequence[int]) -> float:
    """Predicted boundary fraction ``sum_r s_r / N_r`` with ``s_r = max |offset_r|``."""
    offs = np.atleast_2d(np.asarray(offsets, dtype=int))
    if offs.shape[1] != len(spatial):
        raise ValueError("offset dimension does not match the spatial shape")
    return float(sum(np.abs(offs[:, r]).max() / n for r, n in enumerate(spatial)))


def enumerated_boundary_fraction(offsets, spatial: Sequence[int]) -> float:
    """Boundary fraction counted from positions whose window leaves the map.

    Along each axis, count positions where some offset steps past the upper
    edge and positions where some offset steps past the lower edge, keep the
    larger count and divide by the axis length.
    """
    offs = np.atleast_2d(np.asarray(offsets, dtype=int))
    total = 0.0
    for r, n in enumerate(spatial):
        p = np.arange(n)[:, None] + offs[None, :, r]
        upper = int(np.any(p >= n, axis=1).sum())
        lower = int(np.any(p < 0, axis=1).sum())
        total += max(upper, lower) / n
    return total


class BoundaryDeviation(NamedTuple):
    measured: float
    predicted_fraction: float
    stderr: float


def boundary_deviation(
    spec: ArchSpec,
    h: int = 2,
    replicates: int = 256,
    seed: int = 0,
    batch: int = 8,
) -> BoundaryDeviation:
    """Relative invariance deficit ``1 - E[T_h] / E[T_{h-1}]`` next to its predicted size.

    ``E[T_h]`` is estimated with the conditional estimator (weights of unit
    ``h`` integrated out), which removes the dominant sampling noise of the
    top layer. For circular specs the predicted fraction is 0 and the
    measured value is the noise floor.
    """
    if not spec.is_conv:
        raise ValueError("boundary_deviation needs a convolutional spec")
    profile = t_profile(spec, replicates, seed, batch, conditional=True)
    deficit, err = _ratio(profile[:, h - 1], profile[:, h - 2])
    predicted = 0.0 if spec.padding == "circular" else boundary_fraction(spec.kernels[h - 1], spec.spatial)
    return BoundaryDeviation(1.0 - deficit, predicted, err)
