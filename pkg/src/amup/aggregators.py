"""Network-level aggregators of per-layer update energies.

The arithmetic mean (AM) is compared with the geometric (GM) and harmonic
(HM) means on the properties that motivate using AM as the network-wide
update scale: merge consistency, additivity of total energy, bounds,
sensitivity to a single small layer and invariance under splitting blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

KINDS = ("AM", "GM", "HM")


@dataclass(frozen=True)
class EnergyVector:
    """Per-layer energies ``S_1..S_L`` with an optional partition of indices (0-based)."""

    values: tuple[float, ...]
    partition: tuple[tuple[int, ...], ...] | None = None

    def __init__(self, values: Sequence[float], partition: Sequence[Sequence[int]] | None = None):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("energy vector is empty")
        if any(not math.isfinite(v) for v in vals):
            raise ValueError("energies must be finite")
        part = None
        if partition is not None:
            part = tuple(tuple(int(i) for i in g) for g in partition)
            flat = sorted(i for g in part for i in g)
            if any(len(g) == 0 for g in part) or flat != list(range(len(vals))):
                raise ValueError("partition must be disjoint, non-empty and cover every index")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "partition", part)

    def __len__(self) -> int:
        return len(self.values)


def _values(v) -> tuple[float, ...]:
    return v.values if isinstance(v, EnergyVector) else EnergyVector(v).values


def aggregate(v: EnergyVector | Sequence[float], kind: str = "AM") -> float:
    """AM, GM (in log space) or HM of the energies. GM and HM need every entry > 0."""
    vals = _values(v)
    n = len(vals)
    if kind == "AM":
        return math.fsum(vals) / n
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if any(x <= 0 for x in vals):
        raise ValueError(f"{kind} needs strictly positive energies")
    if kind == "GM":
        return math.exp(math.fsum(math.log(x) for x in vals) / n)
    return n / math.fsum(1.0 / x for x in vals)


def merge_consistency_gap(v: EnergyVector, kind: str = "AM") -> float:
    """``|M(v) - sum_j |G_j| M(G_j) / sum_j |G_j||`` over the vector's partition."""
    if v.partition is None:
        raise ValueError("merge consistency needs a partition")
    groups = [[v.values[i] for i in g] for g in v.partition]
    merged = math.fsum(len(g) * aggregate(g, kind) for g in groups) / len(v)
    return abs(aggregate(v, kind) - merged)


def gm_cancellation(eps: float, L: int) -> tuple[float, float]:
    """GM and AM of ``(eps, 1/eps, 1, ..., 1)`` of length ``L``."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if L < 2:
        raise ValueError("L must be >= 2")
    v = [eps, 1.0 / eps] + [1.0] * (L - 2)
    return aggregate(v, "GM"), aggregate(v, "AM")


def hm_sensitivity(v: EnergyVector | Sequence[float], i: int) -> float:
    """``dH/dS_i = H^2 / (L * S_i^2)``."""
    vals = _values(v)
    if not 0 <= i < len(vals):
        raise IndexError("index out of range")
    h = aggregate(vals, "HM")
    return h * h / (len(vals) * vals[i] ** 2)


def block_split_invariance(
    blocks: Sequence[float],
    refinement: Sequence[Sequence[float]],
    rel_tol: float = 1e-12,
) -> tuple[float, float, float]:
    """Change in the total energy implied by each aggregator when blocks are split.

    Block ``b`` with energy ``S_b`` is refined into parts that sum to
    ``S_b``. For each kind the implied total is ``count * M(values)``; the
    returned gaps are ``|L' M(parts) - K M(blocks)|`` for AM, GM and HM.
    """
    blocks = [float(b) for b in blocks]
    if len(refinement) != len(blocks):
        raise ValueError("one refinement per block is required")
    for b, parts in zip(blocks, refinement):
        if not parts or abs(math.fsum(parts) - b) > rel_tol * max(abs(b), 1.0):
            raise ValueError("refinement must preserve every block sum")
    parts = [float(p) for g in refinement for p in g]
    gaps = []
    for kind in KINDS:
        gaps.append(abs(len(parts) * aggregate(parts, kind) - len(blocks) * aggregate(blocks, kind)))
    return tuple(gaps)


# ------------------------------------------------------------------- axioms


@dataclass(frozen=True)
class AxiomCheck:
    axiom: str
    claim: str
    passed: bool
    witness: str


def _fmt(v) -> str:
    return "(" + ", ".join(f"{x:g}" for x in v) + ")"


def axioms(seed: int = 0, trials: int = 1000) -> list[AxiomCheck]:
    """Evaluate the A1-A7 properties on witnesses and random vectors."""
    g = np.random.default_rng(seed)
    rows = []

    v = EnergyVector((1.0, 3.0, 8.0), ((0, 1), (2,)))
    am, gm, hm = (merge_consistency_gap(v, k) for k in KINDS)
    rows.append(AxiomCheck("A1", "AM is merge-consistent, GM and HM are not",
                           am <= 1e-12 and gm > 0 and hm > 0,
                           f"{_fmt(v.values)} groups {{1,2}},{{3}}: gaps AM={am:.2e} GM={gm:.3f} HM={hm:.3f}"))

    worst = 0.0
    for _ in range(trials):
        x = g.uniform(0.01, 10.0, size=g.integers(2, 30))
        worst = max(worst, abs(len(x) * aggregate(x) - math.fsum(x)) / math.fsum(x))
    rows.append(AxiomCheck("A2", "L * AM equals the total energy", worst <= 1e-12,
                           f"max relative error {worst:.1e} over {trials} vectors"))

    ok = True
    for _ in range(trials):
        a, b = sorted(g.uniform(0.1, 5.0, size=2))
        x = np.clip(g.uniform(0.0, 6.0, size=g.integers(1, 30)), a, b)
        m = aggregate(x)
        ok &= a * (1 - 1e-12) <= m <= b * (1 + 1e-12)
    rows.append(AxiomCheck("A3", "a <= S_l <= b implies a <= AM <= b", bool(ok),
                           f"{trials} clipped random vectors"))

    gm4, am4 = gm_cancellation(0.01, 10)
    rows.append(AxiomCheck("A4", "GM hides an exploding layer, AM does not",
                           abs(gm4 - 1) <= 1e-12 and am4 > 10,
                           f"(0.01, 100, 1 x 8): GM={gm4:.12g} AM={am4:g}"))

    s = [0.01, 1.0, 1.0, 1.0]
    d = hm_sensitivity(s, 0)
    rows.append(AxiomCheck("A5", "HM is dominated by its smallest layer", d > 1.0,
                           f"{_fmt(s)}: dH/dS_1={d:.4g} vs dH/dS_2={hm_sensitivity(s, 1):.4g}"))

    gaps = block_split_invariance([2.0, 2.0], [[1.0, 1.0], [2.0]])
    rows.append(AxiomCheck("A6", "splitting a block leaves the AM total unchanged",
                           gaps[0] == 0.0 and gaps[1] > 0,
                           f"(2),(2) -> (1,1),(2): gaps AM={gaps[0]:g} GM={gaps[1]:.4f} HM={gaps[2]:.4f}"))

    ok, violations, tested = True, 0, 0
    for _ in range(trials):
        x = np.abs(1.0 + 0.03 * g.standard_normal(g.integers(2, 40)))
        m = aggregate(x)
        cv = float(np.std(x)) / m
        dev = float(np.max(np.abs(x - m))) / m
        ok &= dev <= cv * math.sqrt(len(x) - 1) * (1 + 1e-12) + 1e-12
        if cv < 0.05:
            tested += 1
            violations += dev >= 0.1
    bad = [1.5] + [1.0] * 399
    m = aggregate(bad)
    rows.append(AxiomCheck("A7", "max |S_l - AM| / AM <= CV * sqrt(L - 1)", bool(ok),
                           f"CV<0.05 => dev<0.1 failed on {violations}/{tested} random vectors; "
                           f"(1.5, 1 x 399) has CV={np.std(bad) / m:.4f} and dev={max(abs(v - m) for v in bad) / m:.3f}"))
    return rows

