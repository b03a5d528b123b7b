"""Initialization variance policies and activation gate moments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from amup import rng
from amup.netcore import ACTIVATIONS, ArchSpec, Layer, Model, activate_prime

POLICY_KINDS = ("HeDense", "HeConv", "ResidualScaled", "MuReadout")

GELU_GAIN = float(np.sqrt(2.0))


@dataclass(frozen=True)
class InitPolicy:
    """Variance rule used for one weight tensor.

    ``MuReadout`` is the output-head rule ``2 / fan_in**2``: one extra factor
    of ``1/fan_in`` relative to He, as in maximal-update readouts.
    """

    kind: str
    variance: float
    fan_in: int
    block_count: int = 1
    c: float = 2.0
    gate_adjustment: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.variance <= 0 or self.fan_in < 1:
            raise ValueError("variance and fan_in must be positive")


def he_variance(layer: Layer | int, gate_adjustment: float = 1.0) -> float:
    """He fan-in variance ``gate_adjustment * 2 / fan_in``.

    ``layer`` is a :class:`Layer` (conv fan-in is ``c_in * |kernel|``) or a
    bare fan-in.
    """
    fan_in = layer.fan_in if isinstance(layer, Layer) else int(layer)
    if fan_in <= 0:
        raise ValueError("fan-in must be positive")
    return gate_adjustment * 2.0 / fan_in


def residual_variance(K: int, fan_in: int, c: float = 2.0) -> float:
    """Residual-branch variance ``c / (K * fan_in)``."""
    if K < 1 or fan_in < 1 or c <= 0:
        raise ValueError("K, fan_in and c must be positive")
    return c / (K * fan_in)


def gate_moment(activation: str, n_quadrature: int = 128) -> float:
    """``E[sigma'(z)^2]`` for ``z ~ N(0, 1)`` by Gauss-Hermite quadrature.

    The node count is rounded up to even so that no node sits on the ReLU
    kink; the symmetric rule then gives exactly one half for the step.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unsupported activation {activation!r}")
    if n_quadrature < 64:
        raise ValueError("need at least 64 quadrature nodes")
    n = n_quadrature + (n_quadrature % 2)
    x, w = np.polynomial.hermite.hermgauss(n)
    z = np.sqrt(2.0) * x
    vals = activate_prime(z, activation) ** 2
    return float(np.dot(w, vals) / np.sqrt(np.pi))


def jacobian_factor(activation: str, gain: float = 2.0) -> float:
    """Per-layer expected Jacobian factor ``gain * E[sigma'(z)^2]``."""
    return gain * gate_moment(activation)


def policy_for(spec: ArchSpec, layer: Layer) -> InitPolicy:
    if layer.role == "head":
        if spec.head_init == "mup":
            return InitPolicy("MuReadout", 2.0 / layer.fan_in**2, layer.fan_in)
        return InitPolicy("HeDense", he_variance(layer), layer.fan_in)
    if layer.role == "branch":
        var = residual_variance(spec.depth, layer.fan_in, spec.res_c)
        return InitPolicy("ResidualScaled", var, layer.fan_in, block_count=spec.depth, c=spec.res_c)
    gate = GELU_GAIN if (spec.activation == "gelu" and spec.gelu_gain) else 1.0
    kind = "HeConv" if layer.kind == "conv" else "HeDense"
    return InitPolicy(kind, he_variance(layer, gate), layer.fan_in, gate_adjustment=gate)


def initialize(spec: ArchSpec, seed: int) -> Model:
    """Draw every weight tensor i.i.d. N(0, policy variance).

    Tensor ``i`` uses the stream ``(seed, i)``, so tensors can be generated
    independently and the same ``(spec, seed)`` always gives the same model.
    """
    params = []
    policies = []
    for i, layer in enumerate(spec.layers()):
        pol = policy_for(spec, layer)
        params.append(rng.normal(rng.stream(seed, i), layer.weight_shape, np.sqrt(pol.variance)))
        policies.append(pol)
    return Model(spec, tuple(params), int(seed), tuple(policies))
