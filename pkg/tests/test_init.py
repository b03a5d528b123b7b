import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from amup.init import (
    GELU_GAIN,
    InitPolicy,
    gate_moment,
    he_variance,
    initialize,
    jacobian_factor,
    policy_for,
    residual_variance,
)
from amup.netcore import ArchSpec, Layer


def _gelu_prime_sq_density(z):
    # oracle: d/dz [z * Phi(z)] = Phi(z) + z * phi(z), weighted by the normal density
    phi = math.exp(-z * z / 2) / math.sqrt(2 * math.pi)
    cdf = 0.5 * (1 + special.erf(z / math.sqrt(2)))
    return (cdf + z * phi) ** 2 * phi


def test_relu_gate_moment_is_one_half():
    assert gate_moment("relu") == 0.5


def test_gelu_gate_moment():
    q = gate_moment("gelu")
    assert abs(q - 0.456) <= 0.001
    oracle, _ = integrate.quad(_gelu_prime_sq_density, -np.inf, np.inf)
    assert q == pytest.approx(oracle, abs=1e-10)


def test_identity_gate_moment_is_one():
    assert gate_moment("identity") == pytest.approx(1.0, abs=1e-14)


def test_gate_moment_rejects_bad_input():
    with pytest.raises(ValueError):
        gate_moment("tanh")
    with pytest.raises(ValueError):
        gate_moment("relu", 16)


def test_jacobian_factor_relu_is_one():
    assert jacobian_factor("relu") == 1.0


def test_he_variance_uses_conv_fan_in():
    dense = Layer("dense", 10, 4)
    conv = Layer("conv", 10, 4, ((-1,), (0,), (1,)))
    assert he_variance(dense) == pytest.approx(0.2)
    assert he_variance(conv) == pytest.approx(2 / 30)
    assert he_variance(8, 2.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        he_variance(0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.integers(1, 2000), st.floats(0.1, 10))
def test_residual_variance_formula(K, fan_in, c):
    assert residual_variance(K, fan_in, c) == pytest.approx(c / (K * fan_in), rel=1e-15)


def test_residual_variance_rejects_bad_input():
    for args in ((0, 4), (3, 0), (3, 4, -1.0)):
        with pytest.raises(ValueError):
            residual_variance(*args)


def test_policies_per_role():
    spec = ArchSpec("resnet", 5, 8, 3, res_c=2.0)
    kinds = [policy_for(spec, layer).kind for layer in spec.layers()]
    assert kinds == ["HeDense"] + ["ResidualScaled"] * 5 + ["MuReadout"]
    head = spec.layers()[-1]
    assert policy_for(spec, head).variance == pytest.approx(2 / 64)
    assert policy_for(spec.with_(head_init="he"), head).kind == "HeDense"
    conv = ArchSpec("cnn1d", 2, 4, 3, (8,))
    assert policy_for(conv, conv.layers()[0]).kind == "HeConv"


def test_gelu_gain_only_on_non_head_layers():
    spec = ArchSpec("mlp", 2, 8, 4, activation="gelu")
    pols = [policy_for(spec, layer) for layer in spec.layers()]
    assert pols[0].variance == pytest.approx(GELU_GAIN * 2 / 4)
    assert pols[-1].kind == "MuReadout"
    plain = spec.with_(gelu_gain=False)
    assert policy_for(plain, plain.layers()[0]).variance == pytest.approx(0.5)


def test_policy_validation():
    with pytest.raises(ValueError):
        InitPolicy("Xavier", 1.0, 3)
    with pytest.raises(ValueError):
        InitPolicy("HeDense", 0.0, 3)


def test_initialize_is_deterministic_and_seeded():
    spec = ArchSpec("cnn1d", 3, 6, 2, (8,))
    a, b, c = initialize(spec, 7), initialize(spec, 7), initialize(spec, 8)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)
    assert not np.array_equal(a.params[0], c.params[0])


def test_initialized_variances_match_policies():
    spec = ArchSpec("mlp", 3, 400, 300)
    model = initialize(spec, 0)
    for p, pol in zip(model.params, model.policies):
        # sample variance of n normals has relative stderr sqrt(2/n)
        tol = 5 * math.sqrt(2 / p.size)
        assert np.var(p) == pytest.approx(pol.variance, rel=tol)
        assert abs(np.mean(p)) < 5 * math.sqrt(pol.variance / p.size)


def test_he_preserves_preactivation_scale():
    spec = ArchSpec("mlp", 6, 512, 256, out_dim=1)
    from amup.netcore import forward

    x = np.random.default_rng(0).standard_normal((64, 256))
    z = forward(initialize(spec, 1), x).z
    # with a ReLU gate of 1/2 and He variance 2/fan_in, E[z^2] stays near
    # the layer-1 value 2 * E[x^2] for every later layer
    for layer in z[1:]:
        assert np.mean(layer**2) == pytest.approx(np.mean(z[0] ** 2), rel=0.25)
