"""Exactness of the analytic derivative channels and parameter gradients."""

import numpy as np
import pytest

from nanoflow.network import (
    DEFAULT_SPEC,
    ChannelEngine,
    KIND_PARAMS,
    MlpSpec,
    forward_pass,
    forward_with_derivatives,
    gradient_check,
    init_params,
    load_vector,
    loss_param_gradient,
    save_vector,
    unflatten,
)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_forward(params, points, spec):
    """Plain value-only forward pass written independently of the engine."""
    a = points
    for i, (w, b) in enumerate(unflatten(params, spec)):
        a = a @ w + b
        if i < spec.hidden_layers:
            a = sigmoid(a)
    return a


def test_parameter_count():
    assert DEFAULT_SPEC.param_count == 12951
    assert MlpSpec(hidden_layers=1, hidden_width=1).param_count == 2 * 1 + 1 + 1 + 1


def test_init_params_deterministic():
    a = init_params(DEFAULT_SPEC, 0.3, seed=7)
    b = init_params(DEFAULT_SPEC, 0.3, seed=7)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (12951,)
    assert abs(a.std() - 0.3) < 0.02


def test_forward_matches_reference_implementation():
    params = init_params(DEFAULT_SPEC, 0.4, seed=1)
    points = np.random.default_rng(0).uniform(0, 1, size=(17, 2))
    fields, _ = forward_pass(params, points, DEFAULT_SPEC)
    want = reference_forward(params, points, DEFAULT_SPEC)
    np.testing.assert_allclose(fields["u"], want.ravel(), rtol=1e-13)


def test_single_neuron_closed_form():
    """One hidden sigmoid neuron reading only x̂: every channel has a
    closed form, so the propagation must reproduce it almost exactly."""
    spec = MlpSpec(hidden_layers=1, hidden_width=1)
    params = np.array([1.0, 0.0, 0.0, 1.0, 0.0])  # W1=[1,0]ᵀ, b1=0, W2=[1], b2=0
    x = 0.37
    b = forward_with_derivatives(params, np.array([x, 0.81]), spec)
    s = sigmoid(x)
    assert b.u == pytest.approx(s, abs=1e-15)
    assert b.du_dx == pytest.approx(s * (1 - s), abs=1e-15)
    assert b.du_dt == 0.0
    assert b.d2u_dx2 == pytest.approx(s * (1 - s) * (1 - 2 * s), abs=1e-15)


def test_input_derivatives_match_finite_differences():
    params = init_params(DEFAULT_SPEC, 0.5, seed=3)
    h = 1e-5
    for x, t in [(0.2, 0.4), (0.8, 0.1), (0.5, 0.9)]:
        b = forward_with_derivatives(params, np.array([x, t]), DEFAULT_SPEC)

        def u(xx, tt):
            return forward_with_derivatives(params, np.array([xx, tt]), DEFAULT_SPEC).u

        fd_x = (u(x + h, t) - u(x - h, t)) / (2 * h)
        fd_t = (u(x, t + h) - u(x, t - h)) / (2 * h)
        hh = 1e-3
        fd_xx = (u(x + hh, t) - 2 * b.u + u(x - hh, t)) / hh**2
        assert b.du_dx == pytest.approx(fd_x, rel=1e-7, abs=1e-10)
        assert b.du_dt == pytest.approx(fd_t, rel=1e-7, abs=1e-10)
        assert b.d2u_dx2 == pytest.approx(fd_xx, rel=1e-5, abs=1e-8)


def test_frozen_derivative_bundle():
    params = init_params(DEFAULT_SPEC, 0.3, seed=11)
    b = forward_with_derivatives(params, np.array([0.3, 0.6]), DEFAULT_SPEC)
    assert b.u == pytest.approx(0.045912945650587234, rel=1e-14)
    assert b.du_dx == pytest.approx(0.0006504161050790627, rel=1e-13)
    assert b.du_dt == pytest.approx(-0.0008679840278148176, rel=1e-13)
    assert b.d2u_dx2 == pytest.approx(-2.5096172485779572e-06, rel=1e-12)


def test_loss_param_gradient_against_finite_differences():
    params = init_params(DEFAULT_SPEC, 0.3, seed=2)
    points = np.random.default_rng(1).uniform(0, 1, size=(25, 2))

    def loss(bundle):
        value = float(
            np.sum(bundle.u**2)
            + np.sum(bundle.du_dx * bundle.du_dt)
            + np.sum(bundle.d2u_dx2)
        )
        cots = {
            "u": 2.0 * bundle.u,
            "du_dx": bundle.du_dt,
            "du_dt": bundle.du_dx,
            "d2u_dx2": np.ones_like(bundle.d2u_dx2),
        }
        return value, cots

    _, grad = loss_param_gradient(params, points, loss, DEFAULT_SPEC)

    def scalar(p):
        return loss_param_gradient(p, points, loss, DEFAULT_SPEC)[0]

    report = gradient_check(scalar, grad, params, n_probes=20, seed=0)
    assert report.max_rel_error < 1e-5


def test_engine_skips_unrequested_channels():
    params = init_params(DEFAULT_SPEC, 0.3, seed=4)
    points = np.random.default_rng(2).uniform(0, 1, size=(9, 2))
    eng = ChannelEngine(points, DEFAULT_SPEC, need_x=False, need_xx=False)
    fields = eng.forward(params)
    assert fields["du_dx"] is None and fields["d2u_dx2"] is None
    assert fields["du_dt"].shape == (9,)
    with pytest.raises(ValueError):
        eng.backward({"d2u_dx2": np.ones(9)})


def test_engine_value_only_backward():
    params = init_params(DEFAULT_SPEC, 0.3, seed=4)
    points = np.random.default_rng(3).uniform(0, 1, size=(6, 2))
    eng = ChannelEngine(points, DEFAULT_SPEC, need_x=False, need_t=False, need_xx=False)
    fields = eng.forward(params)
    grad = eng.backward({"u": 2.0 * fields["u"]})

    def f(p):
        out, _ = forward_pass(p, points, DEFAULT_SPEC, need_x=False, need_t=False, need_xx=False)
        return float(np.sum(out["u"] ** 2))

    report = gradient_check(f, grad, params, n_probes=12, seed=5)
    assert report.max_rel_error < 1e-6


def test_vector_io_round_trip(tmp_path):
    vec = init_params(DEFAULT_SPEC, 1.0, seed=0)
    path = tmp_path / "params.bin"
    save_vector(path, vec, kind=KIND_PARAMS)
    loaded, kind = load_vector(path)
    assert kind == KIND_PARAMS
    np.testing.assert_array_equal(vec, loaded)


def test_vector_io_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_vector(path)
