"""Six-term physics objective: residual assembly and exact gradients."""

import numpy as np
import pytest

from nanoflow.collocation import build_collocation_set
from nanoflow.domain import ColumnConfig
from nanoflow.losses import (
    PRESETS,
    NoiseScales,
    PhysicsLoss,
    negative_log_likelihood,
    scaled_inlet_schedule,
)
from nanoflow.domain import inlet_concentration
from nanoflow.network import DEFAULT_SPEC, gradient_check, init_params
from nanoflow.oracle import synthesize_dataset


@pytest.fixture(scope="module")
def setup():
    cfg = ColumnConfig()
    colloc = build_collocation_set(seed=0, n_interior=200, boundary_split=(40, 40, 40))
    dataset = synthesize_dataset(cfg, seed=1)
    loss = PhysicsLoss(cfg, colloc, PRESETS["balanced"], dataset=dataset)
    params_c = init_params(DEFAULT_SPEC, 0.3, seed=11)
    params_s = init_params(DEFAULT_SPEC, 0.3, seed=12)
    return cfg, loss, params_c, params_s


def test_preset_contents():
    assert set(PRESETS) == {"paper", "balanced"}
    assert PRESETS["paper"].sigma_u == 0.01
    assert PRESETS["paper"].sigma_f == 1e-8
    assert PRESETS["paper"].sigma_b == 0.001
    assert PRESETS["balanced"].sigma_f == 1e-6


def test_noise_scales_must_be_positive():
    with pytest.raises(ValueError):
        NoiseScales(sigma_u=0.0, sigma_f=1e-4, sigma_b=1e-3)


def test_frozen_objective_value(setup):
    cfg, loss, params_c, params_s = setup
    total, comps, _ = loss.value_and_grad(
        params_c, params_s, cfg.attach, cfg.detach, want_grad=False
    )
    assert total == pytest.approx(6937872.690807234, rel=1e-14)
    assert comps["r_inlet"] == pytest.approx(0.31801092575239914, rel=1e-13)
    assert comps["r_data"] == pytest.approx(0.11696772427766289, rel=1e-13)


def test_likelihood_assembly_is_weighted_mse():
    """Reassemble the scalar objective from the component MSEs by hand."""
    noise = PRESETS["balanced"]
    comps = {
        "r_pde_c": 0.25,
        "r_pde_s": 0.5,
        "r_inlet": 0.1,
        "r_outlet": 0.2,
        "r_init_c": 0.3,
        "r_init_s": 0.4,
    }
    n_points = {
        "r_pde_c": 10,
        "r_pde_s": 10,
        "r_inlet": 4,
        "r_outlet": 5,
        "r_init_c": 6,
        "r_init_s": 6,
    }
    total = negative_log_likelihood(comps, noise, n_points)
    want = (
        (10 * 0.25 + 10 * 0.5) / (2 * noise.sigma_f**2)
        + (4 * 0.1 + 5 * 0.2 + 6 * 0.3 + 6 * 0.4) / (2 * noise.sigma_b**2)
    )
    assert total == pytest.approx(want, rel=1e-14)


def test_zero_network_residual_identities(setup):
    cfg, loss, *_ = setup
    zero = np.zeros(DEFAULT_SPEC.param_count)
    _, comps, _ = loss.value_and_grad(zero, zero, cfg.attach, cfg.detach, want_grad=False)
    assert comps["r_pde_c"] == 0.0
    assert comps["r_pde_s"] == 0.0
    assert comps["r_outlet"] == 0.0
    assert comps["r_init_c"] == 0.0
    assert comps["r_init_s"] == 0.0
    assert comps["r_inlet"] > 0.0


def test_network_parameter_gradients(setup):
    cfg, loss, params_c, params_s = setup
    _, _, grads = loss.value_and_grad(params_c, params_s, cfg.attach, cfg.detach)
    n = DEFAULT_SPEC.param_count
    stacked = np.concatenate([params_c, params_s])
    stacked_grad = np.concatenate([grads["g_params_c"], grads["g_params_s"]])

    def f(vec):
        total, _, _ = loss.value_and_grad(
            vec[:n], vec[n:], cfg.attach, cfg.detach, want_grad=False
        )
        return total

    report = gradient_check(f, stacked_grad, stacked, n_probes=16, seed=3)
    assert report.max_rel_error < 1e-5


def test_kinetic_coefficient_gradients(setup):
    cfg, loss, params_c, params_s = setup
    _, _, grads = loss.value_and_grad(params_c, params_s, cfg.attach, cfg.detach)
    assert grads["g_ka"] == pytest.approx(70450814.86420491, rel=1e-13)
    assert grads["g_kd"] == pytest.approx(730010468.5773939, rel=1e-13)
    h_a, h_d = 1e-7, 1e-8

    def f(ka, kd):
        return loss.value_and_grad(params_c, params_s, ka, kd, want_grad=False)[0]

    fd_ka = (f(cfg.attach + h_a, cfg.detach) - f(cfg.attach - h_a, cfg.detach)) / (2 * h_a)
    fd_kd = (f(cfg.attach, cfg.detach + h_d) - f(cfg.attach, cfg.detach - h_d)) / (2 * h_d)
    assert grads["g_ka"] == pytest.approx(fd_ka, rel=1e-4)
    assert grads["g_kd"] == pytest.approx(fd_kd, rel=1e-4)


def test_inverse_mode_needs_observations():
    from nanoflow.oracle import ObservationSet

    cfg = ColumnConfig()
    colloc = build_collocation_set(seed=0, n_interior=50, boundary_split=(10, 10, 10))
    empty = np.array([])
    hollow = ObservationSet(empty, empty, empty, empty, empty, empty)
    with pytest.raises(ValueError, match="dataset"):
        PhysicsLoss(cfg, colloc, PRESETS["balanced"], dataset=hollow)


def test_dataset_bounds_are_validated():
    from nanoflow.oracle import ObservationSet

    cfg = ColumnConfig()
    colloc = build_collocation_set(seed=0, n_interior=50, boundary_split=(10, 10, 10))
    one = np.array([1.0])
    bad = ObservationSet(np.array([2 * cfg.horizon]), one, one, np.array([]), np.array([]), np.array([]))
    with pytest.raises(ValueError, match="horizon"):
        PhysicsLoss(cfg, colloc, PRESETS["balanced"], dataset=bad)


def test_scaled_inlet_matches_physical_schedule():
    cfg = ColumnConfig()
    t_hat = np.array([0.05, 0.23, 0.41, 0.8])
    want = [inlet_concentration(th * cfg.horizon, cfg) / cfg.inlet_peak for th in t_hat]
    np.testing.assert_allclose(scaled_inlet_schedule(t_hat, cfg), want, rtol=1e-13)
