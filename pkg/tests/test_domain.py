"""Configuration and coordinate-scaling behavior."""

import math

import pytest

from nanoflow.domain import (
    ColumnConfig,
    ConfigError,
    inlet_concentration,
    scale_point,
    validate_config,
)


def test_default_config_is_valid():
    cfg = ColumnConfig()
    validate_config(cfg)
    assert cfg.porosity == 0.3
    assert cfg.grid_nodes == 201


def test_derived_transport_coefficients():
    cfg = ColumnConfig()
    # D = D_e + alpha_L * v with the default numbers
    assert cfg.effective_dispersion == pytest.approx(1e-9 + 0.01 * 2e-4, rel=1e-15)
    assert cfg.pore_velocity == pytest.approx(2e-4 / 0.3, rel=1e-15)


def test_from_dict_empty_gives_defaults():
    assert ColumnConfig.from_dict({}) == ColumnConfig()


def test_from_dict_rejects_unknown_key_by_name():
    with pytest.raises(ConfigError, match="porosty"):
        ColumnConfig.from_dict({"porosty": 0.3})


@pytest.mark.parametrize(
    "field,value",
    [
        ("porosity", 0.0),
        ("porosity", 1.5),
        ("time_step", -1.0),
        ("grid_nodes", 2),
        ("length", 0.0),
        ("horizon", -10.0),
    ],
)
def test_invalid_values_rejected(field, value):
    with pytest.raises(ConfigError):
        validate_config(ColumnConfig().replace(**{field: value}))


def test_replace_leaves_original_untouched():
    cfg = ColumnConfig()
    other = cfg.replace(attach=0.0)
    assert other.attach == 0.0
    assert cfg.attach == 8e-4


def test_inlet_schedule_frozen_values():
    cfg = ColumnConfig()
    # sigmoid ramp product: half height at both switch times, ~c0 in between
    assert inlet_concentration(500.0, cfg) == pytest.approx(0.5, abs=1e-10)
    assert inlet_concentration(4100.0, cfg) == pytest.approx(0.5, abs=1e-10)
    assert inlet_concentration(2300.0, cfg) == pytest.approx(1.0, abs=1e-12)
    assert inlet_concentration(0.0, cfg) == pytest.approx(4.5397868702434395e-05, rel=1e-12)
    assert inlet_concentration(10000.0, cfg) < 1e-40


def test_inlet_schedule_symmetry():
    """The pulse is a product of two mirrored sigmoids, so it is symmetric
    about the midpoint of the on/off switch times."""
    cfg = ColumnConfig()
    for d in (0.0, 37.0, 250.0, 1500.0):
        assert inlet_concentration(500.0 + d, cfg) == pytest.approx(
            inlet_concentration(4100.0 - d, cfg), rel=1e-13
        )


def test_inlet_scales_with_peak():
    cfg = ColumnConfig().replace(inlet_peak=2.5)
    base = ColumnConfig()
    assert inlet_concentration(2300.0, cfg) == pytest.approx(
        2.5 * inlet_concentration(2300.0, base), rel=1e-14
    )


def test_scale_point_unit_box():
    cfg = ColumnConfig()
    xh, th = scale_point(0.25, 5000.0, cfg)
    assert xh == pytest.approx(0.25 / cfg.length)
    assert th == pytest.approx(5000.0 / cfg.horizon)
    assert scale_point(cfg.length, cfg.horizon, cfg) == pytest.approx((1.0, 1.0))


def test_config_dict_round_trip():
    cfg = ColumnConfig().replace(attach=3e-4, grid_nodes=401)
    assert ColumnConfig.from_dict(cfg.to_dict()) == cfg
    assert not math.isnan(cfg.to_dict()["attach"])
