"""Physical problem definition for the 1-D column: parameters, units,
nondimensional scaling, and the smooth inlet injection pulse."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np
from scipy.special import expit

# Inlet pulse: product of a rising and a falling logistic, rate 0.02 s^-1,
# switching on near t = 500 s and off near t = 4100 s.
INLET_RATE = 0.02
INLET_ON = 500.0
INLET_OFF = 4100.0


class ConfigError(ValueError):
    """Raised when a column configuration violates its invariants."""


@dataclass(frozen=True)
class ColumnConfig:
    """All physical and discretization parameters of the column problem.

    Units: SI throughout (m, s, kg·m⁻³). ``darcy_flux`` is the Darcy flux;
    the pore velocity is ``darcy_flux / porosity``.
    """

    porosity: float = 0.3
    molecular_dispersion: float = 1e-9  # D_e, m²/s
    dispersivity: float = 0.01  # alpha_L, m
    darcy_flux: float = 2e-4  # v, m/s
    attach: float = 8e-4  # k_a, 1/s
    detach: float = 1e-4  # k_d, 1/s
    length: float = 1.0  # L, m
    horizon: float = 10000.0  # T, s
    inlet_peak: float = 1.0  # c0, kg/m³
    grid_nodes: int = 201
    time_step: float = 10.0  # dt, s

    @property
    def effective_dispersion(self) -> float:
        """D = D_e + alpha_L * v, m²/s."""
        return self.molecular_dispersion + self.dispersivity * self.darcy_flux

    @property
    def pore_velocity(self) -> float:
        return self.darcy_flux / self.porosity

    def replace(self, **changes) -> "ColumnConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, doc: dict) -> "ColumnConfig":
        """Build a config from a JSON-style mapping, rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(
                "unknown config key(s): " + ", ".join(repr(k) for k in unknown)
            )
        clean = {}
        for key, value in doc.items():
            if key == "grid_nodes":
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError("grid_nodes must be an integer")
                clean[key] = value
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                clean[key] = float(value)
        return validate_config(cls(**clean))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ScaledPoint(NamedTuple):
    """Nondimensional space-time point: x_hat = x/L, t_hat = t/T."""

    x_hat: float
    t_hat: float


def validate_config(cfg: ColumnConfig) -> ColumnConfig:
    """Check every invariant; raise ConfigError naming all violated fields."""
    problems = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if not math.isfinite(value):
            problems.append(f"{f.name} must be finite")
    if not problems:
        if not 0.0 < cfg.porosity < 1.0:
            problems.append("porosity must lie in (0, 1)")
        if cfg.molecular_dispersion < 0:
            problems.append("molecular_dispersion must be >= 0")
        if cfg.dispersivity < 0:
            problems.append("dispersivity must be >= 0")
        if cfg.darcy_flux < 0:
            problems.append("darcy_flux must be >= 0")
        if cfg.attach < 0:
            problems.append("attach must be >= 0")
        if cfg.detach < 0:
            problems.append("detach must be >= 0")
        if cfg.length <= 0:
            problems.append("length must be > 0")
        if cfg.horizon <= 0:
            problems.append("horizon must be > 0")
        if cfg.inlet_peak <= 0:
            problems.append("inlet_peak must be > 0")
        if cfg.grid_nodes < 3:
            problems.append("grid_nodes must be >= 3")
        if cfg.time_step <= 0:
            problems.append("time_step must be > 0")
        if cfg.molecular_dispersion + cfg.dispersivity * cfg.darcy_flux <= 0:
            problems.append(
                "effective dispersion must be positive "
                "(molecular_dispersion + dispersivity * darcy_flux)"
            )
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def inlet_concentration(t, cfg: ColumnConfig):
    """Aqueous concentration imposed at the column inlet (kg/m³).

    Smooth injection pulse c0 · σ(0.02(t−500)) · σ(0.02(4100−t)); accepts
    scalars or arrays, total on t ≥ 0.
    """
    t = np.asarray(t, dtype=float)
    value = cfg.inlet_peak * expit(INLET_RATE * (t - INLET_ON)) * expit(
        INLET_RATE * (INLET_OFF - t)
    )
    return float(value) if value.ndim == 0 else value


def scale_point(x, t, cfg: ColumnConfig, direction: str = "to_hat"):
    """Affine map between physical (m, s) and unit-square coordinates.

    ``to_hat`` takes (x, t) in [0,L]×[0,T] to a ScaledPoint; ``to_physical``
    inverts it. Out-of-range input is rejected.
    """
    if direction == "to_hat":
        if not (0.0 <= x <= cfg.length and 0.0 <= t <= cfg.horizon):
            raise ValueError(
                f"point ({x}, {t}) outside [0, {cfg.length}] x [0, {cfg.horizon}]"
            )
        return ScaledPoint(x / cfg.length, t / cfg.horizon)
    if direction == "to_physical":
        if not (0.0 <= x <= 1.0 and 0.0 <= t <= 1.0):
            raise ValueError(f"scaled point ({x}, {t}) outside the unit square")
        return (x * cfg.length, t * cfg.horizon)
    raise ValueError(f"direction must be 'to_hat' or 'to_physical', got {direction!r}")
