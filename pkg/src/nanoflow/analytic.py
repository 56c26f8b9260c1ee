"""Closed-form Ogata-Banks solution for a step inlet on a semi-infinite
column; used to verify the finite-difference solver with kinetics off."""

from __future__ import annotations

import numpy as np
from scipy.special import erfc, erfcx

from nanoflow.domain import ColumnConfig


def ogata_banks(x, t, velocity: float, dispersion: float, c0: float = 1.0):
    """Concentration c(x, t) for c(0,t)=c0 switched on at t=0, c(x,0)=0.

    ``velocity`` and ``dispersion`` are the pore-scale quantities (v/θ and
    D/θ for a Darcy-flux formulation). The exp·erfc product is evaluated
    through erfcx to stay finite at large Péclet numbers.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if dispersion <= 0:
        raise ValueError("dispersion must be positive")
    out = np.zeros(np.broadcast(x, t).shape)
    active = t > 0
    if np.any(active):
        xt = np.broadcast_to(x, out.shape)[active]
        tt = np.broadcast_to(t, out.shape)[active]
        denom = 2.0 * np.sqrt(dispersion * tt)
        a = (xt - velocity * tt) / denom
        b = (xt + velocity * tt) / denom
        # exp(vx/D)·erfc(b) = erfcx(b)·exp(-a²) because vx/D − b² = −a²
        out[active] = 0.5 * c0 * (erfc(a) + erfcx(b) * np.exp(-np.square(a)))
    zero_x = np.broadcast_to(x, out.shape) == 0.0
    out[zero_x & ~active] = c0
    return out


def outlet_breakthrough(times, cfg: ColumnConfig):
    """Ogata-Banks breakthrough at x = L for a held inlet, kinetics off."""
    return ogata_banks(
        cfg.length,
        times,
        velocity=cfg.pore_velocity,
        dispersion=cfg.effective_dispersion / cfg.porosity,
        c0=cfg.inlet_peak,
    )
