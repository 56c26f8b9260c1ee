"""Latin hypercube interior sampling plus boundary/initial point sets on
the unit square."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_INTERIOR = 15000
DEFAULT_BOUNDARY_SPLIT = (1000, 1000, 1000)  # inlet, outlet, initial


@dataclass(frozen=True)
class CollocationSet:
    """Interior points strictly inside (0,1)² and points pinned to the
    inlet (x̂=0), outlet (x̂=1), and initial-time (t̂=0) faces."""

    interior: np.ndarray  # (n, 2) columns x_hat, t_hat
    inlet: np.ndarray
    outlet: np.ndarray
    initial: np.ndarray

    def subsample(self, n: int, seed: int) -> "CollocationSet":
        """Uniform without-replacement subsample of the interior set."""
        if n > self.interior.shape[0]:
            raise ValueError("subsample larger than the interior set")
        idx = np.random.default_rng(seed).choice(
            self.interior.shape[0], size=n, replace=False
        )
        return CollocationSet(self.interior[np.sort(idx)], self.inlet, self.outlet, self.initial)


def latin_hypercube(n: int, d: int, seed: int) -> np.ndarray:
    """n stratified points in [0,1)^d: per dimension, exactly one point in
    each stratum [k/n, (k+1)/n)."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    points = np.empty((n, d))
    for j in range(d):
        points[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return points


def build_collocation_set(
    seed: int,
    n_interior: int = DEFAULT_INTERIOR,
    boundary_split: tuple = DEFAULT_BOUNDARY_SPLIT,
) -> CollocationSet:
    """Sample the full training point budget once, up front."""
    n_in, n_out, n_init = boundary_split
    interior = latin_hypercube(n_interior, 2, seed)
    # keep interior points strictly off the faces
    interior = np.clip(interior, 1e-12, 1.0 - 1e-12)
    inlet_t = latin_hypercube(n_in, 1, seed + 1)[:, 0]
    outlet_t = latin_hypercube(n_out, 1, seed + 2)[:, 0]
    init_x = latin_hypercube(n_init, 1, seed + 3)[:, 0]
    inlet = np.column_stack([np.zeros(n_in), inlet_t])
    outlet = np.column_stack([np.ones(n_out), outlet_t])
    initial = np.column_stack([init_x, np.zeros(n_init)])
    return CollocationSet(interior, inlet, outlet, initial)


def stratification_holds(points: np.ndarray) -> bool:
    """Check the LHS defining property on every dimension."""
    n = points.shape[0]
    for j in range(points.shape[1]):
        strata = np.floor(points[:, j] * n).astype(int)
        strata = np.minimum(strata, n - 1)
        if not np.array_equal(np.sort(strata), np.arange(n)):
            return False
    return True
