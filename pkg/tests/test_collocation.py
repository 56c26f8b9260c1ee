"""Latin hypercube sampling and collocation set construction."""

import numpy as np
import pytest

from nanoflow.collocation import (
    build_collocation_set,
    latin_hypercube,
    stratification_holds,
)


def test_lhs_shape_and_bounds():
    pts = latin_hypercube(500, 2, seed=0)
    assert pts.shape == (500, 2)
    assert np.all((pts >= 0.0) & (pts < 1.0))


def test_lhs_exact_stratification():
    """One point per axis-aligned stratum: the bin indices along every
    dimension must form a permutation of 0..n-1."""
    n = 500
    pts = latin_hypercube(n, 2, seed=4)
    for d in range(2):
        bins = np.floor(pts[:, d] * n).astype(int)
        assert np.array_equal(np.sort(bins), np.arange(n))


def test_stratification_holds_detects_violation():
    pts = latin_hypercube(200, 2, seed=1)
    assert stratification_holds(pts)
    broken = pts.copy()
    broken[0] = broken[1]  # two points in one stratum
    assert not stratification_holds(broken)


def test_lhs_seeded_determinism():
    a = latin_hypercube(64, 2, seed=9)
    b = latin_hypercube(64, 2, seed=9)
    c = latin_hypercube(64, 2, seed=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_collocation_set_layout():
    colloc = build_collocation_set(seed=0, n_interior=300, boundary_split=(50, 40, 30))
    assert colloc.interior.shape == (300, 2)
    assert colloc.inlet.shape == (50, 2)
    assert colloc.outlet.shape == (40, 2)
    assert colloc.initial.shape == (30, 2)
    np.testing.assert_array_equal(colloc.inlet[:, 0], 0.0)
    np.testing.assert_array_equal(colloc.outlet[:, 0], 1.0)
    np.testing.assert_array_equal(colloc.initial[:, 1], 0.0)


def test_collocation_defaults():
    colloc = build_collocation_set(seed=0)
    assert colloc.interior.shape == (15000, 2)
    assert colloc.inlet.shape == (1000, 2)


def test_subsample_preserves_membership():
    colloc = build_collocation_set(seed=2, n_interior=400, boundary_split=(60, 60, 60))
    small = colloc.subsample(100, seed=0)
    assert small.interior.shape == (100, 2)
    full = {tuple(p) for p in colloc.interior}
    assert all(tuple(p) in full for p in small.interior)


def test_subsample_seeded():
    colloc = build_collocation_set(seed=2, n_interior=400, boundary_split=(60, 60, 60))
    a = colloc.subsample(50, seed=1)
    b = colloc.subsample(50, seed=1)
    np.testing.assert_array_equal(a.interior, b.interior)
