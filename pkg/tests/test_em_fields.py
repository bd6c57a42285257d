import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmbkit.em_fields import (
    CompatibilityError,
    EMField,
    curl_1d,
    gauss_residual,
    init_e_from_density,
    maxwell_rhs,
    rk4,
)
from vmbkit.grids import ConfigError, SpatialGrid

GRID = SpatialGrid(32)
K = 2 * math.pi / GRID.l_x


def random_field(rng, n=32, modes=4):
    x = GRID.nodes
    out = np.zeros((n, 3))
    for c in range(3):
        for m in range(1, modes + 1):
            out[:, c] += rng.normal() * np.cos(m * K * x + rng.uniform(0, 2 * np.pi))
    return out


def test_zero_state_is_stationary():
    d = maxwell_rhs(EMField.zeros(32), np.zeros((32, 3)), GRID)
    assert not d.E.any() and not d.B.any()


def standing_wave(t):
    x = GRID.nodes
    E = np.zeros((32, 3))
    B = np.zeros((32, 3))
    E[:, 1] = np.cos(K * x) * np.cos(K * t)
    B[:, 2] = np.sin(K * x) * np.sin(K * t)
    return EMField(E, B)


def test_vacuum_standing_wave():
    dt = 1e-3
    f = standing_wave(0.0)
    zero = np.zeros((32, 3))
    n = 1000
    for _ in range(n):
        f = rk4(lambda y: maxwell_rhs(y, zero, GRID), f, dt)
    ref = standing_wave(n * dt)
    err = max(np.max(np.abs(f.E - ref.E)), np.max(np.abs(f.B - ref.B)))
    assert err <= 1e-8


def test_standing_wave_fourth_order():
    zero = np.zeros((32, 3))

    def err(dt, t_end=2.0):
        f = standing_wave(0.0)
        for _ in range(round(t_end / dt)):
            f = rk4(lambda y: maxwell_rhs(y, zero, GRID), f, dt)
        return np.max(np.abs(f.E - standing_wave(t_end).E))

    e1, e2 = err(0.2), err(0.1)
    assert 12 < e1 / e2 < 20


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_rhs_linear(seed, a):
    rng = np.random.default_rng(seed)
    f1 = EMField(random_field(rng), random_field(rng))
    f2 = EMField(random_field(rng), random_field(rng))
    j1, j2 = random_field(rng), random_field(rng)
    lhs = maxwell_rhs(f1 + f2.scaled(a), j1 + a * j2, GRID)
    r1, r2 = maxwell_rhs(f1, j1, GRID), maxwell_rhs(f2, j2, GRID)
    np.testing.assert_allclose(lhs.E, r1.E + a * r2.E, atol=1e-11)
    np.testing.assert_allclose(lhs.B, r1.B + a * r2.B, atol=1e-11)


def test_curl_kills_longitudinal_part():
    rng = np.random.default_rng(2)
    A = np.zeros((32, 3))
    A[:, 0] = random_field(rng)[:, 0]
    assert np.max(np.abs(curl_1d(A, GRID))) == 0.0


def test_field_energy_exchange():
    # d/dt 1/2 int |E|^2 + |B|^2 = int J . E, since the curl terms cancel on the torus
    rng = np.random.default_rng(3)
    f = EMField(random_field(rng), random_field(rng))
    J = random_field(rng)
    d = maxwell_rhs(f, J, GRID)
    rate = GRID.dx * float(np.sum(f.E * d.E) + np.sum(f.B * d.B))
    exchange = GRID.dx * float(np.sum(J * f.E))
    assert rate == pytest.approx(exchange, rel=1e-12, abs=1e-12)


def test_gauss_residual_trivial():
    r_e, r_b = gauss_residual(EMField.zeros(32), np.ones(32), GRID)
    assert (r_e, r_b) == (0.0, 0.0)


def test_gauss_residual_closed_form():
    delta = 0.03
    x = GRID.nodes
    rho = 1 + delta * np.cos(K * x)
    E = np.zeros((32, 3))
    E[:, 0] = -(delta / K) * np.sin(K * x)
    r_e, _ = gauss_residual(EMField(E, np.zeros((32, 3))), rho, GRID)
    assert r_e <= 1e-10
    E[:, 0] += 4.2
    assert gauss_residual(EMField(E, np.zeros((32, 3))), rho, GRID)[0] == pytest.approx(r_e, abs=1e-14)


def test_gauss_residual_sees_nonuniform_b1():
    B = np.zeros((32, 3))
    B[:, 0] = np.sin(K * GRID.nodes)
    assert gauss_residual(EMField(np.zeros((32, 3)), B), np.ones(32), GRID)[1] > 0.1


def test_init_e_uniform_density():
    assert not init_e_from_density(np.ones(32), GRID).any()


def test_init_e_matches_antiderivative():
    delta = 0.05
    x = GRID.nodes
    rho = 1 + delta * np.cos(K * x)
    E = init_e_from_density(rho, GRID)
    np.testing.assert_allclose(E[:, 0], -(delta / K) * np.sin(K * x), atol=1e-10)
    assert not E[:, 1:].any()
    assert abs(E[:, 0].mean()) <= 1e-15
    assert gauss_residual(EMField(E, np.zeros((32, 3))), rho, GRID)[0] <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_init_e_satisfies_gauss_property(seed):
    rng = np.random.default_rng(seed)
    wiggle = random_field(rng, modes=6)[:, 0]
    rho = 1 + 0.05 * (wiggle - wiggle.mean())
    E = init_e_from_density(rho, GRID)
    assert gauss_residual(EMField(E, np.zeros((32, 3))), rho, GRID)[0] <= 1e-10


def test_init_e_rejects_net_charge():
    with pytest.raises(CompatibilityError, match="net charge"):
        init_e_from_density(np.full(32, 1.1), GRID)


def test_field_shape_validation():
    with pytest.raises(ConfigError):
        EMField(np.zeros((32, 3)), np.zeros((32, 2)))


def test_uniform_b1_stationary():
    B = np.zeros((32, 3))
    B[:, 0] = 0.5
    d = maxwell_rhs(EMField(np.zeros((32, 3)), B), np.zeros((32, 3)), GRID)
    assert not d.B.any() and not d.E.any()
