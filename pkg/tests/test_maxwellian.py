import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmbkit.grids import VelocityGrid
from vmbkit.maxwellian import (
    DegenerateStateError,
    DistributionField,
    FluidMoments,
    MicroFunction,
    Projector,
    QuadratureCalibrationError,
    discrete_maxwellian,
    eval_maxwellian,
    gram_defect,
    gram_matrix,
    invariants,
    macro_basis,
    macro_micro_split,
    moments_from_f,
    project_p0,
    project_p1,
)

TOL_QUAD = 1e-8
G24 = VelocityGrid(24, 7.5)

moment_sets = st.tuples(
    st.floats(0.5, 2.0),
    st.tuples(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4)),
    st.floats(1.0, 2.0),
)


def test_moments_of_global_maxwellian(grid24):
    m = moments_from_f(grid24.mu, grid24)
    assert m.rho == pytest.approx(1.0, abs=TOL_QUAD)
    np.testing.assert_allclose(m.u, 0.0, atol=TOL_QUAD)
    assert m.theta == pytest.approx(1.5, abs=TOL_QUAD)


def test_moments_scale_with_mass(grid24):
    m = moments_from_f(2 * grid24.mu, grid24)
    assert m.rho == pytest.approx(2.0, abs=TOL_QUAD)
    assert m.theta == pytest.approx(1.5, abs=TOL_QUAD)


def test_moments_round_trip_shifted(grid24):
    ref = FluidMoments.constant(1.0, (0.3, 0.0, 0.0), 1.2)
    assert moments_from_f(eval_maxwellian(ref, grid24), grid24).allclose(ref, TOL_QUAD)


def test_degenerate_density_names_cell(grid12):
    F = np.stack([grid12.mu, -grid12.mu, grid12.mu])
    with pytest.raises(DegenerateStateError) as exc:
        moments_from_f(F, grid12)
    assert exc.value.cell == (1,)


def test_degenerate_temperature(grid12):
    # positive mass but negative spread about the mean
    far = np.where(grid12.speed2 > 16.0, 1.0, 0.0)
    F = 0.5 * grid12.mu.max() * (grid12.speed2 < 1.0) - 1e-3 * far
    with pytest.raises(DegenerateStateError):
        moments_from_f(F, grid12)


@pytest.mark.parametrize("kw", [{"rho": 0.0}, {"rho": -1.0}, {"theta": 0.0}, {"rho": np.inf}])
def test_fluid_moments_reject(kw):
    args = {"rho": 1.0, "u": (0, 0, 0), "theta": 1.5} | kw
    with pytest.raises(DegenerateStateError):
        FluidMoments.constant(**args)


def test_maxwellian_peak_value(grid24):
    # with R theta = 1 the profile times exp(|v|^2/2) is the constant (2 pi)^(-3/2)
    M = eval_maxwellian(FluidMoments.constant(), grid24)
    np.testing.assert_allclose(M * np.exp(0.5 * grid24.speed2), (2 * math.pi) ** -1.5, rtol=1e-13)
    assert (2 * math.pi) ** -1.5 == pytest.approx(0.0634936, abs=1e-7)


def test_maxwellian_scales_with_density(grid12):
    a = eval_maxwellian(FluidMoments.constant(1.3, (0.1, 0, 0), 1.7), grid12)
    b = eval_maxwellian(FluidMoments.constant(2.6, (0.1, 0, 0), 1.7), grid12)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-15)


@settings(max_examples=20, deadline=None)
@given(moment_sets)
def test_round_trip_property(ms):
    m = FluidMoments.constant(*ms)
    assert moments_from_f(eval_maxwellian(m, G24), G24).allclose(m, TOL_QUAD * 10)


def test_discrete_maxwellian_exact_moments(grid12):
    m = FluidMoments(np.array([1.0, 1.5]), np.array([[0.2, 0, 0], [0, -0.1, 0.3]]), np.array([1.5, 2.0]))
    Md = discrete_maxwellian(m, grid12)
    assert moments_from_f(Md, grid12).allclose(m, 1e-12)


def test_split_of_exact_maxwellian(grid24):
    M = eval_maxwellian(FluidMoments.constant(1.2, (0.2, 0, 0), 1.4), grid24)
    Mx, G = macro_micro_split(M, grid24)
    assert np.max(np.abs(G.values)) <= TOL_QUAD
    np.testing.assert_allclose(Mx, M, atol=TOL_QUAD)


def test_split_recovers_micro_bump(grid24):
    V = grid24.nodes
    raw = 1e-3 * V[:, 0] * np.exp(-np.sum((V - [0.5, 0, 0]) ** 2, axis=1))
    psi = invariants(grid24)
    # strip the invariant moments by brute force least squares on span{psi mu}
    A = (psi * grid24.mu).T
    c, *_ = np.linalg.lstsq(grid24.weight * psi @ A, grid24.weight * psi @ raw, rcond=None)
    bump = raw - A @ c
    assert np.max(np.abs(grid24.weight * psi @ bump)) < 1e-15
    _, G = macro_micro_split(grid24.mu + bump, grid24)
    np.testing.assert_allclose(G.values, bump, atol=1e-10)
    mass = grid24.weight * G.values.sum()
    assert abs(mass) <= 1e-9


def test_split_mass_of_micro_part_per_cell(grid24):
    rng = np.random.default_rng(3)
    V = grid24.nodes
    F = np.stack([eval_maxwellian(FluidMoments.constant(1.0, (0.1 * j, 0, 0), 1.5), grid24)
                  * (1 + 0.05 * rng.normal() * V[:, 1] ** 2 / 3) for j in range(3)])
    _, G = macro_micro_split(F, grid24)
    assert np.max(np.abs(grid24.weight * G.values.sum(axis=1))) <= 1e-9


def test_split_flags_unresolved_box():
    g = VelocityGrid(6, 3.0)
    M = eval_maxwellian(FluidMoments.constant(1.0, (0.5, 0, 0), 2.0), g)
    with pytest.raises(QuadratureCalibrationError, match="tol_micro"):
        macro_micro_split(M * (1 + 0.3 * g.nodes[:, 0] ** 3), g)


def test_gram_defect_at_default_grid(grid24):
    for rho in (1.0, 2.0):
        for u in ((0, 0, 0), (0.1, 0, 0)):
            for th in (1.0, 1.5, 2.0):
                assert gram_defect(FluidMoments.constant(rho, u, th), grid24) <= 1e-6


def test_macro_basis_orthonormal(grid16):
    m = FluidMoments.constant(1.0, (0.1, 0, 0), 1.0)
    basis, M = macro_basis(m, grid16)
    np.testing.assert_allclose(gram_matrix(basis, M, grid16), np.eye(5), atol=1e-12)


@pytest.fixture
def proj_case(grid24):
    m = FluidMoments.constant(1.3, (0.1, -0.05, 0), 1.6)
    rng = np.random.default_rng(0)
    h = rng.normal(size=grid24.size) * np.exp(-0.25 * grid24.speed2)
    return Projector(m, grid24), h


def test_p0_idempotent(proj_case):
    P, h = proj_case
    p0 = P.p0(h)
    assert np.linalg.norm(P.p0(p0) - p0) <= 1e-9 * np.linalg.norm(p0)


def test_p1_annihilates_p0(proj_case):
    P, h = proj_case
    p0 = P.p0(h)
    assert np.linalg.norm(P.p1(p0)) <= 1e-9 * np.linalg.norm(p0)
    assert np.linalg.norm(P.p0(P.p1(h))) <= 1e-9 * np.linalg.norm(h)


def test_split_identity_exact(proj_case):
    P, h = proj_case
    assert np.array_equal(P.p0(h) + P.p1(h), P.p0(h) + (h - P.p0(h)))
    np.testing.assert_allclose(P.p0(h) + P.p1(h), h, rtol=0, atol=1e-15 * np.max(np.abs(h)) * 10)


def test_p0_fixes_maxwellian(grid24):
    m = FluidMoments.constant(1.5, (0.2, 0, 0), 1.3)
    M = eval_maxwellian(m, grid24)
    np.testing.assert_allclose(project_p0(M, m, grid24), M, atol=1e-6 * M.max())
    assert np.max(np.abs(project_p1(M, m, grid24))) <= 1e-6 * M.max()


@settings(max_examples=15, deadline=None)
@given(moment_sets, st.integers(0, 2 ** 16))
def test_projection_algebra_property(ms, seed):
    m = FluidMoments.constant(*ms)
    P = Projector(m, G24)
    h = np.random.default_rng(seed).normal(size=G24.size) * P.M
    p0 = P.p0(h)
    assert np.linalg.norm(P.p0(p0) - p0) <= 1e-9 * max(np.linalg.norm(p0), 1e-300)
    assert np.linalg.norm(P.p1(p0)) <= 1e-9 * max(np.linalg.norm(p0), 1e-300)


def test_micro_function_defect(grid24):
    g = grid24.nodes[:, 0] * grid24.speed2 * grid24.mu
    g -= 5 * grid24.nodes[:, 0] * grid24.mu
    assert MicroFunction(g, grid24.mu, grid24).check(1e-9).defect() <= 1e-9
    with pytest.raises(QuadratureCalibrationError):
        MicroFunction(grid24.mu, grid24.mu, grid24).check(1e-9)


def test_distribution_field_rejects_empty_cell(grid12):
    with pytest.raises(DegenerateStateError):
        DistributionField(np.stack([grid12.mu, 0 * grid12.mu]), 0.1, grid12)
