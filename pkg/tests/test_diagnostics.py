import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmbkit.burnett import correction_gbar
from vmbkit.diagnostics import (
    ConsistencyError,
    PerturbationState,
    energy_functionals,
    fit_rate,
    fluid_moments,
    limit_error,
    perturbation_from,
    t_max_reference,
    theta_residual_check,
    velocity_multi_indices,
)
from vmbkit.em_fields import EMField
from vmbkit.fluid_solver import FluidState
from vmbkit.grids import RunConfig, SpatialGrid, VelocityGrid
from vmbkit.harness import prepare_well_prepared
from vmbkit.kinetic_solver import KineticModel, KineticState
from vmbkit.maxwellian import FluidMoments, eval_maxwellian

CFG = RunConfig(n_x=16, n_v=24, eps=0.1)
SG = CFG.sgrid


@pytest.fixture(scope="module")
def initial(fast24):
    kin, flu = prepare_well_prepared(CFG)
    return kin, flu, perturbation_from(kin, flu, CFG.eps, fast24, SG)


def test_well_prepared_tildes_vanish(initial):
    *_, p = initial
    for q in p.macro_fields():
        assert np.max(np.abs(q)) <= 1e-11
    assert p.defect <= 1e-9


def test_well_prepared_f_is_minus_correction(initial, fast24, grid24):
    kin, flu, p = initial
    m = fluid_moments(flu)
    gbar = correction_gbar(m, m, CFG.eps, fast24, SG).values
    target = -gbar / grid24.sqrt_mu
    assert np.linalg.norm(p.f - target) <= 1e-8 * np.linalg.norm(target)


def test_uniform_states_give_zero_perturbation(fast24, grid24):
    n = 8
    s = SpatialGrid(n)
    m = FluidMoments(np.full(n, 1.0), np.zeros((n, 3)), np.full(n, 1.5))
    em = EMField.zeros(n)
    kin = KineticState(eval_maxwellian(m, grid24), em)
    flu = FluidState(m.rho, m.u, m.theta, em)
    p = perturbation_from(kin, flu, 0.1, fast24, s)
    assert np.max(np.abs(p.f)) <= 1e-9
    rep = energy_functionals(p, 2, s, grid24)
    assert rep.e_n <= 1e-18 and rep.d_n <= 1e-16


def test_perturbation_guard(fast24, grid24):
    n = 4
    s = SpatialGrid(n)
    m = FluidMoments(np.ones(n), np.zeros((n, 3)), np.full(n, 1.5))
    em = EMField.zeros(n)
    F = eval_maxwellian(m, grid24)
    flu = FluidState(m.rho, m.u, m.theta, em)
    # a bogus correction with mass makes f non-micro
    with pytest.raises(ConsistencyError):
        perturbation_from(KineticState(F, em), flu, 0.1, fast24, s, gbar=0.01 * F)


def zero_perturbation(n_x, vgrid):
    z3 = np.zeros((n_x, 3))
    return PerturbationState(np.zeros(n_x), z3, np.zeros(n_x), z3, z3, np.zeros((n_x, vgrid.size)), 0.1)


def test_energy_of_zero_is_zero(grid24):
    rep = energy_functionals(zero_perturbation(8, grid24), 2, SpatialGrid(8), grid24)
    assert (rep.e_n, rep.d_n) == (0.0, 0.0)


def test_energy_breakdown_sums_and_scales(initial, grid24):
    *_, p = initial
    rep = energy_functionals(p, 2, SG, grid24)
    assert rep.e_n == pytest.approx(sum(rep.e_terms.values()), rel=1e-14)
    assert rep.d_n == pytest.approx(sum(rep.d_terms.values()), rel=1e-14)
    doubled = PerturbationState(*p.macro_fields(), 2.0 * p.f, p.eps)
    rep2 = energy_functionals(doubled, 2, SG, grid24)
    for key, val in rep.e_terms.items():
        if key[2] == "f":
            # doubling is exact in binary floating point
            assert rep2.e_terms[key] == 4.0 * val


def test_energy_terms_cover_multi_indices(initial, grid24):
    *_, p = initial
    rep = energy_functionals(p, 2, SG, grid24)
    keys = {(a, b) for a, b, _ in rep.e_terms}
    assert keys == {(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)}
    assert len(velocity_multi_indices(2)) == 6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_energy_nonnegative(seed, eps):
    vg = VelocityGrid(8, 7.5)
    sg = SpatialGrid(8)
    rng = np.random.default_rng(seed)
    p = PerturbationState(rng.normal(size=8), rng.normal(size=(8, 3)), rng.normal(size=8),
                          rng.normal(size=(8, 3)), rng.normal(size=(8, 3)),
                          rng.normal(size=(8, vg.size)), eps)
    rep = energy_functionals(p, 2, sg, vg)
    assert rep.e_n >= 0 and rep.d_n >= 0
    assert all(v >= 0 for v in rep.e_terms.values())


def test_velocity_derivative_terms_vanish_for_constant_f(grid24):
    # fd_dv uses zero ghost values, so only the interior sees a constant
    p = zero_perturbation(4, grid24)
    inner = np.all(np.abs(grid24.nodes) < 6.0, axis=1)
    p.f = np.where(inner, 1.0, 0.0)[None].repeat(4, axis=0)
    from vmbkit.diagnostics import _dv_multi
    for beta in velocity_multi_indices(1) + velocity_multi_indices(2):
        d = _dv_multi(p.f[0], grid24, beta)
        core = np.all(np.abs(grid24.nodes) < 3.0, axis=1)
        assert np.max(np.abs(d[core])) <= 1e-12


def test_smallness_ratio_reported(initial, grid24):
    *_, p = initial
    rep = energy_functionals(p, 2, SG, grid24)
    ratio = rep.e_n / (CFG.eta0 ** 2 * CFG.eps ** 2)
    assert 0 < ratio < 1e3


def test_limit_error_zero_at_start(initial, grid24):
    kin, flu, _ = initial
    err = limit_error(kin, flu, grid24, SG)
    assert err.l2 <= 1e-12 and err.linf_x <= 1e-12
    assert err.field_l2 == 0.0 and err.field_linf == 0.0


def test_limit_error_axis_relabel_invariant(grid24):
    n = 4
    s = SpatialGrid(n)
    rng = np.random.default_rng(0)
    u = np.tile([0.1, 0.05, -0.02], (n, 1))
    flu = FluidState(np.ones(n), u, np.full(n, 1.5), EMField.zeros(n))
    F = eval_maxwellian(FluidMoments(np.ones(n), u, np.full(n, 1.4)), grid24)
    F = F * (1 + 0.01 * rng.normal(size=F.shape))
    a = limit_error(KineticState(F, EMField.zeros(n)), flu, grid24, s)
    perm = (1, 0, 2)
    Fp = F.reshape((n,) + grid24.shape3).transpose((0,) + tuple(p + 1 for p in perm)).reshape(n, -1)
    flu_p = FluidState(flu.rho, u[:, perm], flu.theta, flu.em)
    b = limit_error(KineticState(Fp, EMField.zeros(n)), flu_p, grid24, s)
    assert b.l2 == pytest.approx(a.l2, rel=1e-12)
    assert b.linf_x == pytest.approx(a.linf_x, rel=1e-12)


def test_limit_error_sees_field_difference(initial, grid24):
    kin, flu, _ = initial
    k2 = kin.copy()
    k2.em.B[:, 2] += 0.01
    err = limit_error(k2, flu, grid24, SG)
    assert err.field_linf == pytest.approx(0.01)
    assert err.field_l2 == pytest.approx(0.01 * math.sqrt(SG.l_x))


def test_theta_check_equilibrium_trajectory(fast24, grid24):
    s = SpatialGrid(4)
    mu = np.tile(grid24.mu, (4, 1))
    window = [KineticState(mu, EMField.zeros(4), t) for t in (0.0, 0.1, 0.2)]
    model = KineticModel(grid24, s, fast24, 0.1)
    chk = theta_residual_check(window, model)
    # G is only the quadrature gap between mu and its refit, so the source is pure P1
    assert chk.theta_defect <= 1e-6 and not chk.flagged


def test_theta_check_needs_uniform_spacing(fast24, grid24):
    s = SpatialGrid(4)
    mu = np.tile(grid24.mu, (4, 1))
    window = [KineticState(mu, EMField.zeros(4), t) for t in (0.0, 0.1, 0.3)]
    with pytest.raises(ValueError, match="equally spaced"):
        theta_residual_check(window, KineticModel(grid24, s, fast24, 0.1))


@pytest.mark.parametrize("power", [1, 2])
def test_fit_rate_exact_powers(power):
    eps = [0.2, 0.1, 0.05, 0.025]
    fit = fit_rate([(e, 3.0 * e ** power) for e in eps])
    assert abs(fit.slope - power) <= 1e-12
    assert fit.r2 == pytest.approx(1.0)
    assert fit.intercept == pytest.approx(math.log(3.0))


def test_fit_rate_rejects_bad_pairs():
    fit = fit_rate([(0.2, 0.2), (0.1, 0.1), (0.05, 0.0), (0.025, 0.025), (0.0125, float("nan"))])
    assert len(fit.rejected) == 2
    assert fit.slope == pytest.approx(1.0)
    with pytest.raises(ValueError, match="at least 3"):
        fit_rate([(0.2, 0.1), (0.1, -1.0), (0.05, 0.02)])


def test_t_max_reference_value():
    assert t_max_reference(0.1, 1e-2, 0.0) == pytest.approx(1 / (4 * (1e-2 + math.sqrt(0.1))))
