import math

import numpy as np
import pytest

from mflab.bol import (
    TooCoarseError,
    bol_check,
    estmax_check,
    harmonic_lift,
    level_set_sweep,
    monotonicity_checks,
    rearrange_eigenfunction,
    rearrangement_profile,
    slice_integral,
)
from mflab.geometry import extract_level_set
from mflab.meanfield import solve_mean_field
from mflab.radial import lambda_for_mass, mass_ball, u_lambda_alpha
from mflab.spectral import assemble_linearized, solve_dirichlet_eigs
from mflab.weights import AtomicMeasure, build_weight

TOL = 5e-3


def full_slice(mesh, w):
    (slc,) = extract_level_set(mesh, w, float(w.min()) - 1.0)
    return slc


@pytest.fixture(scope="module")
def square_solution(square_mesh):
    weight = build_weight(square_mesh, AtomicMeasure())
    return solve_mean_field(square_mesh, weight, 4 * math.pi)


@pytest.fixture(scope="module")
def two_atom_solution(two_atom_square):
    mesh, weight = two_atom_square
    rho = 0.5 * 8 * math.pi * (1 - weight.alpha_total)
    return solve_mean_field(mesh, weight, rho)


@pytest.fixture(scope="module")
def radial_full(radial_solution):
    sol = radial_solution
    return sol, full_slice(sol.mesh, sol.w)


# ---------------------------------------------------------------------------
# harmonic lift


def test_lift_of_harmonic_field_vanishes(square_mesh):
    x, y = square_mesh.nodes.T
    f = np.sin(3 * x) * np.cos(2 * y)
    (slc,) = extract_level_set(square_mesh, f, 0.3)
    lift = harmonic_lift(slc, 1.5 * x - 2 * y + 0.25)
    assert np.abs(lift.eta).max() < 1e-12


def test_lift_of_radial_model_on_disk(radial_full):
    sol, slc = radial_full
    lift = harmonic_lift(slc, sol.w)
    wb = sol.w[sol.mesh.boundary_nodes][0]
    assert np.abs(lift.g - wb).max() < 1e-12
    assert lift.eta.min() >= -1e-12
    assert np.allclose(lift.eta, lift.w - wb, atol=1e-12)


def test_lift_of_branch_sample_slices(square_solution):
    w = square_solution.w
    mesh = square_solution.mesh
    for q in (0.2, 0.5, 0.8):
        t = float(np.quantile(w, q)) + 1e-9
        for slc in extract_level_set(mesh, w, t):
            lift = harmonic_lift(slc, w)
            assert lift.eta.min() >= -5e-6
            assert lift.eta[lift.submesh.interior_nodes].max() > 0
            assert np.abs(lift.eta[lift.submesh.boundary_nodes]).max() < 1e-12


def test_lift_rejects_tiny_slice(square_solution):
    w = square_solution.w
    slc = max(extract_level_set(square_solution.mesh, w, float(w.max()) - 1e-4), key=lambda s: s.area)
    with pytest.raises(TooCoarseError):
        harmonic_lift(slc, w)


# ---------------------------------------------------------------------------
# rearrangement profile


def test_radial_profile_matches_model(radial_full):
    sol, slc = radial_full
    lift = harmonic_lift(slc, sol.w)
    prof = rearrangement_profile(lift, sol.weight, 0.0, 128)
    lam = lambda_for_mass(4 * math.pi, 0.0)
    U1 = float(u_lambda_alpha(lam, 0.0, 1.0))
    # μ(t) = e^{U(1)} π r(t)² on the model, so η*(s) = U(r(s)) − U(1)
    r = np.sqrt(prof.s_grid / (math.pi * math.exp(U1)))
    exact = u_lambda_alpha(lam, 0.0, r) - U1
    assert np.abs(prof.eta_star - exact).max() <= 1e-2 * np.abs(exact).max()


def test_profile_end_value_is_total_mass(square_solution, two_atom_solution):
    for sol in (square_solution, two_atom_solution):
        slc = full_slice(sol.mesh, sol.w)
        prof = rearrangement_profile(harmonic_lift(slc, sol.w), sol.weight, sol.weight.alpha_total, 64)
        assert prof.F[-1] == pytest.approx(slice_integral(slc, sol.weight, sol.w), rel=1e-6)
        assert prof.F[0] == 0.0 and prof.P[0] == 0.0
        assert (np.diff(prof.mu) >= 0).all() and (np.diff(prof.eta_star) <= 0).all()
        assert (np.diff(prof.F) >= 0).all()


def test_constant_eta_limit(square_mesh):
    weight = build_weight(square_mesh, AtomicMeasure())
    x, y = square_mesh.nodes.T
    w = 0.3 * x + 0.2 * y  # harmonic, so η ≡ 0
    slc = full_slice(square_mesh, w)
    prof = rearrangement_profile(harmonic_lift(slc, w), weight, 0.0, 16)
    s, F = prof.s_grid, prof.F
    assert F[-1] == pytest.approx(s[-1], rel=1e-12)
    # F(s) = s and F′ = 1, so P = ½F²
    assert prof.P[-1] == pytest.approx(0.5 * F[-1] ** 2, rel=1e-10)


# ---------------------------------------------------------------------------
# monotonicity


def test_radial_model_equality_profile(radial_full):
    sol, slc = radial_full
    prof = rearrangement_profile(harmonic_lift(slc, sol.w), sol.weight, 0.0, 128)
    rep = monotonicity_checks(prof)
    scale = 0.5 * prof.total_mass**2
    assert rep.max_abs_P <= 1e-2 * scale
    assert rep.J0 == pytest.approx(rep.inv_max_e_eta, rel=2e-2)


def test_non_radial_profile_strict(two_atom_solution):
    sol = two_atom_solution
    slc = full_slice(sol.mesh, sol.w)
    prof = rearrangement_profile(harmonic_lift(slc, sol.w), sol.weight, sol.weight.alpha_total, 128)
    rep = monotonicity_checks(prof)
    assert prof.P.max() > 1e-2 * 0.5 * prof.total_mass**2
    assert prof.J[-1] < prof.J[1]
    assert rep.passed()
    assert rep.J0 == pytest.approx(rep.inv_max_e_eta, rel=2e-2)


# ---------------------------------------------------------------------------
# certificates


def test_bol_equality_on_radial_model(radial_full):
    sol, slc = radial_full
    cert = bol_check(slc, sol.weight, sol.w)
    assert cert.mass == pytest.approx(4 * math.pi, rel=1e-8)
    assert abs(cert.gap) / cert.rhs < 1e-2
    assert cert.passed


def test_bol_strict_on_annulus(square_solution):
    mesh = square_solution.mesh
    d = np.hypot(mesh.nodes[:, 0] - 0.5, mesh.nodes[:, 1] - 0.5)
    ring = np.exp(-(((d - 0.25) / 0.08) ** 2))
    (slc,) = extract_level_set(mesh, ring, 0.5)
    assert slc.n_holes == 1
    cert = bol_check(slc, square_solution.weight, square_solution.w)
    assert cert.annular and cert.passed
    assert cert.rel_gap > TOL


def test_bol_tiny_slice(square_solution):
    w = square_solution.w
    slc = max(extract_level_set(square_solution.mesh, w, float(w.max()) - 1e-3), key=lambda s: s.area)
    cert = bol_check(slc, square_solution.weight, w)
    assert cert.mass < 1e-2 and cert.lhs > 0 and cert.passed


def test_estmax_radial_model_is_sharp(radial_full):
    sol, slc = radial_full
    lhs, bound, bmax, ok, hyp = estmax_check(slc, sol.weight, sol.w)
    assert hyp and ok
    assert lhs == pytest.approx(8.0, rel=2e-2)
    assert bmax == pytest.approx(2.0, rel=2e-3)
    assert bound == pytest.approx(8.0, rel=2e-2)


def test_estmax_small_rho(square_mesh):
    weight = build_weight(square_mesh, AtomicMeasure())
    sol = solve_mean_field(square_mesh, weight, 1e-3)
    slc = full_slice(square_mesh, sol.w)
    lhs, bound, bmax, ok, _ = estmax_check(slc, weight, sol.w)
    assert ok
    assert bound / bmax == pytest.approx(1.0, abs=1e-3)
    assert lhs / bmax == pytest.approx(1.0, abs=1e-3)


def test_estmax_two_atom_strict_margin(two_atom_solution):
    sol = two_atom_solution
    slc = full_slice(sol.mesh, sol.w)
    lhs, bound, _, ok, hyp = estmax_check(slc, sol.weight, sol.w)
    assert hyp and ok and lhs < bound


def test_estmax_hypothesis_failure(radial_full):
    sol, slc = radial_full
    _, bound, _, ok, hyp = estmax_check(slc, sol.weight, sol.w, mass=8 * math.pi, alpha=0.0)
    assert not hyp and not ok and bound == math.inf


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_radial_equality_family(radial_solution):
    res = level_set_sweep(radial_solution, 64)
    assert res.skipped == 0
    assert all(abs(c.rel_gap) <= 2 * TOL for c in res.certificates)


def test_sweep_square_all_pass(square_solution):
    res = level_set_sweep(square_solution, 64)
    assert res.all_pass
    assert res.min_gap > 0
    rows = res.rows()
    assert len(rows) == len(res.certificates) and len(rows[0]) == 8


def test_single_level_sweep_is_full_domain(square_solution):
    res = level_set_sweep(square_solution, 1)
    (cert,) = res.certificates
    direct = bol_check(full_slice(square_solution.mesh, square_solution.w), square_solution.weight, square_solution.w)
    assert cert.mass == pytest.approx(direct.mass, rel=1e-14)
    assert cert.lhs == pytest.approx(direct.lhs, rel=1e-14)


def test_huber_dominance_is_arithmetic(square_solution, two_atom_solution):
    for sol in (square_solution, two_atom_solution):
        for c in level_set_sweep(sol, 16).certificates:
            if c.huber_pass and c.mass <= 4 * math.pi * (1 - c.alpha):
                assert c.rhs <= 4 * math.pi * (1 - c.alpha) * c.mass * (1 + 1e-14)


def test_sweep_is_deterministic(two_atom_solution):
    a = level_set_sweep(two_atom_solution, 16)
    b = level_set_sweep(two_atom_solution, 16, jobs=2)
    assert [c.to_json() for c in a.certificates] == [c.to_json() for c in b.certificates]


# ---------------------------------------------------------------------------
# eigenfunction rearrangement


def test_rearranged_eigenfunction(square_solution, two_atom_solution):
    for sol in (square_solution, two_atom_solution):
        weight = sol.weight
        phi = solve_dirichlet_eigs(assemble_linearized(sol.mesh, weight, sol.w), 1).vectors[:, 0]
        alpha = weight.alpha_total
        re = rearrange_eigenfunction(phi, weight, sol.w, alpha)
        model = mass_ball(1.0, alpha, re.radius)
        assert np.allclose(model, re.mass, rtol=1e-6)
        assert re.energy_rearranged <= re.energy_original * (1 + TOL)
