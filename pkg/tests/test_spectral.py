import math

import numpy as np
import pytest
from scipy import linalg, ndimage

from mflab.geometry import build_mesh, refine_uniform
from mflab.meanfield import MeanFieldSolution, solve_mean_field
from mflab.radial import lambda_for_mass, psi_zero_mode, u_lambda_alpha
from mflab.spectral import (
    AssemblyError,
    assemble_linearized,
    constrained_space,
    nodal_components,
    nodal_domains,
    nodal_identity_check,
    positivity_certificate,
    solve_constrained_eigs,
    solve_dirichlet_eigs,
    zero_mode_residual,
)
from mflab.weights import Atom, AtomicMeasure, build_weight, graded_mesh

J01_SQ = 2.404825557695773**2
J11_SQ = 3.831705970207512**2
SQRT8 = math.sqrt(8)


def radial_model_system(mesh, weight, lam):
    w = u_lambda_alpha(lam, 0.0, np.hypot(*mesh.nodes.T))
    return assemble_linearized(mesh, weight, w)


@pytest.fixture(scope="module")
def radial_eigs(radial_solution):
    sol = radial_solution
    system = assemble_linearized(sol.mesh, sol.weight, sol.w)
    return system, solve_dirichlet_eigs(system, 3)


# ---------------------------------------------------------------------------
# assembly


@pytest.mark.parametrize("c", [0.0, 1.3])
def test_constant_field_gives_bessel_eigenvalues(disk_mesh, disk_weight, c):
    system = assemble_linearized(disk_mesh, disk_weight, np.full(disk_mesh.n_nodes, c))
    rep = solve_dirichlet_eigs(system, 2)
    assert rep.nu[0] * math.exp(c) == pytest.approx(J01_SQ, rel=1e-2)
    assert rep.nu[1] * math.exp(c) == pytest.approx(J11_SQ, rel=2e-2)
    assert rep.nu[0] * math.exp(c) > J01_SQ


def test_mass_matrix_rows(disk_mesh, disk_weight):
    system = assemble_linearized(disk_mesh, disk_weight, np.zeros(disk_mesh.n_nodes))
    assert (np.asarray(system.M_int.sum(axis=1)).ravel() > 0).all()
    assert abs(system.M - system.M.T).max() <= 1e-15 * abs(system.M).max()
    assert abs(system.K - system.K.T).max() < 1e-14
    assert system.mass == pytest.approx(disk_weight.total_mass(), rel=1e-13)


def test_assembly_rejects_non_finite(disk_mesh, disk_weight):
    w = np.zeros(disk_mesh.n_nodes)
    w[disk_mesh.interior_nodes[0]] = np.inf
    with pytest.raises(AssemblyError):
        assemble_linearized(disk_mesh, disk_weight, w)
    w[disk_mesh.interior_nodes[0]] = 2000.0
    with pytest.raises(AssemblyError, match="triangle"):
        assemble_linearized(disk_mesh, disk_weight, w)


# ---------------------------------------------------------------------------
# Dirichlet problem


def test_radial_model_second_eigenvalue_above_one(disk_mesh, disk_weight):
    for frac in (0.5, 0.9, 0.999):
        lam = lambda_for_mass(8 * math.pi * frac, 0.0)
        rep = solve_dirichlet_eigs(radial_model_system(disk_mesh, disk_weight, lam), 2)
        assert rep.nu_hat[1] > 0


def test_subcritical_sample_first_eigenvalue_positive(disk_mesh, disk_weight):
    sol = solve_mean_field(disk_mesh, disk_weight, 2 * math.pi)
    rep = solve_dirichlet_eigs(assemble_linearized(disk_mesh, disk_weight, sol.w), 2)
    assert rep.nu_hat[0] > 0
    assert rep.nodal_domains[:2] == (1, 2)


def test_critical_radial_model_zero_mode(disk):
    # U_{√8,0} on the unit disk: ψ(√8 r) vanishes on the boundary, ν̂_1 = 0
    vals, zres = [], []
    for h in (0.1, 0.05, 0.025):
        mesh = build_mesh(disk, h)
        weight = build_weight(mesh, AtomicMeasure())
        system = radial_model_system(mesh, weight, SQRT8)
        vals.append(float(solve_dirichlet_eigs(system, 1).nu_hat[0]))
        psi = psi_zero_mode(0.0, SQRT8 * np.hypot(*mesh.nodes.T))
        zres.append(zero_mode_residual(system, psi))
    assert all(v > 0 for v in vals)
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 5e-3
    assert zres[0] > zres[1] > zres[2]


def test_eigenvalues_nonincreasing_under_refinement(square):
    mesh = build_mesh(square, 0.2)
    nus = []
    for _ in range(3):
        weight = build_weight(mesh, AtomicMeasure())
        nus.append(solve_dirichlet_eigs(assemble_linearized(mesh, weight, np.zeros(mesh.n_nodes)), 3).nu)
        mesh = refine_uniform(mesh)
    assert (np.diff(np.array(nus), axis=0) <= 1e-12).all()
    assert nus[-1][0] == pytest.approx(2 * math.pi**2, rel=1e-2)


def test_weighted_orthogonality_and_formulation(radial_eigs):
    system, rep = radial_eigs
    V = rep.vectors[system.interior]
    G = V.T @ (system.M_int @ V)
    assert np.abs(G - np.eye(3)).max() < 1e-8
    # −Δφ − h e^w φ = ν̂ h e^w φ holds with ν̂ = ν − 1
    for k in range(3):
        r = system.K_int @ V[:, k] - system.M_int @ V[:, k] - rep.nu_hat[k] * (system.M_int @ V[:, k])
        assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(system.K_int @ V[:, k])


def test_rejects_nonpositive_k(radial_eigs):
    system, _ = radial_eigs
    with pytest.raises(ValueError):
        solve_dirichlet_eigs(system, 0)
    with pytest.raises(ValueError):
        solve_constrained_eigs(system, 0)


# ---------------------------------------------------------------------------
# constrained problem


def test_constrained_positive_on_solution(radial_solution):
    sol = radial_solution
    rep = solve_constrained_eigs(assemble_linearized(sol.mesh, sol.weight, sol.w), 3)
    assert (rep.nu_hat > 0).all()
    assert rep.to_dict()["pass"] is True


def test_constrained_tiny_mass_is_large(disk_mesh, disk_weight):
    w = np.full(disk_mesh.n_nodes, math.log(1e-3))
    rep = solve_constrained_eigs(assemble_linearized(disk_mesh, disk_weight, w), 1)
    assert rep.nu_hat[0] > 1e3


def test_constrained_weighted_mean_zero(radial_solution):
    sol = radial_solution
    system = assemble_linearized(sol.mesh, sol.weight, sol.w)
    rep = solve_constrained_eigs(system, 3)
    for k in range(3):
        phi = rep.vectors[:, k]
        assert abs(float((system.M @ phi).sum())) < 1e-12
        assert np.allclose(phi[sol.mesh.boundary_nodes], rep.c0[k], atol=1e-12)


def test_constrained_matches_dense_reference(square):
    # constants belong to the augmented space, so the unconstrained stiffness is singular
    measure = AtomicMeasure((Atom(0.35, 0.4, -0.3), Atom(0.65, 0.6, -0.4)))
    mesh = graded_mesh(square, measure, 0.08)
    weight = build_weight(mesh, measure)
    system = assemble_linearized(mesh, weight, solve_mean_field(mesh, weight, 4.0).w)
    A, B, _, c, _ = constrained_space(system)
    Q = linalg.null_space(c[None, :])
    ref = linalg.eigh(Q.T @ A.toarray() @ Q, Q.T @ B.toarray() @ Q, eigvals_only=True)[:3]
    rep = solve_constrained_eigs(system, 3)
    assert np.allclose(rep.nu, ref, rtol=1e-8)
    assert max(rep.residuals) < 1e-10


@pytest.mark.parametrize("rho", [2 * math.pi, 6 * math.pi])
def test_constrained_with_zero_boundary_constant_is_dirichlet(disk_mesh, disk_weight, rho):
    # the angular modes have c0 = 0 up to the symmetry breaking of the mesh
    sol = solve_mean_field(disk_mesh, disk_weight, rho)
    system = assemble_linearized(disk_mesh, disk_weight, sol.w)
    cr = solve_constrained_eigs(system, 3)
    dr = solve_dirichlet_eigs(system, 4)
    flat = [k for k in range(3) if abs(cr.c0[k]) < 1e-2 * np.abs(cr.vectors[:, k]).max()]
    assert len(flat) == 2
    for k in flat:
        assert np.min(np.abs(dr.nu - cr.nu[k])) < 1e-4 * cr.nu[k]
        assert cr.nodal_domains[k] >= 2


# ---------------------------------------------------------------------------
# nodal domains


def test_first_and_second_nodal_counts(radial_eigs):
    _, rep = radial_eigs
    assert rep.nodal_domains[0] == 1
    assert rep.nodal_domains[1] == 2


@pytest.mark.parametrize("delta", [0.25, -0.25])
def test_checkerboard_matches_pixel_flood_fill(square, delta):
    # the offset makes every crossing generic: one sign joins diagonally, the other splits
    mesh = build_mesh(square, 0.03)

    def f(x, y):
        return np.sin(math.pi * (3 * x + 0.54)) * np.sin(math.pi * (2 * y + 0.53)) + delta

    count, labels = nodal_domains(f(*mesh.nodes.T), mesh, dirichlet=False)
    n = 600
    g = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(g, g)
    v = f(X, Y)
    expected = ndimage.label(v >= 0)[1] + ndimage.label(v < 0)[1]
    assert count == expected == 7
    assert labels.min() >= 0


def test_nodal_domains_rejects_zero(disk_mesh):
    with pytest.raises(ValueError):
        nodal_domains(np.zeros(disk_mesh.n_nodes), disk_mesh)


def test_nodal_identity(radial_solution, radial_eigs, rng):
    sol = radial_solution
    _, rep = radial_eigs
    w = sol.w
    assert nodal_identity_check(rep.vectors[:, 0], rep.nu_hat[0], None, sol.weight, w) < 1e-8
    comps = nodal_components(rep.vectors[:, 1], sol.mesh)
    assert len(comps) == 2
    for comp in comps:
        assert nodal_identity_check(rep.vectors[:, 1], rep.nu_hat[1], comp, sol.weight, w) < 5e-3
    junk = rng.standard_normal(sol.mesh.n_nodes)
    junk[sol.mesh.boundary_nodes] = 0
    assert nodal_identity_check(junk, rep.nu_hat[0], None, sol.weight, w) > 0.1


# ---------------------------------------------------------------------------
# certificates


def test_certificate_atom_disk(disk):
    measure = AtomicMeasure((Atom(0, 0, -0.5),))
    mesh = graded_mesh(disk, measure, 0.05)
    sol = solve_mean_field(mesh, build_weight(mesh, measure), 3 * math.pi)
    cert = positivity_certificate(sol)
    assert cert.passed and cert.in_scope
    assert cert.constrained_nu_hat > 0
    assert cert.eight_pi == pytest.approx(4 * math.pi)


def test_certificate_plain_disk(disk_mesh, disk_weight):
    cert = positivity_certificate(solve_mean_field(disk_mesh, disk_weight, 2 * math.pi))
    assert cert.passed
    assert cert.checks["nu1_hat_positive"] and cert.nu1_hat > 0


def test_certificate_out_of_scope(disk_mesh, disk_weight):
    area = disk_weight.total_mass()
    sol = MeanFieldSolution(9 * math.pi, np.zeros(disk_mesh.n_nodes), area, 0.0, 0, 1e-10, disk_weight)
    cert = positivity_certificate(sol)
    assert not cert.in_scope and not cert.passed
    assert cert.checks == {}
    assert cert.mass == pytest.approx(9 * math.pi, rel=1e-12)
