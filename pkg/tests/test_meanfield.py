import math
import warnings

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from mflab.fem import at_points, stiffness_matrix, weighted_load
from mflab.geometry import build_mesh
from mflab.meanfield import (
    BranchSample,
    MeanFieldSolution,
    NonconvergenceError,
    SolutionBranch,
    continue_branch,
    multistart_uniqueness,
    rho_grid,
    solve_mean_field,
    to_unconstrained,
    uniform_bound_check,
)
from mflab.radial import disk_solution_exact, lambda_for_mass, u_lambda_alpha
from mflab.weights import Atom, AtomicMeasure, build_weight, graded_mesh


def rel_linf(mesh, u, exact):
    r = np.hypot(*mesh.nodes.T)
    ref = exact(r)
    return float(np.abs(u - ref).max() / np.abs(ref).max())


def integral_h_exp(weight, f):
    rule = weight.base_rule
    return float(rule.hw @ np.exp(at_points(weight.mesh, rule, f)))


@pytest.fixture(scope="module")
def atom_disk(disk):
    measure = AtomicMeasure((Atom(0, 0, -0.5),))
    mesh = graded_mesh(disk, measure, 0.05)
    return mesh, build_weight(mesh, measure)


# ---------------------------------------------------------------------------
# single solves


def test_small_rho_gives_small_solution(disk_mesh, disk_weight):
    sol = solve_mean_field(disk_mesh, disk_weight, 1e-6)
    assert np.abs(sol.u).max() < 1e-5
    assert sol.residual_norm <= sol.tol


def test_input_errors(disk_mesh, disk_weight):
    with pytest.raises(ValueError):
        solve_mean_field(disk_mesh, disk_weight, 0.0)
    with pytest.raises(ValueError):
        solve_mean_field(disk_mesh, disk_weight, 1.0, tol=0.0)
    bad = np.ones(disk_mesh.n_nodes)
    with pytest.raises(ValueError):
        solve_mean_field(disk_mesh, disk_weight, 1.0, bad)


def test_nonconvergence_carries_last_iterate(disk_mesh, disk_weight):
    with pytest.raises(NonconvergenceError) as info:
        solve_mean_field(disk_mesh, disk_weight, 7.5 * math.pi, max_iter=1)
    assert info.value.last is not None and info.value.last.shape == (disk_mesh.n_nodes,)
    assert info.value.residual > 0


def test_atom_disk_matches_closed_form(disk):
    measure = AtomicMeasure((Atom(0, 0, -0.5),))
    mesh = graded_mesh(disk, measure, 0.02)
    sol = solve_mean_field(mesh, build_weight(mesh, measure), 2 * math.pi)
    assert rel_linf(mesh, sol.u, disk_solution_exact(2 * math.pi, 0.5)) <= 2e-2


def test_radial_disk_matches_closed_form(radial_solution):
    mesh = radial_solution.mesh
    r = np.hypot(*mesh.nodes.T)
    assert int(np.argmax(radial_solution.u)) == int(np.argmin(r))
    assert rel_linf(mesh, radial_solution.u, disk_solution_exact(4 * math.pi, 0.0)) <= 2e-2


def test_error_decays_under_mesh_halving(disk):
    exact = disk_solution_exact(4 * math.pi, 0.0)
    errs = []
    for h in (0.08, 0.04):
        mesh = build_mesh(disk, h, [((0.0, 0.0), 0.5)])
        sol = solve_mean_field(mesh, build_weight(mesh, AtomicMeasure()), 4 * math.pi)
        errs.append(rel_linf(mesh, sol.u, exact))
    assert math.log2(errs[0] / errs[1]) >= 1.5


def test_radial_symmetry(atom_disk):
    mesh, weight = atom_disk
    sol = solve_mean_field(mesh, weight, 2 * math.pi)
    r = np.hypot(*mesh.nodes.T)
    err = np.abs(sol.u - disk_solution_exact(2 * math.pi, 0.5)(r)).max()
    key = np.round(r, 10)
    spread = 0.0
    for k in np.unique(key):
        group = sol.u[key == k]
        if len(group) > 1:
            spread = max(spread, float(np.ptp(group)))
    assert spread <= 5 * err


# ---------------------------------------------------------------------------
# the unconstrained field


def test_to_unconstrained_of_zero_field(disk_mesh, disk_weight):
    area = disk_weight.total_mass()
    sol = MeanFieldSolution(2.0, np.zeros(disk_mesh.n_nodes), area, 0.0, 0, 1e-10, disk_weight)
    w = to_unconstrained(sol)
    assert np.allclose(w, math.log(2.0) - math.log(area), rtol=0, atol=1e-15)


@pytest.mark.parametrize("rho", [0.5, 2 * math.pi, 3.5 * math.pi])
def test_normalization_identity(atom_disk, rho):
    mesh, weight = atom_disk
    sol = solve_mean_field(mesh, weight, rho)
    assert integral_h_exp(weight, sol.w) == pytest.approx(rho, rel=1e-12)
    # the constrained source integrates to ρ
    e = np.exp(at_points(mesh, weight.base_rule, sol.u))
    src = rho * weighted_load(mesh, weight.base_rule, e) / float(weight.base_rule.hw @ e)
    assert src.sum() == pytest.approx(rho, rel=1e-12)


def test_unconstrained_field_is_discrete_liouville(atom_disk):
    mesh, weight = atom_disk
    sol = solve_mean_field(mesh, weight, 3.0)
    w = sol.w
    e = np.exp(at_points(mesh, weight.base_rule, w))
    res = (stiffness_matrix(mesh) @ w - weighted_load(mesh, weight.base_rule, e))[mesh.interior_nodes]
    assert np.abs(res).max() < 1e-9
    trace = w[mesh.boundary_nodes]
    assert np.ptp(trace) == 0.0


def test_radial_w_matches_model_shape(radial_solution):
    mesh = radial_solution.mesh
    r = np.hypot(*mesh.nodes.T)
    w = radial_solution.w
    U = u_lambda_alpha(lambda_for_mass(4 * math.pi, 0.0), 0.0, r)
    # discretization error dominates the solver tolerance here
    assert np.abs((w - w.max()) - (U - U.max())).max() < 2e-2 * np.abs(U).max()


# ---------------------------------------------------------------------------
# branches


def test_rho_grid_shape():
    g = rho_grid(20.0, 20)
    assert len(g) == 20 and g[-1] == 20.0
    assert (np.diff(g) > 0).all()
    assert np.allclose(np.diff(g[g >= 1.0]), np.diff(g[g >= 1.0])[0])
    with pytest.raises(ValueError):
        rho_grid(1.0, 1)


def test_disk_branch_first_eigenvalue_positive(disk_mesh, disk_weight):
    br = continue_branch(disk_mesh, disk_weight, 8 * math.pi * 0.95, 20)
    assert not br.truncated
    assert (np.diff(br.rhos) > 0).all()
    # the constrained linearization stays positive along the whole branch
    assert all(s.constrained_nu_hat > 0 for s in br.samples)
    # the Dirichlet one changes sign at the critical mass 4π
    for s in br.samples:
        if abs(s.rho - 4 * math.pi) > 0.5:
            assert (s.nu1_hat > 0) == (s.rho < 4 * math.pi)
    wmax = [float(s.solution.w.max()) for s in br.samples]
    assert (np.diff(wmax) > 0).all()


def test_atom_branch_normalization(atom_disk):
    mesh, weight = atom_disk
    br = continue_branch(mesh, weight, 4 * math.pi * 0.99, 10, spectra=False)
    assert not br.truncated and br.rhos[-1] == pytest.approx(4 * math.pi * 0.99)
    for s in br.samples:
        assert integral_h_exp(weight, s.solution.w) == pytest.approx(s.rho, rel=1e-8)


def test_branch_clamps_beyond_threshold(disk_mesh, disk_weight):
    with pytest.warns(UserWarning, match="clamped"):
        br = continue_branch(disk_mesh, disk_weight, 9 * math.pi, 4, spectra=False)
    assert br.rho_max == pytest.approx(0.999 * 8 * math.pi)


def test_uniform_bound_on_disk_branch(disk_mesh, disk_weight):
    br = continue_branch(disk_mesh, disk_weight, 8 * math.pi - 1, 12, spectra=False)
    rep = uniform_bound_check(br, 1.0)
    assert rep.precondition_ok and rep.finite
    assert (np.diff(rep.ratios) > 0).all()
    assert rep.C == max(rep.ratios) < 1.0
    assert not uniform_bound_check(br, 0.0).precondition_ok


def test_uniform_bound_linear_limit(disk_mesh, disk_weight):
    sol = solve_mean_field(disk_mesh, disk_weight, 1e-6)
    sample = BranchSample(1e-6, sol, math.nan, math.nan, math.nan, sol.newton_iters, 1e-6)
    rep = uniform_bound_check(SolutionBranch((sample,), 0.0, 1e-6), 1.0)
    # Green potential of h/∫h: −Δv = h/∫h, v = 0 on the boundary
    i = disk_mesh.interior_nodes
    rule = disk_weight.base_rule
    b = weighted_load(disk_mesh, rule, np.ones(len(rule.hw)))[i] / disk_weight.total_mass()
    K = stiffness_matrix(disk_mesh)[i][:, i].tocsc()
    v = spla.spsolve(K, b)
    assert rep.C == pytest.approx(float(v.max()), rel=1e-4)


# ---------------------------------------------------------------------------
# uniqueness


def test_multistart_disk_single_cluster(disk_mesh, disk_weight):
    rep = multistart_uniqueness(disk_mesh, disk_weight, 6 * math.pi, 8, seed=0)
    assert len(rep.converged) >= 2
    assert rep.n_clusters == 1
    assert rep.max_distance <= rep.cluster_tol == 10 * 1e-10


def test_multistart_small_rho_near_zero(square_mesh, square):
    weight = build_weight(square_mesh, AtomicMeasure())
    rep = multistart_uniqueness(square_mesh, weight, 0.1, 4, seed=1)
    assert rep.failures == 0 and rep.n_clusters == 1
    assert all(np.abs(s.u).max() < 0.1 for s in rep.solutions)


def test_multistart_atom_below_uniqueness_threshold(atom_disk):
    mesh, weight = atom_disk
    rep = multistart_uniqueness(mesh, weight, 0.9 * 4 * math.pi, 8, seed=0)
    assert rep.n_clusters == 1


def test_multistart_is_seeded(disk_mesh, disk_weight):
    a = multistart_uniqueness(disk_mesh, disk_weight, 1.0, 3, seed=7)
    b = multistart_uniqueness(disk_mesh, disk_weight, 1.0, 3, seed=7)
    assert np.array_equal(a.distances, b.distances)
    with pytest.raises(ValueError):
        multistart_uniqueness(disk_mesh, disk_weight, 1.0, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(ValueError):
            multistart_uniqueness(disk_mesh, disk_weight, 9 * math.pi, 2)
