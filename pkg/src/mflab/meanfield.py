"""Damped Newton solver and continuation for Δu + ρ h e^u / ∫ h e^u = 0, u = 0 on ∂Ω.

The discrete residual on interior nodes is

    R_i(u) = ∫ ∇u·∇φ_i − ρ ∫ h e^u φ_i / ∫ h e^u,

and its Jacobian is K − (ρ/m)(M_u − b bᵀ/m) with m = ∫ h e^u, b_i = ∫ h e^u φ_i
and M_u the h e^u-weighted mass matrix.  The rank-one term is handled with
the Sherman-Morrison formula on top of a sparse LU factorization.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse.linalg as spla

from .fem import at_points, stiffness_matrix, weighted_load, weighted_mass
from .geometry import TriangleMesh
from .weights import SingularWeight, thresholds

log = logging.getLogger(__name__)

TOL = 1e-10
MAX_ITER = 50
MAX_HALVINGS = 30


class NonconvergenceError(RuntimeError):
    """Newton did not reach the tolerance; ``last`` holds the final iterate."""

    def __init__(self, message: str, last: np.ndarray | None = None, residual: float = math.nan):
        super().__init__(message)
        self.last = last
        self.residual = residual


class MeanFieldProblem:
    """Discrete operators shared by all solves on one mesh and weight."""

    def __init__(self, mesh: TriangleMesh, weight: SingularWeight):
        self.mesh = mesh
        self.weight = weight
        self.rule = weight.base_rule if mesh is weight.mesh else weight.rule(mesh)
        self.K = stiffness_matrix(mesh)
        self.interior = mesh.interior_nodes
        self.K_int = self.K[self.interior][:, self.interior].tocsc()

    @cached_property
    def _k_lu(self):
        return spla.splu(self.K_int)

    def dual_norm(self, r: np.ndarray) -> float:
        """sqrt(rᵀ K⁻¹ r), the discrete H⁻¹ norm of an interior residual."""
        return math.sqrt(max(float(r @ self._k_lu.solve(r)), 0.0))

    def density(self, u: np.ndarray):
        """Quadrature values e^{u − max} and the log of ∫ h e^u."""
        uq = at_points(self.mesh, self.rule, u)
        top = float(uq.max())
        e = np.exp(uq - top)
        s = float(self.rule.hw @ e)
        return e, top + math.log(s), s

    def residual(self, u: np.ndarray, rho: float) -> np.ndarray:
        e, _, s = self.density(u)
        b = weighted_load(self.mesh, self.rule, e)
        return (self.K @ u - rho * b / s)[self.interior]

    def newton_step(self, u: np.ndarray, rho: float, r: np.ndarray) -> np.ndarray:
        e, _, s = self.density(u)
        i = self.interior
        b = weighted_load(self.mesh, self.rule, e)[i]
        M = weighted_mass(self.mesh, self.rule, e)[i][:, i]
        A = (self.K_int - (rho / s) * M).tocsc()
        lu = spla.splu(A)
        # J = A + c cᵀ with c = sqrt(ρ) b / s
        c = math.sqrt(rho) * b / s
        Ar = lu.solve(-r)
        Ac = lu.solve(c)
        return Ar - Ac * (float(c @ Ar) / (1.0 + float(c @ Ac)))


@dataclass(frozen=True, eq=False)
class MeanFieldSolution:
    rho: float
    u: np.ndarray
    mass_integral: float
    residual_norm: float
    newton_iters: int
    tol: float
    weight: SingularWeight = field(repr=False)
    log_mass: float = math.nan

    @property
    def mesh(self) -> TriangleMesh:
        return self.weight.mesh

    @property
    def w(self) -> np.ndarray:
        return to_unconstrained(self)

    @property
    def max_u(self) -> float:
        return float(self.u.max())


def to_unconstrained(sol: MeanFieldSolution) -> np.ndarray:
    """w = u + log ρ − log ∫ h e^u, so that Δw + h e^w = 0 and ∫ h e^w = ρ."""
    lm = sol.log_mass if math.isfinite(sol.log_mass) else math.log(sol.mass_integral)
    return sol.u + (math.log(sol.rho) - lm)


def solve_mean_field(
    mesh: TriangleMesh,
    weight: SingularWeight,
    rho: float,
    initial: np.ndarray | None = None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    problem: MeanFieldProblem | None = None,
    polish: bool = True,
) -> MeanFieldSolution:
    """Damped Newton iteration with line search on the dual-norm residual."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    prob = problem if problem is not None else MeanFieldProblem(mesh, weight)
    u = np.zeros(mesh.n_nodes) if initial is None else np.array(initial, dtype=float)
    if np.any(u[mesh.boundary_nodes] != 0):
        raise ValueError("initial field must vanish at boundary nodes")
    r = prob.residual(u, rho)
    res = prob.dual_norm(r)
    it = 0
    while res > tol:
        if it >= max_iter:
            raise NonconvergenceError(
                f"Newton did not converge in {max_iter} iterations (residual {res:.3e})", u, res
            )
        it += 1
        try:
            du = prob.newton_step(u, rho, r)
        except RuntimeError as exc:  # singular factorization
            raise NonconvergenceError(f"singular Newton system: {exc}", u, res) from exc
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = u.copy()
            trial[prob.interior] += step * du
            r_new = prob.residual(trial, rho)
            res_new = prob.dual_norm(r_new) if np.all(np.isfinite(r_new)) else math.inf
            if res_new < (1 - 1e-4 * step) * res or (step == 1.0 and res_new < res):
                break
            step *= 0.5
        else:
            raise NonconvergenceError(
                f"line search failed after {MAX_HALVINGS} halvings (residual {res:.3e})", u, res
            )
        u, r, res = trial, r_new, res_new
        log.debug("newton it=%d step=%g residual=%.3e", it, step, res)
    if it and polish:
        # one extra full step pushes the iterate to roundoff level when it helps
        try:
            trial = u.copy()
            trial[prob.interior] += prob.newton_step(u, rho, r)
            res_new = prob.dual_norm(prob.residual(trial, rho))
            if res_new < res:
                u, res = trial, res_new
        except RuntimeError:
            pass
    _, lm, _ = prob.density(u)
    return MeanFieldSolution(
        rho=float(rho),
        u=u,
        mass_integral=math.exp(lm),
        residual_norm=res,
        newton_iters=it,
        tol=tol,
        weight=weight,
        log_mass=lm,
    )


# ---------------------------------------------------------------------------
# continuation


@dataclass(frozen=True, eq=False)
class BranchSample:
    rho: float
    solution: MeanFieldSolution
    nu1_hat: float
    nu2_hat: float
    constrained_nu_hat: float
    newton_iters: int
    step: float


@dataclass(frozen=True, eq=False)
class SolutionBranch:
    samples: tuple
    alpha: float
    rho_max: float
    truncated: bool = False
    diagnostic: str = ""

    @property
    def rhos(self) -> np.ndarray:
        return np.array([s.rho for s in self.samples])

    def rows(self) -> list[tuple]:
        """``rho, max_u, mass, nu1_hat, nu2_hat, newton_iters`` per sample."""
        return [
            (
                s.rho,
                s.solution.max_u,
                s.solution.mass_integral,
                s.nu1_hat,
                s.nu2_hat,
                s.newton_iters,
            )
            for s in self.samples
        ]


def rho_grid(rho_max: float, n_steps: int) -> np.ndarray:
    """Geometric spacing up to ρ = 1, uniform beyond."""
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    if rho_max <= 1.0:
        return np.geomspace(rho_max * 1e-2, rho_max, n_steps)
    n_geo = max(1, n_steps // 4)
    geo = np.geomspace(1e-2, 1.0, n_geo + 1)[:-1] if n_geo > 0 else np.empty(0)
    uni = np.linspace(1.0, rho_max, n_steps - n_geo)
    return np.concatenate([geo, uni])


def _spectra(weight: SingularWeight, sol: MeanFieldSolution):
    from .spectral import assemble_linearized, solve_constrained_eigs, solve_dirichlet_eigs

    system = assemble_linearized(weight.mesh, weight, sol.w)
    d = solve_dirichlet_eigs(system, 2)
    c = solve_constrained_eigs(system, 1)
    return float(d.nu_hat[0]), float(d.nu_hat[1]), float(c.nu_hat[0])


def continue_branch(
    mesh: TriangleMesh,
    weight: SingularWeight,
    rho_max: float,
    n_steps: int = 20,
    tol: float = TOL,
    spectra: bool = True,
    jobs: int = 1,
) -> SolutionBranch:
    """Track the solution branch from ρ ≈ 0 to ``rho_max``.

    The predictor is the previous solution; a failed Newton solve halves the
    step.  Spectra of accepted samples are computed afterwards (optionally in
    parallel), which does not change any result.
    """
    alpha = weight.alpha_total
    top = thresholds(alpha)[1]
    if rho_max > top:
        warnings.warn(
            f"rho_max={rho_max} exceeds 8*pi*(1-alpha)={top}; clamped to 0.999 of the threshold",
            stacklevel=2,
        )
        rho_max = 0.999 * top
    grid = rho_grid(rho_max, n_steps)
    prob = MeanFieldProblem(mesh, weight)
    u = np.zeros(mesh.n_nodes)
    rho_prev = 0.0
    accepted: list[tuple[float, MeanFieldSolution, float]] = []
    truncated, diag = False, ""
    for target in grid:
        while rho_prev < target:
            rho = target
            while True:
                try:
                    sol = solve_mean_field(mesh, weight, rho, u, tol, problem=prob)
                    break
                except NonconvergenceError as exc:
                    step = 0.5 * (rho - rho_prev)
                    if step < rho_max * 1e-6:
                        truncated = True
                        diag = f"step underflow at rho={rho:.17g}: {exc}"
                        break
                    rho = rho_prev + step
            if truncated:
                break
            accepted.append((rho, sol, rho - rho_prev))
            u, rho_prev = sol.u, rho
        if truncated:
            break

    def spec(item):
        return _spectra(weight, item[1]) if spectra else (math.nan,) * 3

    if jobs > 1 and spectra:
        with ThreadPoolExecutor(jobs) as ex:
            specs = list(ex.map(spec, accepted))
    else:
        specs = [spec(a) for a in accepted]
    samples = tuple(
        BranchSample(rho, sol, n1, n2, nc, sol.newton_iters, step)
        for (rho, sol, step), (n1, n2, nc) in zip(accepted, specs)
    )
    return SolutionBranch(samples, alpha, float(rho_max), truncated, diag)


@dataclass(frozen=True)
class UniformBoundReport:
    C: float
    ratios: tuple
    rhos: tuple
    finite: bool
    precondition_ok: bool
    message: str = ""


def uniform_bound_check(branch: SolutionBranch, eps: float) -> UniformBoundReport:
    """C = max ‖u_ρ‖_∞ / ρ along the branch, for samples with ρ ≤ 8π(1−α) − eps."""
    top = thresholds(branch.alpha)[1]
    rhos = tuple(float(s.rho) for s in branch.samples)
    ratios = tuple(float(np.abs(s.solution.u).max() / s.rho) for s in branch.samples)
    ok = eps > 0 and all(r <= top - eps for r in rhos)
    msg = "" if ok else f"precondition violated: need eps > 0 and rho <= 8*pi*(1-alpha) - eps = {top - eps}"
    C = max(ratios) if ratios else math.nan
    return UniformBoundReport(C, ratios, rhos, bool(np.isfinite(C)), ok, msg)


# ---------------------------------------------------------------------------
# multistart


def random_initial(mesh: TriangleMesh, rng: np.random.Generator, n_bumps: int = 3) -> np.ndarray:
    """Sum of Gaussian bumps with random centers, widths and amplitudes (zero trace)."""
    domain = mesh.domain
    diam = domain.diameter if domain is not None else float(np.ptp(mesh.nodes, axis=0).max())
    x0, y0 = mesh.nodes.min(axis=0)
    x1, y1 = mesh.nodes.max(axis=0)
    u = np.zeros(mesh.n_nodes)
    for _ in range(n_bumps):
        while True:
            c = rng.uniform([x0, y0], [x1, y1])
            if domain is None or domain.contains(c[None, :])[0]:
                break
        width = rng.uniform(0.1, 0.5) * diam
        amp = rng.uniform(-5.0, 5.0)
        d2 = ((mesh.nodes - c) ** 2).sum(axis=1)
        u += amp * np.exp(-d2 / (2 * width**2))
    u[mesh.boundary_nodes] = 0.0
    return u


@dataclass(frozen=True, eq=False)
class MultistartReport:
    rho: float
    n_starts: int
    converged: tuple  # indices of converged starts
    failures: int
    distances: np.ndarray  # pairwise L∞ distances between converged solutions
    n_clusters: int
    cluster_tol: float
    solutions: tuple = ()

    @property
    def max_distance(self) -> float:
        return float(self.distances.max()) if self.distances.size else 0.0


def _clusters(dist: np.ndarray, tol: float) -> int:
    n = len(dist)
    label = -np.ones(n, dtype=int)
    k = 0
    for i in range(n):
        if label[i] < 0:
            label[(dist[i] <= tol) & (label < 0)] = k
            k += 1
    return k


def multistart_uniqueness(
    mesh: TriangleMesh,
    weight: SingularWeight,
    rho: float,
    n_starts: int = 8,
    seed: int = 0,
    tol: float = TOL,
    jobs: int = 1,
) -> MultistartReport:
    """Solve from ``n_starts`` random initial fields and compare the results."""
    if n_starts < 2:
        raise ValueError("n_starts must be at least 2")
    top = thresholds(weight.alpha_total)[1]
    if rho > top:
        raise ValueError(f"rho={rho} exceeds 8*pi*(1-alpha)={top}")
    rng = np.random.default_rng(seed)
    inits = [random_initial(mesh, rng) for _ in range(n_starts)]
    prob = MeanFieldProblem(mesh, weight)

    def run(u0):
        try:
            return solve_mean_field(mesh, weight, rho, u0, tol, problem=prob)
        except NonconvergenceError:
            return None

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            sols = list(ex.map(run, inits))
    else:
        sols = [run(u0) for u0 in inits]
    ok = tuple(i for i, s in enumerate(sols) if s is not None)
    us = [sols[i].u for i in ok]
    n = len(us)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = float(np.abs(us[i] - us[j]).max())
    ctol = 10 * tol
    return MultistartReport(
        float(rho), n_starts, ok, n_starts - n, dist, _clusters(dist, ctol) if n else 0, ctol,
        tuple(sols[i] for i in ok),
    )
