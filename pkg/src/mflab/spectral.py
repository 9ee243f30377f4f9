"""Linearized eigenproblems −Δφ = ν h e^w φ and nodal-domain diagnostics.

Two formulations are supported.  The Dirichlet problem lives on the interior
P1 space.  The constrained problem adds one shape function ζ, the
discrete-harmonic extension of the boundary value 1, and restricts to
functions with ∫ h e^w φ = 0; it is solved by shift-invert Lanczos with a
saddle-point solve as the inverse operator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import at_points, energy, stiffness_matrix, weighted_mass
from .geometry import TriangleMesh, clip_superlevel, extract_level_set, node_components
from .weights import SingularWeight, harmonic_extension, thresholds

SIGN_TOL = 1e-6


class AssemblyError(FloatingPointError):
    """h e^w is not finite at some quadrature point."""


class EigenSolverError(RuntimeError):
    """The eigensolver did not converge."""


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """Stiffness K and weighted mass M_w = ∫ h e^w φ_i φ_j on the full node set."""

    mesh: TriangleMesh
    weight: SingularWeight
    w: np.ndarray
    K: sp.csr_matrix
    M: sp.csr_matrix

    @property
    def interior(self) -> np.ndarray:
        return self.mesh.interior_nodes

    @property
    def K_int(self) -> sp.csc_matrix:
        i = self.interior
        return self.K[i][:, i].tocsc()

    @property
    def M_int(self) -> sp.csc_matrix:
        i = self.interior
        return self.M[i][:, i].tocsc()

    @property
    def mass(self) -> float:
        """∫ h e^w."""
        return float(self.M.sum())


def assemble_linearized(mesh: TriangleMesh, weight: SingularWeight, w: np.ndarray) -> LinearizedSystem:
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise AssemblyError(f"w is not finite at node {int(np.argmax(~np.isfinite(w)))}")
    rule = weight.base_rule if mesh is weight.mesh else weight.rule(mesh)
    with np.errstate(over="ignore"):
        dens = np.exp(at_points(mesh, rule, w))
    bad = ~np.isfinite(rule.hw * dens)
    if bad.any():
        raise AssemblyError(f"h e^w not finite on triangle {int(rule.tri[np.argmax(bad)])}")
    return LinearizedSystem(mesh, weight, w, stiffness_matrix(mesh), weighted_mass(mesh, rule, dens))


@dataclass(frozen=True, eq=False)
class EigenReport:
    problem: str
    nu: np.ndarray
    vectors: np.ndarray  # full nodal eigenfunctions, one column each
    nodal_domains: tuple
    mass: float
    alpha: float
    c0: tuple | None = None
    residuals: tuple = ()

    @property
    def nu_hat(self) -> np.ndarray:
        return self.nu - 1.0

    @property
    def thresholds(self) -> tuple[float, float]:
        return thresholds(self.alpha)

    def to_dict(self) -> dict:
        eigs = []
        for k in range(len(self.nu)):
            eigs.append(
                {
                    "nu": float(self.nu[k]),
                    "nu_hat": float(self.nu_hat[k]),
                    "nodal_domains": int(self.nodal_domains[k]),
                    "c0": None if self.c0 is None else float(self.c0[k]),
                }
            )
        t4, t8 = self.thresholds
        return {
            "problem": self.problem,
            "mass": self.mass,
            "alpha": self.alpha,
            "thresholds": {"four_pi": t4, "eight_pi": t8},
            "eigs": eigs,
            "pass": bool(np.all(self.nu_hat > SIGN_TOL)) if self.problem == "constrained" else None,
        }


def _normalize(vecs: np.ndarray, M) -> np.ndarray:
    out = vecs.copy()
    for k in range(out.shape[1]):
        v = out[:, k]
        v = v / math.sqrt(float(v @ (M @ v)))
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, k] = v
    return out


def _residuals(A, B, nu, vecs) -> tuple:
    return tuple(
        float(np.linalg.norm(A @ vecs[:, k] - nu[k] * (B @ vecs[:, k])) / np.linalg.norm(A @ vecs[:, k]))
        for k in range(len(nu))
    )


def _eigsh(A, k, B, OPinv=None, v0=None, sigma=0.0):
    n = A.shape[0]
    k = min(k, n - 1)
    v0 = np.ones(n) if v0 is None else v0
    try:
        vals, vecs = spla.eigsh(
            A, k=k, M=B, sigma=sigma, which="LM", OPinv=OPinv, v0=v0, tol=1e-12, maxiter=5000
        )
    except spla.ArpackNoConvergence as exc:
        nu = exc.eigenvalues
        res = _residuals(A, B, nu, exc.eigenvectors) if len(nu) else ()
        raise EigenSolverError(f"eigensolver stagnated; residual norms {res}") from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def solve_dirichlet_eigs(system: LinearizedSystem, k: int = 2) -> EigenReport:
    """Lowest ``k`` eigenpairs of −Δφ = ν h e^w φ, φ = 0 on ∂Ω."""
    if k < 1:
        raise ValueError("k must be positive")
    i = system.interior
    A, B = system.K_int, system.M_int
    lu = spla.splu(A)
    op = spla.LinearOperator(A.shape, matvec=lu.solve, dtype=float)
    nu, vecs = _eigsh(A, k, B, OPinv=op)
    vecs = _normalize(vecs, B)
    res = _residuals(A, B, nu, vecs)
    full = np.zeros((system.mesh.n_nodes, len(nu)))
    full[i] = vecs
    counts = tuple(nodal_domains(full[:, j], system.mesh)[0] for j in range(len(nu)))
    return EigenReport(
        "dirichlet", nu, full, counts, system.mass, system.weight.alpha_total, None, res
    )


def constrained_space(system: LinearizedSystem):
    """Stiffness, mass, zeta and the constraint vector of the augmented space."""
    mesh = system.mesh
    i = system.interior
    zeta = harmonic_extension(mesh, np.ones(len(mesh.boundary_nodes)))
    Kz = system.K @ zeta
    Mz = system.M @ zeta
    n = len(i)
    A = sp.bmat([[system.K_int, None], [None, sp.csc_matrix([[float(zeta @ Kz)]])]]).tocsc()
    col = sp.csc_matrix(Mz[i].reshape(-1, 1))
    B = sp.bmat([[system.M_int, col], [col.T, sp.csc_matrix([[float(zeta @ Mz)]])]]).tocsc()
    e = np.concatenate([1.0 - zeta[i], [1.0]])
    c = B @ e
    return A, B, zeta, c, n


def solve_constrained_eigs(system: LinearizedSystem, k: int = 1) -> EigenReport:
    """Eigenpairs on {φ : φ − c0 ∈ H¹_0, ∫ h e^w φ = 0}."""
    if k < 1:
        raise ValueError("k must be positive")
    A, B, zeta, c, n = constrained_space(system)
    # constants lie in the augmented space, so A is singular; shift to −s with
    # s on the scale of the spectrum, where A + sB is positive definite
    s = system.weight.total_mass() / system.mass
    lu = spla.splu((A + s * B).tocsc())
    Ac = lu.solve(c)
    cAc = float(c @ Ac)

    def op(r):
        y = lu.solve(np.asarray(r, dtype=float).ravel())
        return y - Ac * (float(c @ y) / cAc)

    OP = spla.LinearOperator(A.shape, matvec=op, dtype=float)
    # the Krylov space must start inside the constraint hyperplane
    nu, vecs = _eigsh(A, k, B, OPinv=OP, v0=op(np.ones(A.shape[0])), sigma=-s)
    vecs = vecs - np.outer(Ac, c @ vecs) / cAc
    vecs = _normalize(vecs, B)
    res = _residuals_constrained(A, B, c, nu, vecs)
    mesh = system.mesh
    full = np.zeros((mesh.n_nodes, len(nu)))
    c0 = vecs[-1, :]
    full[:] = np.outer(zeta, c0)
    full[system.interior] += vecs[:n]
    # a negligible boundary constant behaves like a Dirichlet eigenfunction
    counts = tuple(
        nodal_domains(full[:, j], mesh, dirichlet=abs(c0[j]) <= 1e-3 * np.abs(full[:, j]).max())[0]
        for j in range(len(nu))
    )
    return EigenReport(
        "constrained", nu, full, counts, system.mass, system.weight.alpha_total,
        tuple(float(x) for x in c0), res,
    )


def _residuals_constrained(A, B, c, nu, vecs) -> tuple:
    out = []
    for k in range(len(nu)):
        r = A @ vecs[:, k] - nu[k] * (B @ vecs[:, k])
        r = r - c * (float(c @ r) / float(c @ c))  # remove the multiplier direction
        out.append(float(np.linalg.norm(r) / np.linalg.norm(A @ vecs[:, k])))
    return tuple(out)


def nodal_domains(phi: np.ndarray, mesh: TriangleMesh, dirichlet: bool = True):
    """Count sign components of ``phi``.

    Nodes with φ ≥ 0 (zero adheres to the positive side) and nodes with
    φ < 0 are grouped into components along mesh edges, which are exactly the
    nodal domains of the P1 interpolant.  When ``dirichlet`` is set, boundary
    nodes abstain.  Each triangle takes the majority sign of its voting
    vertices (ties to positive) and the label of that component.
    Returns ``(count, labels)`` with ``labels`` per triangle (−1 unlabeled).
    """
    phi = np.asarray(phi, dtype=float)
    if not np.any(phi):
        raise ValueError("phi is identically zero")
    vote = np.ones(mesh.n_nodes, dtype=bool)
    if dirichlet:
        vote &= ~mesh.boundary_mask
    pos = vote & (phi >= 0)
    neg = vote & (phi < 0)
    n_pos, lab_pos = node_components(mesh, pos)
    n_neg, lab_neg = node_components(mesh, neg)
    node_label = np.where(pos, lab_pos, np.where(neg, n_pos + lab_neg, -1))
    t = mesh.triangles
    p_votes = pos[t].sum(axis=1)
    n_votes = neg[t].sum(axis=1)
    want = np.where(p_votes >= n_votes, pos[t].T, neg[t].T).T
    first = np.argmax(want, axis=1)
    labels = node_label[t[np.arange(len(t)), first]]
    labels[(p_votes + n_votes) == 0] = -1
    return n_pos + n_neg, labels


def nodal_components(phi: np.ndarray, mesh: TriangleMesh):
    """Exact P1 nodal domains: components of {φ > 0} and of {φ < 0}.

    Returns a list of ``(sign, SubdomainSlice)``.
    """
    out = [(1, s) for s in extract_level_set(mesh, phi, 0.0)]
    out += [(-1, s) for s in extract_level_set(mesh, -phi, 0.0)]
    return out


def nodal_identity_check(
    phi: np.ndarray, nu_hat: float, component, weight: SingularWeight, w: np.ndarray
) -> float:
    """Relative defect |∫_ω|∇φ|² − (ν̂+1) ∫_ω h e^w φ²| / ∫_ω|∇φ|².

    ``component`` is a ``(sign, slice)`` pair from :func:`nodal_components`
    or ``None`` for the whole domain.  Cut triangles are integrated exactly
    on their clipped parts.
    """
    mesh = weight.mesh
    phi = np.asarray(phi, dtype=float)
    if component is None:
        grad2 = energy(mesh, phi)
        rule = weight.base_rule
        q = at_points(mesh, rule, phi) ** 2 * np.exp(at_points(mesh, rule, w))
        mass = float(rule.hw @ q)
    else:
        sign, slc = component
        f = sign * phi
        grad2 = energy(mesh, phi, slc.tri_frac)
        touch = np.nonzero(slc.tri_frac > 0)[0]
        full = touch[slc.tri_frac[touch] == 1.0]
        cut = touch[slc.tri_frac[touch] < 1.0]
        base = weight.base_rule
        sel = np.isin(base.tri, full)
        mass = float(
            base.hw[sel]
            @ (at_points(mesh, base, phi)[sel] ** 2 * np.exp(at_points(mesh, base, w)[sel]))
        )
        if len(cut):
            owner, cb = clip_superlevel(f[mesh.triangles[cut]], 0.0)
            sub = weight.sub_rule(mesh, cut[owner], cb)
            mass += float(sub.hw @ (at_points(mesh, sub, phi) ** 2 * np.exp(at_points(mesh, sub, w))))
    return abs(grad2 - (nu_hat + 1.0) * mass) / grad2


def zero_mode_residual(system: LinearizedSystem, psi: np.ndarray, nu: float = 1.0) -> float:
    """Relative dual-norm residual of K ψ − ν M_w ψ on interior rows."""
    i = system.interior
    r = (system.K @ psi - nu * (system.M @ psi))[i]
    lu = spla.splu(system.K_int)
    num = math.sqrt(max(float(r @ lu.solve(r)), 0.0))
    den = math.sqrt(float(psi @ (system.K @ psi)))
    return num / den


@dataclass(frozen=True)
class PositivityCertificate:
    mass: float
    alpha: float
    four_pi: float
    eight_pi: float
    nu1_hat: float
    nu2_hat: float
    constrained_nu_hat: float
    checks: dict
    in_scope: bool
    passed: bool

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["checks"] = dict(self.checks)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def positivity_certificate(solution, k: int = 2) -> PositivityCertificate:
    """Check the predicted signs of ν̂_1, ν̂_2 and the constrained ν̂."""
    weight = solution.weight
    mesh = weight.mesh
    system = assemble_linearized(mesh, weight, solution.w)
    dr = solve_dirichlet_eigs(system, max(k, 2))
    cr = solve_constrained_eigs(system, 1)
    alpha = weight.alpha_total
    t4, t8 = thresholds(alpha)
    M = system.mass
    checks = {}
    if M < t4:
        checks["nu1_hat_positive"] = bool(dr.nu_hat[0] > SIGN_TOL)
    if M <= t8:
        checks["nu2_hat_positive"] = bool(dr.nu_hat[1] > SIGN_TOL)
        checks["constrained_positive"] = bool(cr.nu_hat[0] > SIGN_TOL)
    in_scope = M <= t8
    return PositivityCertificate(
        mass=M,
        alpha=alpha,
        four_pi=t4,
        eight_pi=t8,
        nu1_hat=float(dr.nu_hat[0]),
        nu2_hat=float(dr.nu_hat[1]),
        constrained_nu_hat=float(cr.nu_hat[0]),
        checks=checks,
        in_scope=in_scope,
        passed=in_scope and all(checks.values()),
    )
