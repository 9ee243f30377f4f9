"""Closed-form radial solutions on the disk and the 1D constrained eigenproblem.

The family

    U_{λ,α}(r) = 2 log( λ(1−α) / (1 + λ² r^{2(1−α)}/8) )

solves ΔU + r^{−2α} e^U = 0 in the plane.  The measure r^{−2α} e^{U_{1,α}} dx
becomes 8π(1−α) ds in the variable s = q/(1+q), q = r^{2(1−α)}/8, which is
used to compactify the radial Rayleigh quotient problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class ThresholdError(ValueError):
    """The requested mass is at or beyond the existence threshold 8π(1−α)."""


def _check_alpha(alpha: float) -> None:
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")


def u_lambda_alpha(lam: float, alpha: float, r):
    """U_{λ,α}(r)."""
    _check_alpha(alpha)
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    r = np.asarray(r, dtype=float)
    return 2.0 * np.log(lam * (1 - alpha) / (1 + lam**2 * r ** (2 * (1 - alpha)) / 8))


def model_density(lam: float, alpha: float, r):
    """r^{−2α} e^{U_{λ,α}(r)}."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return r ** (-2 * alpha) * np.exp(u_lambda_alpha(lam, alpha, r))


def mass_ball(lam: float, alpha: float, R):
    """∫_{B_R} r^{−2α} e^{U_{λ,α}} dx = 8π(1−α) q/(1+q), q = λ² R^{2(1−α)}/8."""
    R = np.asarray(R, dtype=float)
    q = lam**2 * R ** (2 * (1 - alpha)) / 8
    with np.errstate(invalid="ignore"):
        out = 8 * math.pi * (1 - alpha) * np.where(np.isinf(q), 1.0, q / (1 + q))
    return out if out.ndim else float(out)


def radius_for_mass(lam: float, alpha: float, m):
    """Inverse of ``mass_ball`` in R."""
    m = np.asarray(m, dtype=float)
    x = m / (8 * math.pi * (1 - alpha))
    q = x / (1 - x)
    return (8 * q / lam**2) ** (1 / (2 * (1 - alpha)))


def lambda_for_mass(rho: float, alpha: float) -> float:
    """The λ with mass_ball(λ, α, 1) = ρ."""
    _check_alpha(alpha)
    top = 8 * math.pi * (1 - alpha)
    if not (0 < rho < top):
        raise ThresholdError(f"rho={rho} must lie in (0, 8*pi*(1-alpha)) = (0, {top})")
    return math.sqrt(8 * rho / (top - rho))


def critical_radius(alpha: float) -> float:
    """8^{1/(2(1−α))}, the zero of the zero mode ψ."""
    return 8.0 ** (1 / (2 * (1 - alpha)))


@dataclass(frozen=True)
class RadialProfile:
    """u(r) = U_{λ,α}(r) − shift, sampled on ``r_grid``."""

    alpha: float
    lam: float
    r_grid: np.ndarray
    values: np.ndarray
    shift: float = 0.0

    def __call__(self, r):
        return u_lambda_alpha(self.lam, self.alpha, r) - self.shift

    def at_points(self, x: np.ndarray) -> np.ndarray:
        return self(np.hypot(x[:, 0], x[:, 1]))


def disk_solution_exact(rho: float, alpha: float, r_grid=None) -> RadialProfile:
    """Solution of the mean field problem on the unit disk with atom −α at 0."""
    lam = lambda_for_mass(rho, alpha)
    shift = float(u_lambda_alpha(lam, alpha, 1.0))
    r = np.linspace(0.0, 1.0, 201) if r_grid is None else np.asarray(r_grid, dtype=float)
    return RadialProfile(alpha, lam, r, u_lambda_alpha(lam, alpha, r) - shift, shift)


def psi_zero_mode(alpha: float, r):
    """ψ = (8 − r^{2(1−α)})/(8 + r^{2(1−α)})."""
    _check_alpha(alpha)
    t = np.asarray(r, dtype=float) ** (2 * (1 - alpha))
    return (8 - t) / (8 + t)


def s_of_r(alpha: float, r):
    q = np.asarray(r, dtype=float) ** (2 * (1 - alpha)) / 8
    with np.errstate(invalid="ignore"):
        return np.where(np.isinf(q), 1.0, q / (1 + q))


def r_of_s(alpha: float, s):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        return (8 * s / (1 - s)) ** (1 / (2 * (1 - alpha)))


@dataclass(frozen=True)
class RadialEigenSolve:
    """Minimizer of the constrained radial Rayleigh quotient on B_{R0}.

    ``psi`` samples ψ* at ``s_grid`` (ψ*(0) > 0), normalized so that
    ∫ r^{−2α} e^{U_α} ψ*² dx = 1.
    """

    alpha: float
    R0: float
    kstar_value: float
    s_grid: np.ndarray
    psi: np.ndarray
    xi0: float
    mean_constraint: float
    norm_constraint: float
    sign_changes: int

    @property
    def r_grid(self) -> np.ndarray:
        return r_of_s(self.alpha, self.s_grid)


def _p1_legendre(s: np.ndarray):
    """Stiffness ∫ s(1−s) φ_i' φ_j' and mass ∫ φ_i φ_j on a 1D grid."""
    h = np.diff(s)
    a, b = s[:-1], s[1:]
    # exact ∫_a^b s(1−s) ds
    coef = (b**2 - a**2) / 2 - (b**3 - a**3) / 3
    k = coef / h**2
    n = len(s)
    A = np.zeros((n, n))
    B = np.zeros((n, n))
    idx = np.arange(n - 1)
    A[idx, idx] += k
    A[idx + 1, idx + 1] += k
    A[idx, idx + 1] -= k
    A[idx + 1, idx] -= k
    B[idx, idx] += h / 3
    B[idx + 1, idx + 1] += h / 3
    B[idx, idx + 1] += h / 6
    B[idx + 1, idx] += h / 6
    return A, B


def kstar(alpha: float, R0: float = math.inf, n_grid: int = 2000) -> RadialEigenSolve:
    """K* = min ∫|∇ψ|² over radial ψ on B_{R0} with ∫ρψ = 0 and ∫ρψ² = 1.

    Here ρ = r^{−2α} e^{U_{1,α}}.  In the variable s the problem reads
    K* = min ∫ s(1−s) ψ_s² ds / (2 ∫ ψ² ds) on [0, S0] with ∫ψ ds = 0; it is
    discretized with P1 elements and the constant mode (eigenvalue 0) is
    deflated, so K* is the second generalized eigenvalue.
    """
    _check_alpha(alpha)
    if n_grid < 200:
        raise ValueError("n_grid must be at least 200")
    rc = critical_radius(alpha)
    if not R0 > rc:
        raise ValueError(f"R0={R0} must exceed the critical radius 8^(1/(2(1-alpha)))={rc}")
    S0 = 1.0 if math.isinf(R0) else float(s_of_r(alpha, R0))
    s = np.linspace(0.0, S0, n_grid + 1)
    A, B = _p1_legendre(s)
    vals, vecs = sla.eigh(A, 2 * B, subset_by_index=[0, 1])
    K = float(vals[1])
    v = vecs[:, 1]
    if v[0] < 0:
        v = -v
    one = np.ones_like(v)
    Bone = B @ one
    v = v - (Bone @ v) / (Bone @ one) * one
    # ∫ρψ² = 8π(1−α) ∫ψ² ds = 1
    v = v / math.sqrt(8 * math.pi * (1 - alpha) * (v @ B @ v))
    mean = float(8 * math.pi * (1 - alpha) * (np.ones_like(v) @ B @ v))
    norm = float(8 * math.pi * (1 - alpha) * (v @ B @ v))
    sign = np.sign(v)
    nz = sign[sign != 0]
    changes = int(np.count_nonzero(np.diff(nz)))
    k = int(np.nonzero((v[:-1] > 0) & (v[1:] <= 0))[0][0])
    s_cross = s[k] + (s[k + 1] - s[k]) * v[k] / (v[k] - v[k + 1])
    xi0 = float(r_of_s(alpha, s_cross))
    return RadialEigenSolve(alpha, float(R0), K, s, v, xi0, mean, norm, changes)


def wronskian_residual(solve: RadialEigenSolve) -> float:
    """Max defect of r(ψ*/ψ)'ψ² = (1−K*) ∫_0^r ρ ψ* ψ t dt on the grid.

    Both sides are evaluated in the s variable, where they read
    2(1−α) s(1−s)(ψ*_s ψ − ψ* ψ_s) and 4(1−α)(1−K*) ∫_0^s ψ* ψ ds.
    """
    a = solve.alpha
    s = solve.s_grid
    v = solve.psi
    h = np.diff(s)
    sm = 0.5 * (s[:-1] + s[1:])
    dv = np.diff(v) / h
    vm = 0.5 * (v[:-1] + v[1:])
    psi = 1 - 2 * sm
    lhs = 2 * (1 - a) * sm * (1 - sm) * (dv * psi - vm * (-2.0))
    # ∫ ψ*ψ over each element exactly (product of two linears), then cumulative
    p0, p1 = 1 - 2 * s[:-1], 1 - 2 * s[1:]
    elem = h * (2 * v[:-1] * p0 + v[:-1] * p1 + v[1:] * p0 + 2 * v[1:] * p1) / 6
    cum = np.concatenate([[0.0], np.cumsum(elem)])
    # integral up to the element midpoint: left node plus half an element
    pm = psi
    half = 0.5 * h * (2 * v[:-1] * p0 + v[:-1] * pm + vm * p0 + 2 * vm * pm) / 6
    rhs = 4 * (1 - a) * (1 - solve.kstar_value) * (cum[:-1] + half)
    return float(np.abs(lhs - rhs).max())
