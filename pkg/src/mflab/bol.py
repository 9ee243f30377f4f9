"""Alexandrov-Bol and Huber certificates and rearrangement profiles.

For a subdomain ω with mass M = ∫_ω h e^w the Bol inequality reads

    (∫_{∂ω} (h e^w)^{1/2} dσ)² ≥ ½ M (8π(1−α(ω)) − M),

with equality for the radial model.  The rearrangement machinery works with
η = w − g, where g is the harmonic function on ω with g = w on ∂ω; the level
sets of η are transplanted onto the model metric through their h e^g mass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .fem import at_points, energy
from .geometry import (
    QuadratureError,
    SubdomainSlice,
    TriangleMesh,
    boundary_points_and_weights,
    clip_superlevel,
    extract_level_set,
)
from .radial import radius_for_mass
from .weights import SingularWeight, alpha_of, harmonic_extension, thresholds

DEFAULT_TOL = 5e-3
DEFAULT_LEVELS = 256


class TooCoarseError(ValueError):
    """The slice is resolved by too few triangles."""


# ---------------------------------------------------------------------------
# integrals over slices


def slice_integral(slc: SubdomainSlice, weight: SingularWeight, field: np.ndarray) -> float:
    """∫_ω h e^{field} dx with exact clipping of cut triangles (``field`` on slc.mesh)."""
    mesh = slc.mesh
    touch = np.nonzero(slc.tri_frac > 0)[0]
    full = touch[slc.tri_frac[touch] >= 1.0]
    cut = touch[slc.tri_frac[touch] < 1.0]
    base = weight.base_rule if mesh is weight.mesh else weight.rule(mesh)
    keep = np.zeros(mesh.n_triangles, dtype=bool)
    keep[full] = True
    sel = keep[base.tri]
    total = float(base.hw[sel] @ np.exp(at_points(mesh, base, field)[sel]))
    if len(cut):
        vals = slc.field[mesh.triangles[cut]]
        owner, cb = clip_superlevel(vals, slc.t)
        sub = weight.sub_rule(mesh, cut[owner], cb)
        total += float(sub.hw @ np.exp(at_points(mesh, sub, field)))
    return total


def boundary_values(slc: SubdomainSlice, field: np.ndarray):
    """Gauss points on ∂ω, their weights and the P1 values of ``field`` there."""
    pts, wts, tris = boundary_points_and_weights(slc)
    if not len(pts):
        return pts, wts, np.empty(0)
    bary = slc.mesh.barycentric(tris, pts)
    vals = (field[slc.mesh.triangles[tris]] * bary).sum(axis=1)
    return pts, wts, vals


def bol_boundary_integral(slc: SubdomainSlice, weight: SingularWeight, w: np.ndarray) -> float:
    """∫_{∂ω} (h e^w)^{1/2} dσ."""
    pts, wts, vals = boundary_values(slc, w)
    if not len(pts):
        return 0.0
    f = np.exp(0.5 * (weight.log_h(pts) + vals))
    bad = ~np.isfinite(f)
    if bad.any():
        p = pts[np.argmax(bad)]
        raise QuadratureError(f"integrand not finite at boundary point ({p[0]:.6g}, {p[1]:.6g})")
    return float(f @ wts)


# ---------------------------------------------------------------------------
# harmonic lift and rearrangement


@dataclass(frozen=True, eq=False)
class HarmonicLift:
    submesh: TriangleMesh
    w: np.ndarray  # w on submesh nodes
    g: np.ndarray
    eta: np.ndarray


def harmonic_lift(slc: SubdomainSlice, w: np.ndarray) -> HarmonicLift:
    """g harmonic on ω with g = w on ∂ω, and η = w − g (on the slice submesh)."""
    sub = slc.submesh()
    if sub.n_triangles < 10 or len(sub.interior_nodes) == 0:
        raise TooCoarseError(f"slice has only {sub.n_triangles} triangles")
    ws = sub.parent.interp @ np.asarray(w, dtype=float)
    g = harmonic_extension(sub, ws[sub.boundary_nodes])
    return HarmonicLift(sub, ws, g, ws - g)


@dataclass(frozen=True, eq=False)
class RearrangementProfile:
    """μ(t), η*(s), F(s), P(s), J(s) sampled on a level grid (s ascending)."""

    alpha: float
    t_grid: np.ndarray
    mu: np.ndarray
    F: np.ndarray
    total_mass: float  # M(ω) = ∫_ω h e^w computed directly
    eta_max: float

    @property
    def s_grid(self) -> np.ndarray:
        return self.mu

    @property
    def eta_star(self) -> np.ndarray:
        return self.t_grid

    @property
    def F_prime(self) -> np.ndarray:
        return np.exp(self.t_grid)

    @property
    def P(self) -> np.ndarray:
        c = 4 * math.pi * (1 - self.alpha)
        return c * (self.mu * self.F_prime - self.F) + 0.5 * self.F**2

    @property
    def J(self) -> np.ndarray:
        c = 8 * math.pi * (1 - self.alpha)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.F > 0, self.mu * (1 / self.F - 1 / c), np.nan)


def level_grid(values: np.ndarray, n_levels: int, lo: float | None = None, hi: float | None = None):
    """``n_levels`` levels from lo to hi, moved off nodal values.

    A level equal (up to roundoff) to a nodal value is lowered by half the
    smallest gap between distinct nodal values.
    """
    v = np.unique(values)
    lo = float(v[0]) if lo is None else lo
    hi = float(v[-1]) if hi is None else hi
    # values closer than roundoff count as one value
    eps = 1e-10 * max(float(v[-1] - v[0]), abs(float(v[-1])), 1e-300)
    d = np.diff(v)
    d = d[d > eps]
    gap = float(d.min()) if len(d) else 1.0
    t = np.linspace(lo, hi, n_levels) if n_levels > 1 else np.array([lo])
    near = np.abs(t[:, None] - v[None, :]).min(axis=1) <= eps
    t[near] -= 0.5 * gap
    return t


def rearrangement_profile(
    lift: HarmonicLift, weight: SingularWeight, alpha: float, n_levels: int = DEFAULT_LEVELS
) -> RearrangementProfile:
    """μ_k = ∫_{η>t_k} h e^g and F_k = ∫_{η>t_k} h e^w on a grid of η levels.

    Since F(μ(t)) = ∫_{η>t} h e^{η+g}, the pair (μ_k, F_k) samples F on the
    s grid and F′(μ_k) = e^{t_k}.  The top level is max η (s = 0).
    """
    sub = lift.submesh
    eta = lift.eta
    rule = weight.rule(sub)
    gq = at_points(sub, rule, lift.g)
    wq = at_points(sub, rule, lift.w)
    A = np.bincount(rule.tri, weights=rule.hw * np.exp(gq), minlength=sub.n_triangles)
    B = np.bincount(rule.tri, weights=rule.hw * np.exp(wq), minlength=sub.n_triangles)
    tv = eta[sub.triangles]
    vmin, vmax = tv.min(axis=1), tv.max(axis=1)
    order = np.argsort(-vmin, kind="stable")
    cumA = np.concatenate([[0.0], np.cumsum(A[order])])
    cumB = np.concatenate([[0.0], np.cumsum(B[order])])
    sorted_min = -vmin[order]
    top = float(eta.max())
    t = level_grid(eta, n_levels, lo=min(0.0, float(eta.min())) - 1e-12, hi=top)
    t[-1] = top
    mu = np.empty(len(t))
    F = np.empty(len(t))
    for k, tk in enumerate(t):
        nfull = int(np.searchsorted(sorted_min, -tk, side="left"))  # vmin > tk
        m, f = cumA[nfull], cumB[nfull]
        cut = np.nonzero((vmin <= tk) & (vmax > tk))[0]
        if len(cut):
            owner, cb = clip_superlevel(tv[cut], tk)
            sr = weight.sub_rule(sub, cut[owner], cb)
            m += float(sr.hw @ np.exp(at_points(sub, sr, lift.g)))
            f += float(sr.hw @ np.exp(at_points(sub, sr, lift.w)))
        mu[k], F[k] = m, f
    idx = np.arange(len(t))[::-1]
    total = float(B.sum())
    return RearrangementProfile(alpha, t[idx], mu[idx], F[idx], total, top)


@dataclass(frozen=True)
class MonotonicityReport:
    min_P: float
    max_abs_P: float
    max_abs_J: float
    P_decrease: float  # largest drop of P below its running maximum
    J_increase: float  # largest rise of J above its running minimum
    min_dP: float
    max_dJ: float
    F_end_defect: float  # |F(μ(0)) − M(ω)| / M(ω)
    J0: float  # J at the smallest positive s
    inv_max_e_eta: float

    def passed(self, rel: float = 1e-3) -> bool:
        return (
            self.P_decrease <= rel * self.max_abs_P
            and self.J_increase <= rel * self.max_abs_J
            and self.F_end_defect <= 1e-6
        )


def monotonicity_checks(profile: RearrangementProfile) -> MonotonicityReport:
    s, P = profile.mu, profile.P
    J = profile.J
    ds = np.diff(s)
    dP = np.diff(P)
    good = ds > 0
    jm = np.isfinite(J)
    Jv, sv = J[jm], s[jm]
    dJ = np.diff(Jv)
    dsJ = np.diff(sv)
    return MonotonicityReport(
        min_P=float(P.min()),
        max_abs_P=float(np.abs(P).max()),
        max_abs_J=float(np.abs(Jv).max()) if len(Jv) else 0.0,
        P_decrease=float((np.maximum.accumulate(P) - P).max()),
        J_increase=float((Jv - np.minimum.accumulate(Jv)).max()) if len(Jv) else 0.0,
        min_dP=float((dP[good] / ds[good]).min()) if good.any() else 0.0,
        max_dJ=float((dJ[dsJ > 0] / dsJ[dsJ > 0]).max()) if (dsJ > 0).any() else 0.0,
        F_end_defect=abs(profile.F[-1] - profile.total_mass) / profile.total_mass,
        J0=float(Jv[0]) if len(Jv) else math.nan,
        inv_max_e_eta=math.exp(-profile.eta_max),
    )


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class BolCertificate:
    level: int
    component: int
    t: float
    mass: float
    alpha: float
    lhs: float
    rhs: float
    gap: float
    passed: bool
    indeterminate: bool = False
    annular: bool = False
    huber_lhs: float = math.nan
    huber_rhs: float = math.nan
    huber_pass: bool | None = None
    estmax_max: float = math.nan
    estmax_bound: float = math.nan
    estmax_boundary: float = math.nan
    estmax_pass: bool | None = None
    estmax_hypothesis: bool = True

    @property
    def rel_gap(self) -> float:
        return self.gap / self.rhs if self.rhs > 0 else math.inf

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def estmax_check(slc: SubdomainSlice, weight: SingularWeight, w: np.ndarray, mass=None, alpha=None, tol=DEFAULT_TOL):
    """max_ω̄ e^w ≤ (1 − M/(8π(1−α(ω))))^{−2} max_∂ω e^w.

    Returns ``(lhs, bound, boundary_max, passed, hypothesis_ok)``.
    """
    mass = slice_integral(slc, weight, w) if mass is None else mass
    alpha = alpha_of(slc, weight) if alpha is None else alpha
    c = 8 * math.pi * (1 - alpha)
    inside = w[slc.node_mask]
    loop_vals = []
    for lp in slc.loops:
        bary = slc.mesh.barycentric(lp["tris"], lp["points"])
        loop_vals.append((w[slc.mesh.triangles[lp["tris"]]] * bary).sum(axis=1))
    bmax = float(np.max(np.concatenate(loop_vals))) if loop_vals else slc.t
    lhs = math.exp(max(float(inside.max()) if len(inside) else -math.inf, bmax))
    if mass >= c:
        return lhs, math.inf, math.exp(bmax), False, False
    bound = (1 - mass / c) ** -2 * math.exp(bmax)
    return lhs, bound, math.exp(bmax), lhs <= bound * (1 + tol), True


def bol_check(
    slc: SubdomainSlice,
    weight: SingularWeight,
    w: np.ndarray,
    tol: float = DEFAULT_TOL,
    huber: bool = True,
    level: int = 0,
    component: int = 0,
) -> BolCertificate:
    """Bol, Huber and sup-norm certificates for one slice of ``w``."""
    w = np.asarray(w, dtype=float)
    M = slice_integral(slc, weight, w)
    alpha = alpha_of(slc, weight)
    rhs = 0.5 * M * (8 * math.pi * (1 - alpha) - M)
    annular = slc.n_holes > 0
    try:
        L = bol_boundary_integral(slc, weight, w)
    except QuadratureError:
        return BolCertificate(level, component, slc.t, M, alpha, math.nan, rhs, math.nan, False,
                              indeterminate=True, annular=annular)
    lhs = L * L
    gap = lhs - rhs
    passed = gap >= -tol * abs(rhs)
    h_lhs = h_rhs = math.nan
    h_pass = None
    if huber:
        try:
            lift = harmonic_lift(slc, w)
            rule = weight.rule(lift.submesh)
            Mg = float(rule.hw @ np.exp(at_points(lift.submesh, rule, lift.g)))
            h_lhs, h_rhs = lhs, 4 * math.pi * (1 - alpha) * Mg
            h_pass = h_lhs >= h_rhs * (1 - tol)
        except TooCoarseError:
            pass
    e_lhs, e_bound, e_b, e_pass, hyp = estmax_check(slc, weight, w, M, alpha, tol)
    return BolCertificate(
        level, component, slc.t, M, alpha, lhs, rhs, gap, bool(passed), False, annular,
        h_lhs, h_rhs, h_pass, e_lhs, e_bound, e_b, bool(e_pass), hyp,
    )


@dataclass(frozen=True, eq=False)
class SweepResult:
    certificates: tuple
    levels: np.ndarray
    skipped: int

    @property
    def min_gap(self) -> float:
        gaps = [c.gap for c in self.certificates if not c.indeterminate]
        return min(gaps) if gaps else math.nan

    @property
    def all_pass(self) -> bool:
        return all(c.passed for c in self.certificates if not c.indeterminate)

    def rows(self) -> list[tuple]:
        """``level,component,mass,alpha,lhs,rhs,gap,pass`` per certificate."""
        return [
            (c.level, c.component, c.mass, c.alpha, c.lhs, c.rhs, c.gap, int(c.passed))
            for c in self.certificates
        ]


def level_set_sweep(
    solution, n_levels: int = 64, tol: float = DEFAULT_TOL, huber: bool = True, jobs: int = 1
) -> SweepResult:
    """Bol certificates for every component of every level slice of w."""
    weight = solution.weight
    mesh = weight.mesh
    w = solution.w
    levels = level_grid(w, n_levels + 1)[:-1] if n_levels > 1 else level_grid(w, 1)
    tasks = []
    for k, t in enumerate(levels):
        for j, slc in enumerate(extract_level_set(mesh, w, float(t))):
            tasks.append((k, j, slc))

    def run(task):
        k, j, slc = task
        return bol_check(slc, weight, w, tol, huber, k, j)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as ex:
            certs = list(ex.map(run, tasks))
    else:
        certs = [run(t) for t in tasks]
    skipped = sum(1 for c in certs if c.indeterminate)
    return SweepResult(tuple(certs), levels, skipped)


# ---------------------------------------------------------------------------
# eigenfunction rearrangement


@dataclass(frozen=True)
class RearrangedEigenfunction:
    t: np.ndarray
    radius: np.ndarray
    mass: np.ndarray
    energy_original: float
    energy_rearranged: float


def rearrange_eigenfunction(
    phi: np.ndarray, weight: SingularWeight, w: np.ndarray, alpha: float, n_levels: int = 128
) -> RearrangedEigenfunction:
    """Transplant {φ > t} onto the model ball of equal h e^w mass.

    The radius solves mass_ball(1, α, R(t)) = ∫_{φ>t} h e^w, and the radial
    profile φ*(R(t)) = t is piecewise linear in r.
    """
    mesh = weight.mesh
    phi = np.asarray(phi, dtype=float)
    top = float(phi.max())
    t = level_grid(phi, n_levels, lo=0.0, hi=top)
    t[-1] = top
    masses = np.empty(len(t))
    for k, tk in enumerate(t):
        slices = extract_level_set(mesh, phi, float(tk))
        masses[k] = sum(slice_integral(s, weight, w) for s in slices)
    R = radius_for_mass(1.0, alpha, masses)
    order = np.argsort(R)
    R, tt = R[order], t[order]
    dR = np.diff(R)
    dt = np.diff(tt)
    ok = dR > 0
    e_star = float(np.sum(np.pi * (dt[ok] / dR[ok]) ** 2 * (R[1:][ok] ** 2 - R[:-1][ok] ** 2)))
    pos = np.where(phi > 0, phi, 0.0)
    return RearrangedEigenfunction(tt, R, masses[order], energy(mesh, pos), e_star)
