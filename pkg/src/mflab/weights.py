"""Singular weights h = exp(𝔥 − 4π Σ α_j G_{p_j}) and their quadrature.

Near an atom p_j the weight behaves like |x − p_j|^{2 α_j}.  The factor is
split off analytically: h = exp(S) Π |x − p_j|^{2 α_j} with S smooth, where
S = 𝔥 − 4π Σ α_j r_j and r_j is the regular part of the Green function.
Integrals of h times smooth functions use a symmetric degree-4 rule on
ordinary triangles and a Duffy/polar product rule (Gauss-Jacobi in the
radial variable) on triangles with an atom at a vertex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse.linalg as spla
from scipy.special import roots_jacobi, roots_legendre

from .fem import stiffness_matrix
from .geometry import PlanarDomain, SubdomainSlice, TriangleMesh, build_mesh, fill_holes

FOUR_PI = 4.0 * math.pi

# symmetric 6-point rule, exact for polynomials of degree 4
_D4_A = (0.445948490915965, 0.091576213509771)
_D4_W = (0.223381589678011, 0.109951743655322)


def _dunavant4():
    bary, wts = [], []
    for a, w in zip(_D4_A, _D4_W):
        b = 1.0 - 2.0 * a
        for perm in ((a, a, b), (a, b, a), (b, a, a)):
            bary.append(perm)
            wts.append(w)
    return np.array(bary), np.array(wts)


D4_BARY, D4_WEIGHTS = _dunavant4()
N_RADIAL = 6
N_ANGULAR = 6
ANGULAR_PANELS = 8
# regular triangles closer to an atom than SPLIT_RATIO times their diameter
# are subdivided (at most MAX_SPLIT times) before the 6-point rule is applied
SPLIT_RATIO = 2.0
MAX_SPLIT = 12
_SUB = np.array(
    [
        [[1, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]],
        [[0.5, 0.5, 0], [0, 1, 0], [0, 0.5, 0.5]],
        [[0.5, 0, 0.5], [0, 0.5, 0.5], [0, 0, 1]],
        [[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]],
    ]
)


def _near_atom_split(corners: np.ndarray, atoms: np.ndarray):
    """Subdivide triangles that are large relative to their atom distance.

    Returns ``(parent, cb)`` with ``cb[k]`` the corners of piece k in the
    barycentric coordinates of triangle ``parent[k]``.
    """
    n = len(corners)
    parent = np.arange(n)
    cb = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if not len(atoms):
        return parent, cb
    done_p, done_c = [], []
    for _ in range(MAX_SPLIT):
        phys = np.einsum("kij,kjd->kid", cb, corners[parent])
        cen = phys.mean(axis=1)
        diam = np.max(np.linalg.norm(phys - np.roll(phys, 1, axis=1), axis=2), axis=1)
        dist = np.min(np.linalg.norm(cen[:, None, :] - atoms[None, :, :], axis=2), axis=1)
        split = diam * SPLIT_RATIO > dist
        done_p.append(parent[~split])
        done_c.append(cb[~split])
        if not split.any():
            break
        parent = np.repeat(parent[split], 4)
        cb = np.einsum("sij,kjl->ksil", _SUB, cb[split]).reshape(-1, 3, 3)
    else:
        done_p.append(parent)
        done_c.append(cb)
    return np.concatenate(done_p), np.concatenate(done_c)


class HypothesisError(ValueError):
    """The positive singular mass is too large: Σ_{α_j<0} (−α_j) must be < 1."""


@dataclass(frozen=True)
class Atom:
    x: float
    y: float
    alpha: float

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha <= -1.0 or self.alpha == 0.0:
            raise ValueError(f"atom strength must lie in (-1, inf) minus 0, got {self.alpha}")

    @property
    def point(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def distinguished(self) -> bool:
        """Positive singular mass at least 2π, i.e. α ≤ −1/2."""
        return self.alpha <= -0.5


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite sum of Dirac atoms 4π α_j δ_{p_j}; negative α_j feed μ+."""

    atoms: tuple[Atom, ...] = ()

    def __post_init__(self):
        atoms = tuple(a if isinstance(a, Atom) else Atom(*a) for a in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        pts = {(a.x, a.y) for a in atoms}
        if len(pts) != len(atoms):
            raise ValueError("atom locations must be pairwise distinct")
        if self.alpha_total >= 1.0:
            raise HypothesisError(
                f"positive singular mass too large: sum of -alpha_j over negative atoms is "
                f"{self.alpha_total:.6g} >= 1 (need mu+(Omega) < 4*pi)"
            )

    @classmethod
    def from_list(cls, atoms: Sequence) -> "AtomicMeasure":
        return cls(tuple(a if isinstance(a, Atom) else Atom(*a) for a in atoms))

    @property
    def alpha_total(self) -> float:
        """α(Ω) = Σ_{α_j<0} (−α_j)."""
        return float(sum(-a.alpha for a in self.atoms if a.alpha < 0))

    @property
    def mu_plus(self) -> float:
        return FOUR_PI * self.alpha_total

    @property
    def mu_minus(self) -> float:
        return FOUR_PI * float(sum(a.alpha for a in self.atoms if a.alpha > 0))

    @property
    def distinguished(self) -> Atom | None:
        for a in self.atoms:
            if a.distinguished:
                return a
        return None

    def check_domain(self, domain: PlanarDomain) -> None:
        for a in self.atoms:
            pt = a.point[None, :]
            if not domain.contains(pt)[0] or domain.boundary_distance(pt)[0] <= 1e-12:
                raise ValueError(f"atom at ({a.x}, {a.y}) is not strictly inside the domain")

    def grading_centers(self, domain: PlanarDomain, floor: float | None = None) -> list:
        """Mesh grading centers; distinguished atoms get twice the grading depth."""
        diam = domain.diameter
        floor = 1e-4 * diam if floor is None else floor
        out = []
        for a in self.atoms:
            f = floor * floor / diam if a.distinguished else floor
            out.append(((a.x, a.y), 1.0 / (1.0 + abs(a.alpha)), f))
        return out


def thresholds(alpha: float) -> tuple[float, float]:
    """(4π(1−α), 8π(1−α))."""
    return 4 * math.pi * (1 - alpha), 8 * math.pi * (1 - alpha)


def graded_mesh(domain: PlanarDomain, measure: AtomicMeasure, h_max: float) -> TriangleMesh:
    """Mesh of ``domain`` graded at every atom (each atom becomes a node)."""
    measure.check_domain(domain)
    return build_mesh(domain, h_max, measure.grading_centers(domain))


# ---------------------------------------------------------------------------
# Green functions


def green_disk(p, x) -> np.ndarray:
    """Dirichlet Green function of the unit disk, (1/2π) log(|1 − x p̄| / |x − p|)."""
    p = complex(p[0], p[1])
    if abs(p) >= 1:
        raise ValueError("pole must lie strictly inside the unit disk")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = x[:, 0] + 1j * x[:, 1]
    d = np.abs(z - p)
    if np.any(d == 0):
        raise ZeroDivisionError("Green function evaluated at its pole")
    return np.log(np.abs(1 - z * np.conj(p)) / d) / (2 * math.pi)


def green_regular_disk(p, x) -> np.ndarray:
    """Regular part r_p(x) = (1/2π) log|1 − x p̄| of the disk Green function."""
    p = complex(p[0], p[1])
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = x[:, 0] + 1j * x[:, 1]
    return np.log(np.abs(1 - z * np.conj(p))) / (2 * math.pi)


def harmonic_extension(mesh: TriangleMesh, boundary_values: np.ndarray) -> np.ndarray:
    """Discrete-harmonic P1 field with the given values at boundary nodes."""
    K = stiffness_matrix(mesh)
    b = mesh.boundary_nodes
    i = mesh.interior_nodes
    out = np.zeros(mesh.n_nodes)
    out[b] = boundary_values
    if len(i):
        rhs = -(K[i][:, b] @ out[b])
        out[i] = spla.spsolve(K[i][:, i].tocsc(), rhs)
    return out


def green_regular_fem(mesh: TriangleMesh, p) -> np.ndarray:
    """Nodal P1 regular part r_p: harmonic, equal to (1/2π) log|x − p| on ∂Ω."""
    p = np.asarray(p, dtype=float)
    xb = mesh.nodes[mesh.boundary_nodes]
    data = np.log(np.hypot(xb[:, 0] - p[0], xb[:, 1] - p[1])) / (2 * math.pi)
    return harmonic_extension(mesh, data)


def green_fem(mesh: TriangleMesh, p) -> np.ndarray:
    """Nodal Green function −(1/2π) log|x − p| + r_p (+inf at a node equal to p)."""
    p = np.asarray(p, dtype=float)
    if mesh.domain is not None:
        pt = p[None, :]
        if not mesh.domain.contains(pt)[0] or mesh.domain.boundary_distance(pt)[0] <= 1e-12:
            raise ValueError(f"pole {tuple(p)} is not strictly inside the domain")
    r = green_regular_fem(mesh, p)
    d = np.hypot(mesh.nodes[:, 0] - p[0], mesh.nodes[:, 1] - p[1])
    with np.errstate(divide="ignore"):
        return -np.log(d) / (2 * math.pi) + r


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True, eq=False)
class WeightedRule:
    """Quadrature for ∫ h f dx over a set of triangles.

    ``hw`` already contains the factor h (including the exact treatment of
    atom singularities), so ∫ h f ≈ Σ hw_q f(x_q).  ``tri`` and ``bary``
    locate each point in the triangle list the rule was built for.
    """

    points: np.ndarray
    tri: np.ndarray
    bary: np.ndarray
    hw: np.ndarray

    def interpolate(self, triangles: np.ndarray, values: np.ndarray) -> np.ndarray:
        return (values[triangles[self.tri]] * self.bary).sum(axis=1)


def _duffy_rule(alpha: float, panels: int = 1):
    """Nodes (ξ, τ) and weights on [0,1]² for ∫∫ ξ^{2α+1} f(ξ, τ) dξ dτ.

    τ uses composite Gauss-Legendre on ``panels`` equal panels.
    """
    xj, wj = roots_jacobi(N_RADIAL, 0.0, 2 * alpha + 1)
    xi = 0.5 * (xj + 1)
    wxi = wj / 2 ** (2 * alpha + 2)
    xl, wl = roots_legendre(N_ANGULAR)
    eta = ((0.5 * (xl + 1))[None, :] + np.arange(panels)[:, None]).ravel() / panels
    weta = np.tile(0.5 * wl / panels, panels)
    XI, ETA = np.meshgrid(xi, eta, indexing="ij")
    W = np.outer(wxi, weta)
    return XI.ravel(), ETA.ravel(), W.ravel()


@dataclass(frozen=True, eq=False)
class SingularWeight:
    """h(x) = exp(S(x)) Π_j |x − p_j|^{2 α_j} with S = 𝔥 − 4π Σ α_j r_j."""

    mesh: TriangleMesh
    measure: AtomicMeasure
    harmonic_part: np.ndarray | None = None
    green_table: tuple = ()  # nodal regular parts r_j, one per atom (polygon domains)
    atom_nodes: tuple = ()

    @property
    def atoms(self) -> tuple[Atom, ...]:
        return self.measure.atoms

    @property
    def alpha_total(self) -> float:
        return self.measure.alpha_total

    @cached_property
    def _smooth_nodal(self) -> np.ndarray | None:
        parts = []
        if self.harmonic_part is not None:
            parts.append(np.asarray(self.harmonic_part, dtype=float))
        for a, r in zip(self.atoms, self.green_table):
            parts.append(-FOUR_PI * a.alpha * r)
        return np.sum(parts, axis=0) if parts else None

    @property
    def _disk(self) -> bool:
        return self.mesh.domain is not None and self.mesh.domain.is_disk

    def log_smooth(self, x: np.ndarray) -> np.ndarray:
        """S(x), the smooth factor of log h."""
        x = np.atleast_2d(x)
        out = np.zeros(len(x))
        if self._disk:
            for a in self.atoms:
                out -= FOUR_PI * a.alpha * green_regular_disk(a.point, x)
            if self.harmonic_part is not None:
                out += self.mesh.interpolate(self.harmonic_part, x)
        elif self._smooth_nodal is not None:
            out += self.mesh.interpolate(self._smooth_nodal, x)
        return out

    def log_h(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = self.log_smooth(x)
        with np.errstate(divide="ignore"):
            for a in self.atoms:
                out = out + 2 * a.alpha * np.log(np.hypot(x[:, 0] - a.x, x[:, 1] - a.y))
        return out

    def h(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_h(x))

    def nodal_log_h(self, mesh: TriangleMesh | None = None) -> np.ndarray:
        """log h at mesh nodes (−inf or +inf at atom nodes)."""
        mesh = self.mesh if mesh is None else mesh
        return self.log_h(mesh.nodes)

    def rule_for_triangles(self, corners: np.ndarray) -> WeightedRule:
        """Weighted rule on triangles given by corner coordinates (M, 3, 2)."""
        corners = np.asarray(corners, dtype=float)
        m = len(corners)
        d1 = corners[:, 1] - corners[:, 0]
        d2 = corners[:, 2] - corners[:, 0]
        area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        # which atom (if any) sits at which corner
        atom_of = -np.ones(m, dtype=np.int64)
        corner_of = np.zeros(m, dtype=np.int64)
        for j, a in enumerate(self.atoms):
            hit = np.abs(corners - a.point[None, None, :]).max(axis=2) <= 1e-13
            rows, cols = np.nonzero(hit)
            atom_of[rows] = j
            corner_of[rows] = cols
        reg = np.nonzero(atom_of < 0)[0]
        pts, tri, bary, geo = [], [], [], []
        if len(reg):
            atom_pts = np.array([a.point for a in self.atoms]).reshape(-1, 2)
            par, cb = _near_atom_split(corners[reg], atom_pts)
            # sub-triangle area fraction is 4^{-depth}: |det cb|
            frac = np.abs(np.linalg.det(cb))
            b = np.einsum("qj,kji->kqi", D4_BARY, cb)
            pts.append(np.einsum("kqi,kid->kqd", b, corners[reg][par]).reshape(-1, 2))
            tri.append(np.repeat(reg[par], 6))
            bary.append(b.reshape(-1, 3))
            geo.append(((area[reg][par] * frac)[:, None] * D4_WEIGHTS[None, :]).ravel())
        sing_factor = []
        sing_slices = []
        for j, a in enumerate(self.atoms):
            sel = np.nonzero(atom_of == j)[0]
            if not len(sel):
                continue
            XI, TAU, W = _duffy_rule(a.alpha, ANGULAR_PANELS)
            c = corner_of[sel]
            P = corners[sel, c]
            A = corners[sel, (c + 1) % 3]
            B = corners[sel, (c + 2) % 3]
            # polar coordinates about the atom: θ sweeps from A to B, r = ξ R(θ)
            ea, eb = A - P, B - P
            th_a = np.arctan2(ea[:, 1], ea[:, 0])
            sweep = np.arctan2(ea[:, 0] * eb[:, 1] - ea[:, 1] * eb[:, 0], (ea * eb).sum(axis=1))
            theta = th_a[:, None] + sweep[:, None] * TAU[None, :]
            u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
            e = B - A
            cross_ae = ea[:, 0] * e[:, 1] - ea[:, 1] * e[:, 0]
            R = cross_ae[:, None] / (u[..., 0] * e[:, None, 1] - u[..., 1] * e[:, None, 0])
            x = P[:, None, :] + (XI[None, :] * R)[..., None] * u
            hit = P[:, None, :] + R[..., None] * u
            ETA = ((hit - A[:, None, :]) * e[:, None, :]).sum(axis=2) / (e * e).sum(axis=1)[:, None]
            n = len(XI)
            bq = np.zeros((len(sel), n, 3))
            rows = np.arange(len(sel))[:, None]
            cols = np.arange(n)[None, :]
            bq[rows, cols, c[:, None]] = 1 - XI[None, :]
            bq[rows, cols, ((c + 1) % 3)[:, None]] = XI[None, :] * (1 - ETA)
            bq[rows, cols, ((c + 2) % 3)[:, None]] = XI[None, :] * ETA
            pts.append(x.reshape(-1, 2))
            tri.append(np.repeat(sel, n))
            bary.append(bq.reshape(-1, 3))
            # r^{2α} r dr dθ = R^{2α+2} ξ^{2α+1} dξ dθ; ξ^{2α+1} is inside W
            g = np.abs(sweep)[:, None] * W[None, :] * R ** (2 * a.alpha + 2)
            geo.append(g.ravel())
            start = sum(len(p) for p in pts[:-1])
            sing_slices.append((start, start + g.size, j))
        if not pts:
            return WeightedRule(np.empty((0, 2)), np.empty(0, int), np.empty((0, 3)), np.empty(0))
        points = np.concatenate(pts)
        tri = np.concatenate(tri)
        bary = np.concatenate(bary)
        geo = np.concatenate(geo)
        logh = self.log_smooth(points)
        skip = np.full(len(points), -1)
        for s0, s1, j in sing_slices:
            skip[s0:s1] = j
        for j, a in enumerate(self.atoms):
            d = np.hypot(points[:, 0] - a.x, points[:, 1] - a.y)
            use = skip != j
            logh[use] += 2 * a.alpha * np.log(d[use])
        hw = geo * np.exp(logh)
        if not np.all(np.isfinite(hw)):
            bad = tri[np.argmax(~np.isfinite(hw))]
            raise FloatingPointError(f"non-finite weight in quadrature on triangle {bad}")
        return WeightedRule(points, tri, bary, hw)

    def sub_rule(self, mesh: TriangleMesh, owner: np.ndarray, corner_bary: np.ndarray) -> WeightedRule:
        """Weighted rule on sub-triangles of ``mesh`` triangles.

        ``owner[k]`` is the parent triangle of sub-triangle k and
        ``corner_bary[k]`` (3, 3) the barycentric coordinates of its corners;
        the returned rule is expressed in parent triangles and coordinates.
        """
        parent = mesh.nodes[mesh.triangles[owner]]
        corners = np.einsum("kvj,kjd->kvd", corner_bary, parent)
        r = self.rule_for_triangles(corners)
        bary = np.einsum("qv,qvj->qj", r.bary, corner_bary[r.tri])
        return WeightedRule(r.points, owner[r.tri], bary, r.hw)

    def rule(self, mesh: TriangleMesh | None = None) -> WeightedRule:
        mesh = self.mesh if mesh is None else mesh
        return self.rule_for_triangles(mesh.nodes[mesh.triangles])

    @cached_property
    def base_rule(self) -> WeightedRule:
        return self.rule(self.mesh)

    def total_mass(self) -> float:
        """∫_Ω h dx."""
        return float(self.base_rule.hw.sum())

    def green_values(self) -> list[np.ndarray]:
        """Nodal Green function G_{p_j} of every atom (+inf at the atom node)."""
        out = []
        for j, a in enumerate(self.atoms):
            d = np.hypot(self.mesh.nodes[:, 0] - a.x, self.mesh.nodes[:, 1] - a.y)
            if self._disk:
                reg = green_regular_disk(a.point, self.mesh.nodes)
            else:
                reg = self.green_table[j]
            with np.errstate(divide="ignore"):
                vals = -np.log(d) / (2 * math.pi) + reg
            out.append(vals)
        return out


def _atom_nodes(mesh: TriangleMesh, measure: AtomicMeasure) -> tuple[int, ...]:
    out = []
    for a in measure.atoms:
        d = np.hypot(mesh.nodes[:, 0] - a.x, mesh.nodes[:, 1] - a.y)
        k = int(np.argmin(d))
        if d[k] > 1e-13:
            raise ValueError(
                f"atom at ({a.x}, {a.y}) is not a mesh node; build the mesh with graded_mesh"
            )
        out.append(k)
    return tuple(out)


def build_weight(
    mesh: TriangleMesh, measure: AtomicMeasure, harmonic_part: np.ndarray | None = None
) -> SingularWeight:
    """Singular weight on ``mesh``; atoms must be mesh nodes."""
    if measure.alpha_total >= 1.0:
        raise HypothesisError("sum of -alpha_j over negative atoms must be < 1")
    if mesh.domain is not None:
        measure.check_domain(mesh.domain)
    nodes = _atom_nodes(mesh, measure)
    table = ()
    if mesh.domain is None or not mesh.domain.is_disk:
        table = tuple(green_regular_fem(mesh, a.point) for a in measure.atoms)
    if harmonic_part is not None:
        harmonic_part = np.asarray(harmonic_part, dtype=float)
        if harmonic_part.shape != (mesh.n_nodes,):
            raise ValueError("harmonic part must have one value per node")
    return SingularWeight(mesh, measure, harmonic_part, table, nodes)


def alpha_of(slc: SubdomainSlice, weight: SingularWeight) -> float:
    """α(ω) = μ+(ω̃)/4π; atoms on the boundary of ω̃ count as inside."""
    filled = slc if slc.filled else fill_holes(slc)
    mesh = slc.mesh
    inside = filled.node_mask | (filled.hole_nodes if filled.hole_nodes is not None else False)
    total = 0.0
    for a in weight.atoms:
        if a.alpha >= 0:
            continue
        d = np.hypot(mesh.nodes[:, 0] - a.x, mesh.nodes[:, 1] - a.y)
        k = int(np.argmin(d))
        if d[k] <= 1e-13:
            hit = inside[k]
            if not hit and slc.field[k] == slc.t:
                nb = mesh.edges[(mesh.edges == k).any(axis=1)].ravel()
                hit = bool(inside[nb].any())
        else:
            tri, bary = mesh.locate(a.point[None, :])
            hit = bool((filled.tri_frac[tri] > 0)[0]) and bool(
                (inside[mesh.triangles[tri[0]]] * bary[0]).sum() > 0.5
            )
        if hit:
            total += -a.alpha
    return total
