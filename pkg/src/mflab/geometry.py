"""Planar domains, graded triangulations and level-set slices.

Domains are either the unit disk or a simple polygon.  Meshes are built by
greedy thinning of a candidate point cloud (hexagonal lattice plus polar
rings around grading centers) followed by a Delaunay triangulation.  Level
sets of P1 fields are extracted exactly: on every triangle the superlevel set
{φ > t} is the intersection with a half-plane, so fractions, crossing points
and sub-triangulations are computed in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from matplotlib.path import Path
from matplotlib.tri import Triangulation
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, cKDTree

MESH_HEADER = "MFLAB-MESH 1"
DEFAULT_FLOOR = 1e-4


class GeometryError(ValueError):
    """Invalid domain or mesh input."""


class RefinementError(GeometryError):
    """The requested mesh size cannot resolve the domain."""


class QuadratureError(ArithmeticError):
    """A boundary integrand evaluated to a non-finite value."""


# ---------------------------------------------------------------------------
# domains


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 != 0 and d3 * d4 != 0:
        return True

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    return (
        (d1 == 0 and on_seg(q1, q2, p1))
        or (d2 == 0 and on_seg(q1, q2, p2))
        or (d3 == 0 and on_seg(p1, p2, q1))
        or (d4 == 0 and on_seg(p1, p2, q2))
    )


def polygon_signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class PlanarDomain:
    """A simply-connected planar domain.

    ``kind`` is ``"unit-disk"`` or ``"simple-polygon"``; polygon vertices are
    stored counterclockwise.
    """

    kind: str
    vertices: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind == "unit-disk":
            if self.vertices:
                raise GeometryError("unit-disk takes no vertices")
            return
        if self.kind != "simple-polygon":
            raise GeometryError(f"unknown domain kind {self.kind!r}")
        pts = np.asarray(self.vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise GeometryError("polygon needs at least three 2D vertices")
        n = len(pts)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                    raise GeometryError("polygon is self-intersecting")
        if len({tuple(p) for p in self.vertices}) != n:
            raise GeometryError("polygon has repeated vertices")
        area = polygon_signed_area(pts)
        if area == 0.0:
            raise GeometryError("polygon has zero area")
        if area < 0:
            object.__setattr__(self, "vertices", tuple(map(tuple, pts[::-1].tolist())))
        for theta in self.corner_angles:
            if not (0.0 < theta < 2 * math.pi) or abs(theta - math.pi) < 1e-12:
                raise GeometryError(f"inadmissible corner angle {theta!r}")

    @classmethod
    def unit_disk(cls) -> "PlanarDomain":
        return cls("unit-disk")

    @classmethod
    def polygon(cls, vertices: Sequence[Sequence[float]]) -> "PlanarDomain":
        return cls("simple-polygon", tuple((float(x), float(y)) for x, y in vertices))

    @classmethod
    def unit_square(cls) -> "PlanarDomain":
        return cls.polygon([(0, 0), (1, 0), (1, 1), (0, 1)])

    @property
    def is_disk(self) -> bool:
        return self.kind == "unit-disk"

    @cached_property
    def corner_angles(self) -> tuple[float, ...]:
        if self.is_disk:
            return ()
        pts = np.asarray(self.vertices)
        out = []
        n = len(pts)
        for i in range(n):
            e_in = pts[i] - pts[i - 1]
            e_out = pts[(i + 1) % n] - pts[i]
            turn = math.atan2(
                e_in[0] * e_out[1] - e_in[1] * e_out[0], e_in[0] * e_out[0] + e_in[1] * e_out[1]
            )
            out.append(math.pi - turn)
        return tuple(out)

    @cached_property
    def area(self) -> float:
        if self.is_disk:
            return math.pi
        return polygon_signed_area(np.asarray(self.vertices))

    @cached_property
    def diameter(self) -> float:
        if self.is_disk:
            return 2.0
        pts = np.asarray(self.vertices)
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    @cached_property
    def _path(self) -> Path:
        return Path(np.asarray(self.vertices))

    def contains(self, points: np.ndarray, radius: float = 0.0) -> np.ndarray:
        """Point-in-domain test (closed domain when ``radius`` is 0)."""
        points = np.atleast_2d(points)
        if self.is_disk:
            return np.hypot(points[:, 0], points[:, 1]) <= 1.0 + 1e-12 - radius
        inside = self._path.contains_points(points)
        d = self.boundary_distance(points)
        return (inside & (d >= radius)) | (d <= 1e-12)

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        if self.is_disk:
            return np.abs(1.0 - np.hypot(points[:, 0], points[:, 1]))
        pts = np.asarray(self.vertices)
        a = pts
        b = np.roll(pts, -1, axis=0)
        ab = b - a
        ap = points[:, None, :] - a[None, :, :]
        s = np.clip((ap * ab[None]).sum(-1) / (ab**2).sum(-1)[None], 0.0, 1.0)
        proj = a[None] + s[..., None] * ab[None]
        return np.sqrt(((points[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)

    def bounding_box(self) -> tuple[float, float, float, float]:
        if self.is_disk:
            return (-1.0, -1.0, 1.0, 1.0)
        pts = np.asarray(self.vertices)
        return (*pts.min(axis=0), *pts.max(axis=0))

    def to_dict(self) -> dict:
        if self.is_disk:
            return {"kind": self.kind}
        return {"kind": self.kind, "vertices": [list(v) for v in self.vertices]}


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class ParentLink:
    """Embedding of a sub-triangulation into the mesh it was cut from."""

    mesh: "TriangleMesh"
    triangle: np.ndarray  # parent triangle of every sub-triangle
    interp: sp.csr_matrix  # parent nodal values -> sub nodal values (exact for P1)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    grading_centers: tuple = ()
    h_max: float = float("nan")
    domain: PlanarDomain | None = None
    parent: ParentLink | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the three barycentric hat functions, shape (M, 3, 2)."""
        p = self.nodes[self.triangles]
        two_a = 2.0 * self.signed_areas
        g = np.empty((len(p), 3, 2))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            g[:, k, 0] = (p[:, i, 1] - p[:, j, 1]) / two_a
            g[:, k, 1] = (p[:, j, 0] - p[:, i, 0]) / two_a
        return g

    @cached_property
    def diameters(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.sqrt((e**2).sum(-1)).max(axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        key = np.sort(local, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        tri_edges = inverse.reshape(-1, 3)
        counts = np.bincount(inverse, minlength=len(edges))
        return edges, tri_edges, counts

    @property
    def edges(self) -> np.ndarray:
        """Unique edges (E, 2) with sorted endpoints."""
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        """Edge index of local edges (v0,v1), (v1,v2), (v2,v0) of every triangle."""
        return self._edge_data[1]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Boundary edges oriented with the domain on the left, shape (B, 2)."""
        counts = self._edge_data[2]
        t = self.triangles
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        mask = counts[self.triangle_edges] == 1
        return local[mask]

    @cached_property
    def boundary_edge_triangles(self) -> np.ndarray:
        counts = self._edge_data[2]
        mask = counts[self.triangle_edges] == 1
        return np.nonzero(mask)[0]

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.n_nodes, dtype=bool)
        m[self.boundary_nodes] = True
        return m

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.nonzero(~self.boundary_mask)[0]

    @cached_property
    def triangle_adjacency(self) -> sp.csr_matrix:
        """Triangle-triangle adjacency through shared edges."""
        te = self.triangle_edges.reshape(-1)
        tri = np.repeat(np.arange(self.n_triangles), 3)
        inc = sp.csr_matrix((np.ones(len(te)), (tri, te)), shape=(self.n_triangles, len(self.edges)))
        adj = (inc @ inc.T).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        return adj

    @cached_property
    def _trifinder(self):
        return Triangulation(self.nodes[:, 0], self.nodes[:, 1], self.triangles).get_trifinder()

    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    def barycentric(self, tri: np.ndarray, points: np.ndarray) -> np.ndarray:
        p = self.nodes[self.triangles[tri]]
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        v2 = points - p[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle and barycentric coordinates of ``points``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tri = np.asarray(self._trifinder(points[:, 0], points[:, 1]), dtype=np.int64)
        missing = np.nonzero(tri < 0)[0]
        if len(missing):
            k = min(12, self.n_triangles)
            _, cand = self._centroid_tree.query(points[missing], k=k)
            cand = np.atleast_2d(cand)
            best = np.empty(len(missing), dtype=np.int64)
            for r, i in enumerate(missing):
                b = self.barycentric(cand[r], np.repeat(points[i : i + 1], k, axis=0))
                best[r] = cand[r][np.argmax(b.min(axis=1))]
            tri[missing] = best
        return tri, self.barycentric(tri, points)

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        tri, bary = self.locate(points)
        return (np.asarray(values)[self.triangles[tri]] * bary).sum(axis=1)

    def check(self) -> None:
        """Raise ``GeometryError`` unless the TriangleMesh invariants hold."""
        if np.any(self.signed_areas <= 0):
            raise GeometryError("mesh has non-positive triangle areas")
        counts = self._edge_data[2]
        if counts.max() > 2:
            raise GeometryError("mesh is not conforming (edge shared by >2 triangles)")
        bnodes = np.unique(self.boundary_edges)
        if not np.array_equal(bnodes, np.sort(self.boundary_nodes)):
            raise GeometryError("boundary node set does not match boundary edges")
        if self.domain is not None:
            mid = self.nodes[self.boundary_edges].mean(axis=1)
            ends = self.nodes[bnodes]
            tol = 1e-9 * max(1.0, self.domain.diameter)
            if self.domain.is_disk:
                if np.abs(np.hypot(ends[:, 0], ends[:, 1]) - 1.0).max() > 1e-12:
                    raise GeometryError("disk boundary nodes off the unit circle")
            elif self.domain.boundary_distance(mid).max() > tol:
                raise GeometryError("boundary edges do not trace the polygon")


def _size_function(domain: PlanarDomain, h_max: float, centers, floor: float):
    pts = np.array([c[0] for c in centers], dtype=float).reshape(-1, 2)
    betas = np.array([c[1] for c in centers], dtype=float)
    floors = np.array([c[2] if len(c) > 2 else floor for c in centers], dtype=float)

    def size(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        h = np.full(len(x), h_max)
        for p, b, f in zip(pts, betas, floors):
            d = np.maximum(np.hypot(x[:, 0] - p[0], x[:, 1] - p[1]), f)
            h = np.minimum(h, h_max * np.minimum(1.0, d**b))
        return h

    return size


def _place_on_curve(curve: Callable[[np.ndarray], np.ndarray], length: float, size, closed: bool):
    """Points on a parametrized curve (parameter in [0,1]) spaced by ``size``."""
    # metric length m(s) = ∫ ds/h, sampled adaptively by marching
    params = [0.0]
    s = 0.0
    while s < 1.0:
        h = size(curve(np.array([s])))[0]
        s = min(1.0, s + 0.125 * h / length)
        params.append(s)
    params = np.array(params)
    xy = curve(params)
    inv_h = 1.0 / size(xy)
    seg = np.hypot(*np.diff(xy, axis=0).T)
    m = np.concatenate([[0.0], np.cumsum(0.5 * (inv_h[1:] + inv_h[:-1]) * seg)])
    n = max(3 if not closed else 8, int(round(m[-1])))
    targets = np.linspace(0.0, m[-1], n + 1)
    sk = np.interp(targets, m, params)
    sk[0], sk[-1] = 0.0, 1.0
    out = curve(sk)
    return out[:-1] if closed else out


def _boundary_points(domain: PlanarDomain, size) -> np.ndarray:
    if domain.is_disk:
        def circle(s):
            return np.stack([np.cos(2 * np.pi * s), np.sin(2 * np.pi * s)], axis=1)

        return _place_on_curve(circle, 2 * np.pi, size, closed=True)
    pts = np.asarray(domain.vertices)
    chunks = []
    for i in range(len(pts)):
        a, b = pts[i], pts[(i + 1) % len(pts)]
        length = float(np.hypot(*(b - a)))

        def line(s, a=a, b=b):
            return a[None, :] + np.asarray(s)[:, None] * (b - a)[None, :]

        chunks.append(_place_on_curve(line, length, size, closed=False)[:-1])
    return np.concatenate(chunks)


def _hex_lattice(bbox, spacing: float) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    dy = spacing * math.sqrt(3) / 2
    ys = np.arange(y0, y1 + dy, dy)
    rows = []
    for k, y in enumerate(ys):
        off = 0.5 * spacing * (k % 2)
        xs = np.arange(x0 + off, x1 + spacing, spacing)
        rows.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    return np.concatenate(rows)


def _ring_points(center, beta, floor, h_max, r_max) -> np.ndarray:
    golden = math.pi * (3 - math.sqrt(5))
    out = []
    r = floor
    k = 0
    while r < r_max:
        h = h_max * min(1.0, max(r, floor) ** beta)
        n = max(6, int(math.ceil(2 * math.pi * r / h)))
        ang = k * golden + 2 * np.pi * np.arange(n) / n
        out.append(np.stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1))
        if h >= h_max:
            break
        r += h
        k += 1
    return np.concatenate(out) if out else np.empty((0, 2))


def _triangulate(points: np.ndarray, domain: PlanarDomain, hmin: float):
    tri = Delaunay(points).simplices.astype(np.int64)
    p = points[tri]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    neg = area < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    area = np.abs(area)
    keep = area > 1e-10 * hmin * hmin
    if not domain.is_disk:
        keep &= domain._path.contains_points(p.mean(axis=1)) & (
            domain.boundary_distance(p.mean(axis=1)) > 1e-12
        )
    return tri[keep]


def build_mesh(
    domain: PlanarDomain,
    h_max: float,
    grading_centers: Sequence = (),
    floor: float | None = None,
) -> TriangleMesh:
    """Conforming graded triangulation of ``domain``.

    ``grading_centers`` is a sequence of ``(point, exponent)`` or
    ``(point, exponent, floor_radius)``; near each center the target element
    size is ``h_max * dist**exponent`` down to the floor radius.  Every center
    becomes a mesh node.
    """
    if not h_max > 0:
        raise GeometryError("h_max must be positive")
    diam = domain.diameter
    floor = DEFAULT_FLOOR * diam if floor is None else floor
    centers = []
    for c in grading_centers:
        pt = (float(c[0][0]), float(c[0][1]))
        if not domain.contains(np.array([pt]))[0]:
            raise GeometryError(f"grading center {pt} outside the domain")
        centers.append((pt, float(c[1]), float(c[2]) if len(c) > 2 else floor))
    if not domain.is_disk:
        edge_len = np.hypot(*np.diff(np.vstack([domain.vertices, domain.vertices[:1]]), axis=0).T)
        if h_max > 0.5 * edge_len.min():
            raise RefinementError(
                f"h_max={h_max} too large to resolve the shortest polygon edge ({edge_len.min():.3g})"
            )
    elif h_max > 0.5:
        raise RefinementError("h_max too large for the unit disk")

    size = _size_function(domain, h_max, centers, floor)
    bpts = _boundary_points(domain, size)
    forced = [np.array([c[0] for c in centers]).reshape(-1, 2), bpts]

    cand = [_hex_lattice(domain.bounding_box(), h_max)]
    for pt, beta, fl in centers:
        cand.append(_ring_points(pt, beta, fl, h_max, diam))
    cand = np.concatenate(cand)
    hc = size(cand)
    ok = domain.contains(cand) & (domain.boundary_distance(cand) >= 0.6 * hc)
    cand, hc = cand[ok], hc[ok]
    order = np.argsort(hc, kind="stable")
    cand, hc = cand[order], hc[order]

    forced_pts = np.concatenate(forced)
    allpts = np.concatenate([forced_pts, cand])
    tree = cKDTree(allpts)
    alive = np.ones(len(allpts), dtype=bool)
    nf = len(forced_pts)
    c_thin = 0.8
    hf = size(forced_pts)
    for i in range(nf):
        for j in tree.query_ball_point(forced_pts[i], c_thin * hf[i]):
            if j >= nf:
                alive[j] = False
    for i in range(nf, len(allpts)):
        if not alive[i]:
            continue
        for j in tree.query_ball_point(allpts[i], c_thin * hc[i - nf]):
            if j > i:
                alive[j] = False
    points = allpts[alive]
    # exact duplicates (e.g. a center on a boundary point)
    _, uniq = np.unique(np.round(points, 14), axis=0, return_index=True)
    points = points[np.sort(uniq)]

    tri = _triangulate(points, domain, float(size(points).min()))
    used = np.unique(tri)
    remap = -np.ones(len(points), dtype=np.int64)
    remap[used] = np.arange(len(used))
    points = points[used]
    tri = remap[tri]
    mesh0 = TriangleMesh(points, tri, np.array([], dtype=np.int64))
    bnodes = np.unique(mesh0.boundary_edges)
    mesh = TriangleMesh(
        nodes=points,
        triangles=tri,
        boundary_nodes=bnodes,
        grading_centers=tuple(((c[0], c[1]) for c in centers)),
        h_max=float(h_max),
        domain=domain,
    )
    try:
        mesh.check()
    except GeometryError as exc:
        raise RefinementError(f"mesh generation failed: {exc}") from exc
    nb_expected = len(bpts)
    if len(bnodes) != nb_expected:
        raise RefinementError(
            f"boundary recovery failed ({len(bnodes)} boundary nodes, expected {nb_expected})"
        )
    return mesh


def refine_uniform(mesh: TriangleMesh) -> TriangleMesh:
    """Split every triangle into four; disk boundary midpoints go onto the circle."""
    edges = mesh.edges
    mid = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    counts = mesh._edge_data[2]
    on_b = counts == 1
    if mesh.domain is not None and mesh.domain.is_disk:
        r = np.hypot(mid[on_b, 0], mid[on_b, 1])
        mid[on_b] /= r[:, None]
    n = mesh.n_nodes
    nodes = np.vstack([mesh.nodes, mid])
    t = mesh.triangles
    m = mesh.triangle_edges + n  # midpoints of (v0v1), (v1v2), (v2v0)
    tri = np.vstack(
        [
            np.stack([t[:, 0], m[:, 0], m[:, 2]], axis=1),
            np.stack([m[:, 0], t[:, 1], m[:, 1]], axis=1),
            np.stack([m[:, 2], m[:, 1], t[:, 2]], axis=1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
        ]
    )
    bnodes = np.concatenate([mesh.boundary_nodes, n + np.nonzero(on_b)[0]])
    out = TriangleMesh(
        nodes=nodes,
        triangles=tri,
        boundary_nodes=np.sort(bnodes),
        grading_centers=mesh.grading_centers,
        h_max=mesh.h_max / 2,
        domain=mesh.domain,
    )
    out.check()
    return out


def write_mesh(mesh: TriangleMesh, path, comments=()) -> None:
    """Write the text mesh format; ``comments`` become leading ``#`` lines."""
    lines = [f"# {c}" for c in comments] + [MESH_HEADER, f"nodes {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    lines.append(f"boundary {len(mesh.boundary_nodes)}")
    lines += [str(int(b)) for b in mesh.boundary_nodes]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path, domain: PlanarDomain | None = None) -> TriangleMesh:
    with open(path) as fh:
        rows = [r.strip() for r in fh if r.strip() and not r.startswith("#")]
    if rows[0] != MESH_HEADER:
        raise GeometryError(f"not an mflab mesh file: {rows[0]!r}")
    pos = 1

    def section(name):
        nonlocal pos
        tag, count = rows[pos].split()
        if tag != name:
            raise GeometryError(f"expected section {name!r}, got {tag!r}")
        block = rows[pos + 1 : pos + 1 + int(count)]
        pos += 1 + int(count)
        return block

    nodes = np.array([[float(v) for v in r.split()] for r in section("nodes")]).reshape(-1, 2)
    tris = np.array([[int(v) for v in r.split()] for r in section("triangles")], dtype=np.int64)
    bnd = np.array([int(r) for r in section("boundary")], dtype=np.int64)
    return TriangleMesh(nodes, tris.reshape(-1, 3), bnd, domain=domain)


# ---------------------------------------------------------------------------
# level sets


def superlevel_fraction(vals: np.ndarray, t: float) -> np.ndarray:
    """Area fraction of {φ > t} in triangles with vertex values ``vals`` (M, 3)."""
    pos = vals > t
    npos = pos.sum(axis=1)
    frac = (npos == 3).astype(float)
    for want in (1, 2):
        sel = np.nonzero(npos == want)[0]
        if not len(sel):
            continue
        v = vals[sel]
        p = pos[sel]
        odd = np.argmax(p if want == 1 else ~p, axis=1)
        fo = v[np.arange(len(sel)), odd]
        o1 = v[np.arange(len(sel)), (odd + 1) % 3]
        o2 = v[np.arange(len(sel)), (odd + 2) % 3]
        prod = ((fo - t) / (fo - o1)) * ((fo - t) / (fo - o2))
        frac[sel] = prod if want == 1 else 1.0 - prod
    return frac


def clip_superlevel(vals: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Sub-triangles of {φ > t} for triangles with vertex values ``vals``.

    Returns ``(owner, bary)``: for every sub-triangle the row of ``vals`` it
    came from and the barycentric coordinates (3 vertices x 3) of its corners
    in that triangle.  Original vertices come first in every sub-triangle.
    """
    pos = vals > t
    npos = pos.sum(axis=1)
    eye = np.eye(3)
    owners = []
    barys = []
    full = np.nonzero(npos == 3)[0]
    if len(full):
        owners.append(full)
        barys.append(np.broadcast_to(eye, (len(full), 3, 3)).copy())
    for want in (1, 2):
        sel = np.nonzero(npos == want)[0]
        if not len(sel):
            continue
        idx = np.arange(len(sel))
        v = vals[sel]
        odd = np.argmax(pos[sel] if want == 1 else ~pos[sel], axis=1)
        a = odd
        b = (odd + 1) % 3
        c = (odd + 2) % 3
        fa, fb, fc = v[idx, a], v[idx, b], v[idx, c]
        lab = (fa - t) / (fa - fb)
        lac = (fa - t) / (fa - fc)
        Ea, Eb, Ec = eye[a], eye[b], eye[c]
        Xab = (1 - lab)[:, None] * Ea + lab[:, None] * Eb
        Xac = (1 - lac)[:, None] * Ea + lac[:, None] * Ec
        if want == 1:
            owners.append(sel)
            barys.append(np.stack([Ea, Xab, Xac], axis=1))
        else:
            owners += [sel, sel]
            barys += [np.stack([Eb, Ec, Xac], axis=1), np.stack([Eb, Xac, Xab], axis=1)]
    if not owners:
        return np.empty(0, dtype=np.int64), np.empty((0, 3, 3))
    return np.concatenate(owners), np.concatenate(barys)


@dataclass(frozen=True, eq=False)
class SubdomainSlice:
    """One connected component of {φ > t} (optionally hole-filled).

    ``loops`` are closed polylines with the slice on their left; segment ``i``
    of a loop runs from ``points[i]`` to ``points[i+1]`` (cyclically) and lies
    in triangle ``tris[i]``; ``on_boundary[i]`` marks pieces of ∂Ω.
    """

    mesh: TriangleMesh
    field: np.ndarray
    t: float
    node_mask: np.ndarray
    tri_frac: np.ndarray
    loops: tuple = ()
    filled: bool = False
    hole_nodes: np.ndarray | None = None
    container: int | None = None

    @property
    def area(self) -> float:
        return float(np.dot(self.tri_frac, self.mesh.areas))

    @property
    def n_holes(self) -> int:
        return sum(1 for lp in self.loops if polygon_signed_area(lp["points"]) < 0)

    @property
    def perimeter(self) -> float:
        total = 0.0
        for lp in self.loops:
            p = lp["points"]
            total += float(np.hypot(*(np.roll(p, -1, axis=0) - p).T).sum())
        return total

    @property
    def triangles(self) -> np.ndarray:
        return np.nonzero(self.tri_frac > 0)[0]

    def sample_point(self) -> np.ndarray:
        """A point strictly inside the slice."""
        nodes = np.nonzero(self.node_mask)[0]
        best = nodes[np.argmax(self.field[nodes])]
        return self.mesh.nodes[best]

    def submesh(self) -> TriangleMesh:
        """Conforming triangulation of the (unfilled) slice."""
        if self.filled:
            raise GeometryError("submesh of a hole-filled slice is not supported")
        mesh = self.mesh
        tris = np.nonzero(mesh.triangles[:, 0] >= 0)[0]
        vals = self.field[mesh.triangles]
        comp_tri = self.node_mask[mesh.triangles].any(axis=1)
        tris = np.nonzero(comp_tri)[0]
        owner, bary = clip_superlevel(vals[tris], self.t)
        parent_tri = tris[owner]
        # identify sub-vertices: original nodes or edge crossings
        n = mesh.n_nodes
        tv = mesh.triangles[parent_tri]  # (S,3)
        te = mesh.triangle_edges[parent_tri]  # local edge k joins vertex k and k+1
        keys = np.empty((len(parent_tri), 3), dtype=np.int64)
        coef = np.empty((len(parent_tri), 3))
        for v in range(3):
            b = bary[:, v, :]
            nz = (b > 0).sum(axis=1)
            is_node = nz == 1
            k_node = np.argmax(b, axis=1)
            keys[is_node, v] = tv[is_node, k_node[is_node]]
            coef[is_node, v] = 1.0
            e = ~is_node
            if e.any():
                zero = np.argmin(b[e], axis=1)  # vertex not on the edge
                local_edge = (zero + 1) % 3
                keys[e, v] = n + te[e][np.arange(e.sum()), local_edge]
                # weight of the smaller-index endpoint of the edge
                i0 = local_edge
                i1 = (local_edge + 1) % 3
                ends = np.stack([tv[e][np.arange(e.sum()), i0], tv[e][np.arange(e.sum()), i1]], 1)
                w0 = b[e][np.arange(e.sum()), i0]
                w1 = b[e][np.arange(e.sum()), i1]
                coef[e, v] = np.where(ends[:, 0] < ends[:, 1], w0, w1)
        uniq, inv = np.unique(keys.reshape(-1), return_inverse=True)
        inv = inv.reshape(-1, 3)
        rows, cols, data = [], [], []
        edges = mesh.edges
        first_coef = {}
        for k, kk in zip(keys.reshape(-1), coef.reshape(-1)):
            if k >= n and k not in first_coef:
                first_coef[int(k)] = kk
        for r, k in enumerate(uniq):
            if k < n:
                rows.append(r), cols.append(int(k)), data.append(1.0)
            else:
                a, b2 = edges[k - n]
                c0 = first_coef[int(k)]
                rows += [r, r]
                cols += [int(a), int(b2)]
                data += [c0, 1.0 - c0]
        interp = sp.csr_matrix((data, (rows, cols)), shape=(len(uniq), n))
        nodes = interp @ mesh.nodes
        sub = inv
        p = nodes[sub]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        neg = area < 0
        sub[neg] = sub[neg][:, [0, 2, 1]]
        keep = np.abs(area) > 0
        sub, parent_tri = sub[keep], parent_tri[keep]
        tmp = TriangleMesh(nodes, sub, np.array([], dtype=np.int64))
        bnd = np.unique(tmp.boundary_edges)
        return TriangleMesh(
            nodes=nodes,
            triangles=sub,
            boundary_nodes=bnd,
            grading_centers=mesh.grading_centers,
            h_max=mesh.h_max,
            domain=None,
            parent=ParentLink(mesh, parent_tri, interp),
        )


def node_components(mesh: TriangleMesh, mask: np.ndarray) -> tuple[int, np.ndarray]:
    """Components of the masked nodes joined along mesh edges; label −1 off the mask."""
    e = mesh.edges
    both = mask[e[:, 0]] & mask[e[:, 1]]
    ee = e[both]
    g = sp.coo_matrix((np.ones(len(ee)), (ee[:, 0], ee[:, 1])), shape=(mesh.n_nodes,) * 2)
    ncomp, labels = connected_components(g, directed=False)
    labels = np.where(mask, labels, -1)
    # relabel to 0..k-1 in order of first appearance among masked nodes
    seen = {}
    out = -np.ones_like(labels)
    for i in np.nonzero(mask)[0]:
        lab = labels[i]
        if lab not in seen:
            seen[lab] = len(seen)
    remap = np.full(ncomp, -1)
    for k, v in seen.items():
        remap[k] = v
    out[mask] = remap[labels[mask]]
    return len(seen), out


def _edge_crossings(mesh: TriangleMesh, field: np.ndarray, t: float) -> np.ndarray:
    e = mesh.edges
    fa, fb = field[e[:, 0]], field[e[:, 1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (t - fa) / (fb - fa)
    s = np.where(np.isfinite(s), np.clip(s, 0.0, 1.0), 0.5)
    return mesh.nodes[e[:, 0]] + s[:, None] * (mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]])


def _component_loops(mesh, field, t, pos, comp_nodes, crossings):
    """Closed oriented boundary polylines of one component."""
    tv = mesh.triangles
    touch = np.nonzero(comp_nodes[tv].any(axis=1))[0]
    segs = []  # (start_key, end_key, tri, on_boundary)
    cut = touch[~pos[tv[touch]].all(axis=1)]
    for tri in cut:
        vv = tv[tri]
        pp = pos[vv]
        te = mesh.triangle_edges[tri]
        # counterclockwise triangle: leave through the edge going inside -> outside,
        # so the slice stays on the left
        start = next(int(te[k]) for k in range(3) if pp[k] and not pp[(k + 1) % 3])
        end = next(int(te[k]) for k in range(3) if not pp[k] and pp[(k + 1) % 3])
        segs.append((("e", start), ("e", end), int(tri), False))
    bedges = mesh.boundary_edges
    btri = mesh.boundary_edge_triangles
    sel = comp_nodes[bedges].any(axis=1)
    if sel.any():
        lookup = {tuple(sorted(map(int, ed))): k for k, ed in enumerate(mesh.edges)}
        for (a, b), tri in zip(bedges[sel], btri[sel]):
            pa_, pb_ = pos[a], pos[b]
            eid = lookup[tuple(sorted((int(a), int(b))))]
            if pa_ and pb_:
                segs.append((("v", int(a)), ("v", int(b)), int(tri), True))
            elif pa_:
                segs.append((("v", int(a)), ("e", eid), int(tri), True))
            else:
                segs.append((("e", eid), ("v", int(b)), int(tri), True))

    def coord(key):
        return crossings[key[1]] if key[0] == "e" else mesh.nodes[key[1]]

    nxt = {}
    for s in segs:
        if s[0] in nxt:
            raise GeometryError("non-manifold level set (degenerate level)")
        nxt[s[0]] = s
    loops = []
    used = set()
    for s in segs:
        if s[0] in used:
            continue
        pts, tris, onb = [], [], []
        cur = s
        while cur[0] not in used:
            used.add(cur[0])
            pts.append(coord(cur[0]))
            tris.append(cur[2])
            onb.append(cur[3])
            if cur[1] not in nxt:
                raise GeometryError("open level-set polyline")
            cur = nxt[cur[1]]
        loops.append(
            {"points": np.array(pts), "tris": np.array(tris), "on_boundary": np.array(onb)}
        )
    return tuple(loops)


def containment_tree(slices: Sequence[SubdomainSlice]) -> list[int | None]:
    """Index of the smallest slice whose outer boundary encloses each slice."""
    outers = []
    for s in slices:
        lp = max(s.loops, key=lambda l: polygon_signed_area(l["points"]))
        outers.append(Path(lp["points"]))
    parents: list[int | None] = []
    for i, s in enumerate(slices):
        probe = s.sample_point()[None, :]
        best, best_area = None, math.inf
        for j, other in enumerate(slices):
            if j == i:
                continue
            a = polygon_signed_area(outers[j].vertices)
            if a > s.area and a < best_area and outers[j].contains_points(probe)[0]:
                best, best_area = j, a
        parents.append(best)
    return parents


def extract_level_set(mesh: TriangleMesh, field: np.ndarray, t: float) -> list[SubdomainSlice]:
    """Connected components of {field > t} with exact P1 boundaries."""
    field = np.asarray(field, dtype=float)
    if field.shape != (mesh.n_nodes,):
        raise ValueError("field must have one value per mesh node")
    pos = field > t
    if not pos.any():
        return []
    ncomp, labels = node_components(mesh, pos)
    frac_all = superlevel_fraction(field[mesh.triangles], t)
    crossings = _edge_crossings(mesh, field, t)
    tri_label = labels[mesh.triangles].max(axis=1)
    out = []
    for c in range(ncomp):
        comp = labels == c
        frac = np.where(tri_label == c, frac_all, 0.0)
        loops = _component_loops(mesh, field, t, pos, comp, crossings)
        out.append(SubdomainSlice(mesh, field, float(t), comp, frac, loops))
    if len(out) > 1:
        parents = containment_tree(out)
        out = [
            SubdomainSlice(s.mesh, s.field, s.t, s.node_mask, s.tri_frac, s.loops, container=p)
            for s, p in zip(out, parents)
        ]
    return out


def fill_holes(slc: SubdomainSlice) -> SubdomainSlice:
    """ω̃: the slice together with every bounded component of its complement."""
    mesh = slc.mesh
    members = slc.node_mask | (slc.hole_nodes if slc.hole_nodes is not None else False)
    ncomp, labels = node_components(mesh, ~members)
    hole = np.zeros(mesh.n_nodes, dtype=bool)
    for c in range(ncomp):
        nodes = labels == c
        if not mesh.boundary_mask[nodes].any():
            hole |= nodes
    if slc.hole_nodes is not None:
        hole |= slc.hole_nodes
    frac = slc.tri_frac.copy()
    tri_hole = hole[mesh.triangles].any(axis=1)
    frac[tri_hole] = frac[tri_hole] + (1.0 - frac[tri_hole])
    loops = tuple(lp for lp in slc.loops if polygon_signed_area(lp["points"]) > 0)
    return SubdomainSlice(
        mesh, slc.field, slc.t, slc.node_mask, frac, loops, True, hole, slc.container
    )


_GAUSS2 = (0.5 - 0.5 / math.sqrt(3), 0.5 + 0.5 / math.sqrt(3))


def boundary_points_and_weights(slc: SubdomainSlice):
    """Two-point Gauss rule on every boundary segment of ``slc``."""
    pts, wts, tris = [], [], []
    for lp in slc.loops:
        a = lp["points"]
        b = np.roll(a, -1, axis=0)
        length = np.hypot(*(b - a).T)
        for g in _GAUSS2:
            pts.append(a + g * (b - a))
            wts.append(0.5 * length)
            tris.append(lp["tris"])
    if not pts:
        return np.empty((0, 2)), np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(wts), np.concatenate(tris)


def boundary_integral(slc: SubdomainSlice, integrand: Callable[[np.ndarray], np.ndarray]) -> float:
    """Line integral of ``integrand`` over all boundary polylines of ``slc``."""
    pts, wts, _ = boundary_points_and_weights(slc)
    if not len(pts):
        return 0.0
    vals = np.broadcast_to(np.asarray(integrand(pts), dtype=float), (len(pts),))
    bad = ~np.isfinite(vals)
    if bad.any():
        p = pts[np.argmax(bad)]
        raise QuadratureError(f"integrand not finite at boundary point ({p[0]:.6g}, {p[1]:.6g})")
    return float(np.dot(vals, wts))
