import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mflab.geometry import (
    GeometryError,
    PlanarDomain,
    QuadratureError,
    RefinementError,
    boundary_integral,
    build_mesh,
    containment_tree,
    extract_level_set,
    fill_holes,
    read_mesh,
    refine_uniform,
    superlevel_fraction,
    write_mesh,
)

L_SHAPE = [(0, 0), (1, 0), (1, 0.5), (0.5, 0.5), (0.5, 1), (0, 1)]


def radial(mesh, f):
    return f(np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1]))


# ---------------------------------------------------------------------------
# domains and meshes


def test_disk_mesh_nodes_inside_and_boundary_on_circle(disk_mesh):
    r = np.hypot(*disk_mesh.nodes.T)
    assert (r <= 1 + 1e-12).all()
    assert np.abs(r[disk_mesh.boundary_nodes] - 1).max() < 1e-12
    disk_mesh.check()
    assert (disk_mesh.signed_areas > 0).all()


def test_square_grading_scales_with_distance(square):
    h, beta = 0.2, 0.5
    mesh = build_mesh(square, h, [((0.5, 0.5), beta)])
    dv = np.hypot(*(mesh.nodes[mesh.triangles] - 0.5).transpose(2, 0, 1)).max(axis=1)
    near = dv < 0.25
    # Delaunay longest edges reach about 1.7 times the target spacing
    assert (mesh.diameters[near] <= 2 * h * dv[near] ** beta).all()
    assert mesh.diameters[near].mean() < 0.5 * mesh.diameters[dv > 0.5].mean()


def test_l_shape_reflex_corner_recorded():
    dom = PlanarDomain.polygon(L_SHAPE)
    assert max(dom.corner_angles) == pytest.approx(1.5 * math.pi)
    mesh = build_mesh(dom, 0.1)
    mesh.check()
    assert mesh.areas.sum() == pytest.approx(dom.area, rel=1e-12)


def test_polygon_errors():
    with pytest.raises(GeometryError):
        PlanarDomain.polygon([(0, 0), (1, 1), (1, 0), (0, 1)])  # bow tie
    with pytest.raises(GeometryError):
        PlanarDomain.polygon([(0, 0), (0.5, 0), (1, 0), (0, 1)])  # straight corner
    with pytest.raises(RefinementError):
        build_mesh(PlanarDomain.polygon(L_SHAPE), 0.4)


def test_mesh_roundtrip(tmp_path, square_mesh):
    path = tmp_path / "m.txt"
    write_mesh(square_mesh, path, ("comment line",))
    text = path.read_text().splitlines()
    assert text[1] == "MFLAB-MESH 1"
    back = read_mesh(path)
    assert np.array_equal(back.nodes, square_mesh.nodes)
    assert np.array_equal(back.triangles, square_mesh.triangles)
    assert np.array_equal(np.sort(back.boundary_nodes), np.sort(square_mesh.boundary_nodes))


def test_refine_uniform_preserves_area(square_mesh):
    fine = refine_uniform(square_mesh)
    assert fine.n_triangles == 4 * square_mesh.n_triangles
    assert fine.areas.sum() == pytest.approx(1.0, rel=1e-13)
    fine.check()


# ---------------------------------------------------------------------------
# level sets


def test_circle_level_set(disk_mesh):
    f = radial(disk_mesh, lambda r: 1 - r**2)
    (slc,) = extract_level_set(disk_mesh, f, 0.75)
    assert slc.area == pytest.approx(math.pi / 4, rel=1e-2)
    assert slc.perimeter == pytest.approx(math.pi, rel=1e-2)
    assert extract_level_set(disk_mesh, f, float(f.max()) + 1) == []


def test_circle_boundary_integrals(disk_mesh):
    f = radial(disk_mesh, lambda r: 1 - r**2)
    (slc,) = extract_level_set(disk_mesh, f, 0.75)
    assert boundary_integral(slc, lambda x: np.ones(len(x))) == pytest.approx(math.pi, rel=1e-2)
    val = boundary_integral(slc, lambda x: np.hypot(x[:, 0], x[:, 1]))
    assert val == pytest.approx(2 * math.pi * 0.25, rel=2e-2)
    with pytest.raises(QuadratureError):
        boundary_integral(slc, lambda x: np.full(len(x), np.inf))


def test_perimeter_error_decays_under_refinement(disk):
    errs = []
    for h in (0.1, 0.05, 0.025):
        mesh = build_mesh(disk, h)
        (slc,) = extract_level_set(mesh, radial(mesh, lambda r: 1 - r**2), 0.75)
        errs.append(abs(slc.perimeter - math.pi))
    assert errs[0] / errs[1] >= 1.8
    assert errs[1] / errs[2] >= 1.8


def two_bump(x):
    return np.exp(-8 * ((x[:, 0] - 0.5) ** 2 + x[:, 1] ** 2)) + np.exp(-8 * ((x[:, 0] + 0.5) ** 2 + x[:, 1] ** 2))


def pixel_components(f, t, n=801):
    g = np.linspace(-1, 1, n)
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = (X**2 + Y**2 < 1).ravel() & (f(pts) > t)
    return ndimage.label(inside.reshape(n, n))[1]


def test_two_bump_components_match_pixel_flood_fill(disk_mesh):
    f = two_bump(disk_mesh.nodes)
    saddle = float(two_bump(np.zeros((1, 2)))[0])
    t = 0.5 * (saddle + 1.0)
    slices = extract_level_set(disk_mesh, f, t)
    assert len(slices) == 2 == pixel_components(two_bump, t)


def test_fill_holes_annulus(disk_mesh):
    f = radial(disk_mesh, lambda r: -(r - 0.3) * (r - 0.7))
    (slc,) = extract_level_set(disk_mesh, f, 0.0)
    assert slc.n_holes == 1
    filled = fill_holes(slc)
    assert filled.n_holes == 0
    assert filled.area == pytest.approx(math.pi * 0.49, rel=1e-2)
    again = fill_holes(filled)
    assert again.area == filled.area
    assert np.array_equal(again.node_mask, filled.node_mask)


def test_fill_holes_simply_connected_is_identity(disk_mesh):
    f = radial(disk_mesh, lambda r: 1 - r**2)
    (slc,) = extract_level_set(disk_mesh, f, 0.5)
    filled = fill_holes(slc)
    assert filled.area == pytest.approx(slc.area, rel=1e-14)
    assert np.array_equal(filled.node_mask, slc.node_mask)


def test_nested_rings_keep_outer_boundary(disk_mesh):
    # {f > 0}: a disk r < 0.25 inside a ring 0.5 < r < 0.85
    f = radial(disk_mesh, lambda r: np.where(r < 0.375, 0.25 - r, np.minimum(r - 0.5, 0.85 - r)))
    slices = extract_level_set(disk_mesh, f, 0.0)
    assert len(slices) == 2
    ring = max(slices, key=lambda s: s.area)
    tree = containment_tree(slices)
    inner = slices.index(min(slices, key=lambda s: s.area))
    assert tree[inner] == slices.index(ring)
    filled = fill_holes(ring)
    assert filled.n_holes == 0
    assert filled.area == pytest.approx(math.pi * 0.85**2, rel=1e-2)
    assert len(filled.loops) == 1


# ---------------------------------------------------------------------------
# properties

field_coeffs = st.lists(st.floats(-2, 2, allow_nan=False), min_size=6, max_size=6)


def poly_field(mesh, c):
    x, y = mesh.nodes.T
    return c[0] * x + c[1] * y + c[2] * x * x + c[3] * x * y + c[4] * y * y + c[5] * np.sin(3 * x)


@settings(max_examples=25, deadline=None)
@given(field_coeffs, st.floats(0.05, 0.95))
def test_level_set_areas_partition_domain(disk_mesh, c, q):
    f = poly_field(disk_mesh, c)
    if np.ptp(f) < 1e-6:
        return
    t = float(np.quantile(f, q)) + 1e-9
    above = sum(s.area for s in extract_level_set(disk_mesh, f, t))
    below = float((superlevel_fraction(-f[disk_mesh.triangles], -t) * disk_mesh.areas).sum())
    total = disk_mesh.areas.sum()
    assert above + below == pytest.approx(total, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(field_coeffs, st.floats(0.05, 0.5), st.floats(0.05, 0.45))
def test_nested_thresholds_are_contained(disk_mesh, c, q1, dq):
    f = poly_field(disk_mesh, c)
    if np.ptp(f) < 1e-6:
        return
    t1, t2 = (float(np.quantile(f, q)) + 1e-9 for q in (q1, q1 + dq))
    outer = extract_level_set(disk_mesh, f, t1)
    for s in extract_level_set(disk_mesh, f, t2):
        hosts = [o for o in outer if (o.node_mask | ~s.node_mask).all()]
        assert len(hosts) == 1


@settings(max_examples=15, deadline=None)
@given(field_coeffs, st.floats(0.05, 0.95))
def test_fill_holes_idempotent(disk_mesh, c, q):
    f = poly_field(disk_mesh, c)
    if np.ptp(f) < 1e-6:
        return
    t = float(np.quantile(f, q)) + 1e-9
    for s in extract_level_set(disk_mesh, f, t):
        a = fill_holes(s)
        b = fill_holes(a)
        assert b.area == a.area
        assert a.area >= s.area - 1e-14
