import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openlat import (
    DomainSpec,
    GeometryError,
    assign_boundary_weights,
    build_boundary_partition,
    build_domain_lattice,
    build_lattice,
    build_outer_boundary,
    domain_from_config,
    save_lattice_csv,
)

from conftest import site_at


# ---------------------------------------------------------------------------
# domain predicates


def test_polygon_rejects_nonsimple():
    with pytest.raises(GeometryError):
        DomainSpec.polygon([(-1, -1), (1, 1), (1, -1), (-1, 1)])


def test_domain_must_contain_origin():
    with pytest.raises(GeometryError):
        DomainSpec.box([[1.0, 2.0], [1.0, 2.0]])


def test_locate_square(square):
    assert square.contains((0.0, 0.0))
    assert square.locate((0.5, 0.25)) == 0
    assert square.locate((0.5, 0.5)) == 0
    assert square.locate((0.75, 0.0)) == -1


def test_segment_inside_blocks_boundary_contact():
    # U-shape: a bar below a notch plus two arms; a segment joining the
    # arms leaves the domain even though both endpoints are inside
    ushape = DomainSpec.polygon(
        [(-1, -0.3), (1, -0.3), (1, 1), (0.5, 1), (0.5, 0.1),
         (-0.5, 0.1), (-0.5, 1), (-1, 1)]
    )
    p, q = np.array([-0.75, 0.5]), np.array([0.75, 0.5])
    assert ushape.contains(p) and ushape.contains(q)
    assert not ushape.segment_inside(p, q)
    assert ushape.segment_inside(p, np.array([-0.75, -0.2]))


# ---------------------------------------------------------------------------
# lattice enumeration


def test_square_eps_quarter_enumeration(lat4):
    assert lat4.n_sites == 9
    expected = {
        (i * 0.25, j * 0.25) for i in (-1, 0, 1) for j in (-1, 0, 1)
    }
    got = {tuple(c) for c in lat4.coords}
    assert got == expected
    assert int(lat4.is_inner.sum()) == 8
    center = site_at(lat4, (0.0, 0.0))
    assert lat4.degree[center] == 4 and not lat4.is_inner[center]
    corner = site_at(lat4, (0.25, 0.25))
    assert lat4.degree[corner] == 2
    edge_mid = site_at(lat4, (0.25, 0.0))
    assert lat4.degree[edge_mid] == 3
    assert lat4.mu_mass == pytest.approx(0.5625, abs=0)


def test_square_eps_half_single_site(square):
    lat = build_lattice(square, 0.5)
    assert lat.n_sites == 1
    assert lat.degree[0] == 0 and bool(lat.is_inner[0])


def test_disk_enumerations():
    lat = build_lattice(DomainSpec.disk(0.3), 0.25)
    assert lat.n_sites == 5
    assert int(lat.is_inner.sum()) == 4
    # the cross pattern: origin plus the four axis neighbours
    got = {tuple(g) for g in lat.grid}
    assert got == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}

    lat = build_lattice(DomainSpec.disk(0.4), 0.25)
    assert lat.n_sites == 9
    assert int(lat.is_inner.sum()) == 8


def test_component_of_origin_only():
    # dumbbell: two boxes joined by a corridor that misses every grid
    # line, so the far box is enumerated but disconnected and dropped
    dom = DomainSpec.polygon(
        [
            (-0.5, -0.5), (0.5, -0.5), (0.5, 0.05), (1.0, 0.05),
            (1.0, -0.5), (2.0, -0.5), (2.0, 0.5), (1.0, 0.5),
            (1.0, 0.07), (0.5, 0.07), (0.5, 0.5), (-0.5, 0.5),
        ]
    )
    lat = build_lattice(dom, 0.25)
    assert lat.meta["dropped_sites"] >= 9
    assert np.all(np.abs(lat.coords[:, 0]) <= 0.5)


def test_lattice_connected(lat8):
    seen = np.zeros(lat8.n_sites, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in lat8.neighbors(i):
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    assert seen.all()


def test_degree_symmetry(lat8):
    for i in range(lat8.n_sites):
        for j in lat8.neighbors(i):
            assert i in lat8.neighbors(int(j))
            assert np.isclose(
                np.linalg.norm(lat8.coords[i] - lat8.coords[j]), lat8.eps
            )


def test_volume_convergence(square):
    errors = []
    for eps in (0.25, 0.125, 0.0625):
        lat = build_lattice(square, eps)
        errors.append(abs(lat.mu_mass - 1.0))
    assert errors[0] > errors[1] > errors[2]


# ---------------------------------------------------------------------------
# boundary partition and weights


def test_partition_square_quarter(square, lat4):
    part = build_boundary_partition(square, 0.25, lat4)
    assert part.n_cells == 16
    assert np.allclose(part.measures, 0.25)
    assert part.total_measure == pytest.approx(4.0, abs=1e-12)
    lo, hi = part.cell_ratio_bounds()
    assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)
    covered = set()
    for sites in part.assignment:
        assert len(sites) > 0
        covered.update(int(s) for s in sites)
    assert covered == {int(s) for s in lat4.inner_sites}


def test_partition_square_half_degenerate(square):
    # all 8 cells still reach the single site, which collects everything
    lat = build_lattice(square, 0.5)
    part = build_boundary_partition(square, 0.5, lat)
    assert part.n_cells == 8
    lat = assign_boundary_weights(lat, part)
    assert lat.alpha[0] == pytest.approx(8.0, abs=1e-12)
    assert lat.sigma_mass == pytest.approx(4.0, abs=1e-12)


def test_partition_failure_reports_cell():
    # a slanted spike drifts off the grid columns, so cells near its tip
    # have no lattice site within reach
    dom = DomainSpec.polygon(
        [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (0.26, 0.5), (0.3, 3.0),
         (0.22, 0.5), (-0.5, 0.5)]
    )
    lat = build_lattice(dom, 0.25)
    with pytest.raises(GeometryError, match="cell"):
        build_boundary_partition(dom, 0.25, lat)


def test_alpha_values_square_quarter(lat4):
    # corner-type sites collect a corner cell alone plus shares of the
    # adjacent cells; edge midpoints only shared cells
    for pt in [(0.25, 0.25), (0.25, -0.25), (-0.25, 0.25), (-0.25, -0.25)]:
        assert lat4.alpha[site_at(lat4, pt)] == pytest.approx(7.0 / 3.0, rel=1e-12)
    for pt in [(0.25, 0.0), (-0.25, 0.0), (0.0, 0.25), (0.0, -0.25)]:
        assert lat4.alpha[site_at(lat4, pt)] == pytest.approx(5.0 / 3.0, rel=1e-12)
    assert lat4.alpha[site_at(lat4, (0.0, 0.0))] == 0.0


def test_boundary_mass_exact(lat4, lat8, lat16):
    for lat in (lat4, lat8, lat16):
        assert lat.sigma_mass == pytest.approx(4.0, abs=1e-10)


def test_boundary_measure_weak_convergence(square):
    f = lambda p: p[0] * p[0] + math.sin(math.pi * p[1])
    exact = square.surface_integral(f)
    errs = []
    for eps in (0.25, 0.125, 0.0625):
        lat = build_domain_lattice(square, eps)
        vals = lat.evaluate(f)
        errs.append(abs(lat.sigma_sum(vals) - exact))
    assert errs[0] > errs[1] > errs[2]


def test_box3d_weights():
    dom = DomainSpec.box([[-0.5, 0.5]] * 3)
    lat = build_domain_lattice(dom, 0.25)
    assert lat.n_sites == 27
    assert int(lat.is_inner.sum()) == 26
    assert lat.sigma_mass == pytest.approx(6.0, rel=1e-12)
    assert lat.mu_mass == pytest.approx(27.0 / 64.0, abs=0)


# ---------------------------------------------------------------------------
# outer boundary


def test_outer_candidates_square_quarter(lat4):
    i = site_at(lat4, (0.25, 0.25))
    mask = lat4.cross_x == i
    zs = {tuple(lat4.outer_coords[z]) for z in lat4.cross_z[mask]}
    assert zs == {(0.5, 0.5), (0.0, 0.5), (0.5, 0.0), (0.25, 0.5), (0.5, 0.25)}
    assert np.allclose(lat4.cross_alpha[mask], lat4.alpha[i] / 5.0)

    j = site_at(lat4, (0.25, 0.0))
    mask = lat4.cross_x == j
    zs = {tuple(lat4.outer_coords[z]) for z in lat4.cross_z[mask]}
    assert zs == {(0.5, -0.25), (0.5, 0.0), (0.5, 0.25)}
    assert np.allclose(lat4.cross_alpha[mask], lat4.alpha[j] / 3.0)

    assert lat4.n_outer == 16


def test_outer_sites_outside_domain(lat8, square):
    for z in lat8.outer_coords:
        assert square.locate(z) in (0, -1)
    # every outer site within reach of its boundary sites
    reach = lat8.eps * math.sqrt(2.0) * (1 + 1e-9)
    for x, z in zip(lat8.cross_x, lat8.cross_z):
        dist = np.linalg.norm(lat8.coords[x] - lat8.outer_coords[z])
        assert dist <= reach


def test_cross_weights_sum_to_alpha(lat8):
    total = np.zeros(lat8.n_sites)
    np.add.at(total, lat8.cross_x, lat8.cross_alpha)
    assert np.allclose(total, lat8.alpha, atol=1e-14)


def test_outer_requires_weights(square):
    lat = build_lattice(square, 0.25)
    with pytest.raises(GeometryError, match="weights"):
        build_outer_boundary(lat, square)


# ---------------------------------------------------------------------------
# config and dumps


def test_domain_from_config_roundtrip():
    dom = domain_from_config(
        {"shape": "polygon", "vertices": [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]}
    )
    assert dom.kind == "polygon" and dom.d == 2
    dom = domain_from_config({"shape": "disk", "radius": 0.4, "M_Omega": 2.0})
    assert dom.lipschitz_constant == 2.0
    with pytest.raises(GeometryError):
        domain_from_config({"shape": "torus"})


def test_csv_dump_roundtrip(lat4, tmp_path):
    sites, cross = save_lattice_csv(lat4, tmp_path)
    rows = sites.read_text().strip().split("\n")
    assert rows[0] == "index,x1,x2,degree,is_inner_boundary,alpha"
    assert len(rows) == 1 + lat4.n_sites
    vals = rows[1].split(",")
    assert int(vals[0]) == 0
    assert float(vals[-1]) == pytest.approx(lat4.alpha[0])
    crows = cross.read_text().strip().split("\n")
    assert crows[0] == "x_index,z1,z2,alpha_xz"
    assert len(crows) == 1 + len(lat4.cross_x)
    # alpha round-trips exactly through repr, entry by entry
    got = [float(r.split(",")[-1]) for r in crows[1:]]
    assert got == [float(a) for a in lat4.cross_alpha]


# ---------------------------------------------------------------------------
# property: random convex polygons keep the construction sound


@st.composite
def convex_polygons(draw):
    k = draw(st.integers(min_value=3, max_value=7))
    angles = sorted(
        draw(
            st.lists(
                st.floats(min_value=0.0, max_value=2 * math.pi - 0.3),
                min_size=k, max_size=k, unique=True,
            )
        )
    )
    # enforce angular separation so edges are nondegenerate
    for a, b in zip(angles, angles[1:]):
        if b - a < 0.25:
            return None
    radii = [
        draw(st.floats(min_value=0.6, max_value=1.4)) for _ in range(len(angles))
    ]
    return [(r * math.cos(a), r * math.sin(a)) for r, a in zip(radii, angles)]


@given(convex_polygons())
@settings(max_examples=20, deadline=None)
def test_random_polygon_invariants(verts):
    if verts is None or len(verts) < 3:
        return
    try:
        dom = DomainSpec.polygon(verts)
    except GeometryError:
        return
    eps = 0.25
    try:
        lat = build_domain_lattice(dom, eps)
    except GeometryError:
        return
    assert lat.n_sites >= 1
    assert np.all(lat.degree <= 2 * lat.d)
    assert lat.sigma_mass == pytest.approx(dom.surface_measure(), rel=1e-9)
    assert np.all(lat.alpha[lat.inner_sites] >= 0.0)
    total = np.zeros(lat.n_sites)
    np.add.at(total, lat.cross_x, lat.cross_alpha)
    assert np.allclose(total, lat.alpha, atol=1e-12)
