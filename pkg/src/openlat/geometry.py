"""Lattice approximation of bounded Lipschitz domains.

Builds the connected grid graph inside a domain, classifies its inner
boundary, partitions the surface measure into cells of comparable size,
turns the cells into per-site boundary weights, and attaches exterior
reservoir sites with a uniform jump kernel.  All constructions are
deterministic for a given domain and spacing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GeometryError",
    "DomainSpec",
    "BoundaryCell",
    "BoundaryPartition",
    "LatticeApprox",
    "build_lattice",
    "build_boundary_partition",
    "assign_boundary_weights",
    "build_outer_boundary",
    "build_domain_lattice",
    "domain_from_config",
    "save_lattice_csv",
]

# Relative slack used when comparing geometric distances; keeps grid
# points that sit exactly on a dyadic boundary classified consistently.
_TOL = 1e-9

_INSIDE, _BOUNDARY, _OUTSIDE = 1, 0, -1


class GeometryError(ValueError):
    """Raised when a lattice or boundary construction is impossible."""


# ---------------------------------------------------------------------------
# low level predicates


def _seg_point_dist(p, a, b) -> float:
    """Distance from point p to the closed segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _proper_cross(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _seg_seg_dist(p1, p2, q1, q2) -> float:
    if _proper_cross(p1, p2, q1, q2):
        return 0.0
    return min(
        _seg_point_dist(p1, q1, q2),
        _seg_point_dist(p2, q1, q2),
        _seg_point_dist(q1, p1, p2),
        _seg_point_dist(q2, p1, p2),
    )


def _locate_in_polygon(p, verts, tol) -> int:
    n = len(verts)
    for i in range(n):
        if _seg_point_dist(p, verts[i], verts[(i + 1) % n]) <= tol:
            return _BOUNDARY
    # Even-odd ray casting to the right; the half-open rule makes vertex
    # hits count exactly once, and p is at distance > tol from every edge.
    x, y = p
    inside = False
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xs = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if xs > x:
                inside = not inside
    return _INSIDE if inside else _OUTSIDE


# ---------------------------------------------------------------------------
# boundary cells


@dataclass(frozen=True)
class BoundaryCell:
    """One cell of a boundary partition.

    kind is "segment" (endpoints a, b), "arc" (radius, angle window on a
    circle centred at the origin) or "patch" (axis-aligned rectangle given
    by origin point and two spanning vectors).
    """

    kind: str
    data: tuple
    measure: float
    midpoint: np.ndarray

    def distance(self, p: np.ndarray) -> float:
        """Euclidean distance from p to the cell."""
        if self.kind == "segment":
            a, b = self.data
            return _seg_point_dist(p, a, b)
        if self.kind == "arc":
            radius, a0, a1 = self.data
            phi = math.atan2(p[1], p[0])
            for cand in (phi, phi + 2 * math.pi, phi - 2 * math.pi):
                if a0 <= cand <= a1:
                    return abs(float(np.linalg.norm(p)) - radius)
            e0 = radius * np.array([math.cos(a0), math.sin(a0)])
            e1 = radius * np.array([math.cos(a1), math.sin(a1)])
            return min(float(np.linalg.norm(p - e0)), float(np.linalg.norm(p - e1)))
        if self.kind == "patch":
            origin, u, v = self.data
            w = p - origin
            lu = float(np.linalg.norm(u))
            lv = float(np.linalg.norm(v))
            cu = min(lu, max(0.0, float(w @ u) / lu))
            cv = min(lv, max(0.0, float(w @ v) / lv))
            foot = origin + cu * u / lu + cv * v / lv
            return float(np.linalg.norm(p - foot))
        raise GeometryError(f"unknown cell kind {self.kind!r}")


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DomainSpec:
    """A bounded Lipschitz domain with the constants the lattice needs.

    Supported shapes: simple polygons in the plane, axis-aligned boxes in
    any dimension, and disks.  The domain is an open set containing the
    origin; lipschitz_constant is the boundary-graph constant used to size
    search radii (at least 1).
    """

    kind: str
    d: int
    lipschitz_constant: float
    vertices: np.ndarray | None = None      # polygon, (k, 2)
    intervals: np.ndarray | None = None     # box, (d, 2)
    radius: float | None = None             # disk

    # -- constructors -------------------------------------------------

    @staticmethod
    def polygon(vertices, lipschitz_constant: float = 1.0) -> "DomainSpec":
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
            raise GeometryError("polygon needs at least 3 planar vertices")
        dom = DomainSpec("polygon", 2, float(lipschitz_constant), vertices=verts)
        dom._validate()
        return dom

    @staticmethod
    def box(intervals, lipschitz_constant: float = 1.0) -> "DomainSpec":
        iv = np.asarray(intervals, dtype=float)
        if iv.ndim != 2 or iv.shape[1] != 2:
            raise GeometryError("box intervals must have shape (d, 2)")
        if np.any(iv[:, 1] <= iv[:, 0]):
            raise GeometryError("box intervals must be nondegenerate")
        dom = DomainSpec("box", iv.shape[0], float(lipschitz_constant), intervals=iv)
        dom._validate()
        return dom

    @staticmethod
    def disk(radius: float, lipschitz_constant: float = 1.0) -> "DomainSpec":
        if radius <= 0:
            raise GeometryError("disk radius must be positive")
        dom = DomainSpec("disk", 2, float(lipschitz_constant), radius=float(radius))
        dom._validate()
        return dom

    def _validate(self) -> None:
        if self.lipschitz_constant < 1.0:
            raise GeometryError("lipschitz_constant must be at least 1")
        if self.kind == "polygon":
            verts = self.vertices
            n = len(verts)
            scale = float(np.max(np.abs(verts))) or 1.0
            tol = _TOL * scale
            for i in range(n):
                for j in range(i + 1, n):
                    adjacent = j == i + 1 or (i == 0 and j == n - 1)
                    a, b = verts[i], verts[(i + 1) % n]
                    c, e = verts[j], verts[(j + 1) % n]
                    if adjacent:
                        continue
                    if _seg_seg_dist(a, b, c, e) <= tol:
                        raise GeometryError(
                            f"polygon is not simple: edges {i} and {j} touch"
                        )
        if self.locate(np.zeros(self.d)) != _INSIDE:
            raise GeometryError("domain must contain the origin")

    # -- predicates ----------------------------------------------------

    @property
    def _tol(self) -> float:
        return _TOL * max(1.0, self.diameter())

    def locate(self, p) -> int:
        """Classify p as 1 (inside), 0 (on the boundary) or -1 (outside)."""
        p = np.asarray(p, dtype=float)
        tol = self._tol
        if self.kind == "polygon":
            return _locate_in_polygon(p, self.vertices, tol)
        if self.kind == "box":
            lo, hi = self.intervals[:, 0], self.intervals[:, 1]
            if np.any(p < lo - tol) or np.any(p > hi + tol):
                return _OUTSIDE
            if np.any(p < lo + tol) or np.any(p > hi - tol):
                return _BOUNDARY
            return _INSIDE
        if self.kind == "disk":
            r = float(np.linalg.norm(p))
            if r > self.radius + tol:
                return _OUTSIDE
            if r > self.radius - tol:
                return _BOUNDARY
            return _INSIDE
        raise GeometryError(f"unknown domain kind {self.kind!r}")

    def contains(self, p) -> bool:
        """True iff p lies in the open domain."""
        return self.locate(p) == _INSIDE

    def segment_inside(self, p, q) -> bool:
        """True iff the closed segment [p, q] stays in the open domain."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        if self.locate(p) != _INSIDE or self.locate(q) != _INSIDE:
            return False
        if self.kind in ("box", "disk"):
            # convex, open: interior endpoints pin the whole segment
            return True
        tol = self._tol
        verts = self.vertices
        n = len(verts)
        for i in range(n):
            if _seg_seg_dist(p, q, verts[i], verts[(i + 1) % n]) <= tol:
                return False
        return True

    # -- metric data ----------------------------------------------------

    def bounding_box(self) -> np.ndarray:
        if self.kind == "polygon":
            return np.stack([self.vertices.min(0), self.vertices.max(0)], axis=1)
        if self.kind == "box":
            return self.intervals.copy()
        r = self.radius
        return np.array([[-r, r], [-r, r]])

    def diameter(self) -> float:
        bb = self.bounding_box()
        return float(np.linalg.norm(bb[:, 1] - bb[:, 0]))

    def surface_measure(self) -> float:
        """Total boundary measure (perimeter or surface area)."""
        if self.kind == "polygon":
            verts = self.vertices
            return float(
                sum(
                    np.linalg.norm(verts[(i + 1) % len(verts)] - verts[i])
                    for i in range(len(verts))
                )
            )
        if self.kind == "box":
            sides = self.intervals[:, 1] - self.intervals[:, 0]
            total = 0.0
            for axis in range(self.d):
                face = float(np.prod(np.delete(sides, axis)))
                total += 2.0 * face
            return total
        return 2.0 * math.pi * self.radius

    def surface_integral(self, f) -> float:
        """Integrate f over the boundary with a fixed high-order rule."""
        nodes, weights = np.polynomial.legendre.leggauss(16)
        total = 0.0
        if self.kind == "polygon":
            verts = self.vertices
            n = len(verts)
            for i in range(n):
                a, b = verts[i], verts[(i + 1) % n]
                length = float(np.linalg.norm(b - a))
                panels = 8
                for k in range(panels):
                    t0, t1 = k / panels, (k + 1) / panels
                    mid, half = (t0 + t1) / 2, (t1 - t0) / 2
                    for x, w in zip(nodes, weights):
                        t = mid + half * x
                        total += w * half * length * float(f(a + t * (b - a)))
            return total
        if self.kind == "disk":
            m = 512
            r = self.radius
            ang = 2 * math.pi * np.arange(m) / m
            pts = r * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            return float(sum(f(p) for p in pts) * (2 * math.pi * r / m))
        if self.kind == "box" and self.d == 3:
            total = 0.0
            lo, hi = self.intervals[:, 0], self.intervals[:, 1]
            for axis in range(3):
                u_ax, v_ax = [a for a in range(3) if a != axis]
                for side in (lo[axis], hi[axis]):
                    su = hi[u_ax] - lo[u_ax]
                    sv = hi[v_ax] - lo[v_ax]
                    for xu, wu in zip(nodes, weights):
                        for xv, wv in zip(nodes, weights):
                            p = np.empty(3)
                            p[axis] = side
                            p[u_ax] = lo[u_ax] + su * (xu + 1) / 2
                            p[v_ax] = lo[v_ax] + sv * (xv + 1) / 2
                            total += wu * wv * (su / 2) * (sv / 2) * float(f(p))
            return total
        if self.kind == "box" and self.d == 2:
            poly = DomainSpec.polygon(
                [
                    (self.intervals[0, 0], self.intervals[1, 0]),
                    (self.intervals[0, 1], self.intervals[1, 0]),
                    (self.intervals[0, 1], self.intervals[1, 1]),
                    (self.intervals[0, 0], self.intervals[1, 1]),
                ],
                self.lipschitz_constant,
            )
            return poly.surface_integral(f)
        raise GeometryError(f"surface_integral not available for {self.kind} in d={self.d}")

    # -- boundary cells --------------------------------------------------

    def boundary_cells(self, eps: float) -> list[BoundaryCell]:
        """Split the boundary into cells of measure comparable to eps^(d-1).

        Each edge, face or circle is divided into ceil(size / eps^(d-1))
        equal pieces, so cell measures lie in [eps^(d-1)/C, C eps^(d-1)]
        with a constant depending only on the domain.
        """
        cells: list[BoundaryCell] = []
        if self.kind == "polygon" or (self.kind == "box" and self.d == 2):
            if self.kind == "polygon":
                verts = self.vertices
            else:
                verts = np.array(
                    [
                        (self.intervals[0, 0], self.intervals[1, 0]),
                        (self.intervals[0, 1], self.intervals[1, 0]),
                        (self.intervals[0, 1], self.intervals[1, 1]),
                        (self.intervals[0, 0], self.intervals[1, 1]),
                    ]
                )
            n = len(verts)
            for i in range(n):
                a, b = verts[i], verts[(i + 1) % n]
                length = float(np.linalg.norm(b - a))
                k = max(1, math.ceil(length / eps))
                for j in range(k):
                    p0 = a + (b - a) * (j / k)
                    p1 = a + (b - a) * ((j + 1) / k)
                    cells.append(
                        BoundaryCell(
                            "segment",
                            (p0, p1),
                            length / k,
                            (p0 + p1) / 2,
                        )
                    )
            return cells
        if self.kind == "disk":
            circ = 2 * math.pi * self.radius
            k = max(1, math.ceil(circ / eps))
            for j in range(k):
                a0 = 2 * math.pi * j / k
                a1 = 2 * math.pi * (j + 1) / k
                mid = (a0 + a1) / 2
                cells.append(
                    BoundaryCell(
                        "arc",
                        (self.radius, a0, a1),
                        circ / k,
                        self.radius * np.array([math.cos(mid), math.sin(mid)]),
                    )
                )
            return cells
        if self.kind == "box" and self.d == 3:
            lo, hi = self.intervals[:, 0], self.intervals[:, 1]
            for axis in range(3):
                u_ax, v_ax = [a for a in range(3) if a != axis]
                su = float(hi[u_ax] - lo[u_ax])
                sv = float(hi[v_ax] - lo[v_ax])
                ku = max(1, math.ceil(su / eps))
                kv = max(1, math.ceil(sv / eps))
                for side in (lo[axis], hi[axis]):
                    for iu in range(ku):
                        for iv in range(kv):
                            origin = np.empty(3)
                            origin[axis] = side
                            origin[u_ax] = lo[u_ax] + su * iu / ku
                            origin[v_ax] = lo[v_ax] + sv * iv / kv
                            u = np.zeros(3)
                            v = np.zeros(3)
                            u[u_ax] = su / ku
                            v[v_ax] = sv / kv
                            mid = origin + u / 2 + v / 2
                            cells.append(
                                BoundaryCell(
                                    "patch",
                                    (origin, u, v),
                                    (su / ku) * (sv / kv),
                                    mid,
                                )
                            )
            return cells
        raise GeometryError(f"boundary cells not available for {self.kind} in d={self.d}")


# ---------------------------------------------------------------------------
# lattice


@dataclass
class LatticeApprox:
    """Grid approximation of a domain at spacing eps.

    Sites are the connected component of the origin in the grid graph
    whose edges are nearest-neighbour pairs with the joining segment
    inside the open domain.  Treat instances as immutable once the
    builder pipeline has finished; all arrays are set read-only.
    """

    domain: DomainSpec
    eps: float
    grid: np.ndarray            # (n, d) int, coords = grid * eps
    coords: np.ndarray          # (n, d) float
    neighbor_ptr: np.ndarray    # (n + 1,) CSR offsets into neighbor_idx
    neighbor_idx: np.ndarray
    degree: np.ndarray          # (n,)
    is_inner: np.ndarray        # (n,) bool, degree < 2 d
    alpha: np.ndarray | None = None
    partition: "BoundaryPartition | None" = None
    outer_grid: np.ndarray | None = None
    outer_coords: np.ndarray | None = None
    cross_x: np.ndarray | None = None
    cross_z: np.ndarray | None = None
    cross_alpha: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_sites(self) -> int:
        return len(self.grid)

    @property
    def n_outer(self) -> int:
        return 0 if self.outer_grid is None else len(self.outer_grid)

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def inner_sites(self) -> np.ndarray:
        return np.flatnonzero(self.is_inner)

    @property
    def mu_weight(self) -> float:
        """Mass eps^d that the volume measure puts on each site."""
        return self.eps ** self.d

    @property
    def mu_mass(self) -> float:
        return self.mu_weight * self.n_sites

    @property
    def sigma_weights(self) -> np.ndarray:
        """Per-site boundary masses eps^(d-1) alpha (zero off the boundary)."""
        if self.alpha is None:
            raise GeometryError("boundary weights not assigned yet")
        return self.eps ** (self.d - 1) * self.alpha

    @property
    def sigma_mass(self) -> float:
        return float(self.sigma_weights.sum())

    def mu_sum(self, values) -> float:
        """Integral of a site function against the volume measure."""
        return self.mu_weight * float(np.sum(values))

    def sigma_sum(self, values) -> float:
        """Integral of a site function against the boundary measure."""
        return float(self.sigma_weights @ np.asarray(values, dtype=float))

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_idx[self.neighbor_ptr[i]:self.neighbor_ptr[i + 1]]

    def index_of(self, point) -> int:
        """Site index of a grid point, or -1 if absent."""
        key = tuple(int(round(c / self.eps)) for c in np.asarray(point, dtype=float))
        if not hasattr(self, "_site_lookup"):
            self._site_lookup = {tuple(g): i for i, g in enumerate(self.grid)}
        return self._site_lookup.get(key, -1)

    def evaluate(self, f) -> np.ndarray:
        """Evaluate a callable of the coordinates on all sites."""
        return np.array([float(f(x)) for x in self.coords])

    def evaluate_outer(self, f) -> np.ndarray:
        if self.outer_coords is None or len(self.outer_coords) == 0:
            return np.zeros(0)
        return np.array([float(f(z)) for z in self.outer_coords])

    def _freeze(self) -> None:
        for arr in (
            self.grid, self.coords, self.neighbor_ptr, self.neighbor_idx,
            self.degree, self.is_inner, self.alpha, self.outer_grid,
            self.outer_coords, self.cross_x, self.cross_z, self.cross_alpha,
        ):
            if arr is not None:
                arr.setflags(write=False)


def build_lattice(domain: DomainSpec, eps: float) -> LatticeApprox:
    """Connected component of the origin in the grid graph inside domain.

    A grid point belongs to the graph when it lies in the open domain;
    two points at distance eps are adjacent when the closed segment
    between them stays inside.  Components not containing the origin are
    dropped and counted in meta["dropped_sites"].
    """
    if eps <= 0:
        raise GeometryError("eps must be positive")
    d = domain.d
    bb = domain.bounding_box()
    lo = np.floor(bb[:, 0] / eps).astype(int) - 1
    hi = np.ceil(bb[:, 1] / eps).astype(int) + 1

    inside: dict[tuple, None] = {}
    ranges = [range(lo[a], hi[a] + 1) for a in range(d)]

    def rec(prefix, axis):
        if axis == d:
            key = tuple(prefix)
            if domain.contains(np.array(prefix, dtype=float) * eps):
                inside[key] = None
            return
        for k in ranges[axis]:
            rec(prefix + [k], axis + 1)

    rec([], 0)

    origin = (0,) * d
    if origin not in inside:
        raise GeometryError("origin is not a lattice point of the open domain")

    # adjacency by explicit segment test, then BFS from the origin
    def edge_ok(ka, kb):
        return domain.segment_inside(
            np.array(ka, dtype=float) * eps, np.array(kb, dtype=float) * eps
        )

    adj: dict[tuple, list[tuple]] = {k: [] for k in inside}
    for k in inside:
        for axis in range(d):
            nb = list(k)
            nb[axis] += 1
            nb = tuple(nb)
            if nb in inside and edge_ok(k, nb):
                adj[k].append(nb)
                adj[nb].append(k)

    component = {origin}
    queue = [origin]
    while queue:
        cur = queue.pop()
        for nb in adj[cur]:
            if nb not in component:
                component.add(nb)
                queue.append(nb)

    dropped = len(inside) - len(component)
    keys = sorted(component)
    index = {k: i for i, k in enumerate(keys)}
    grid = np.array(keys, dtype=np.int64).reshape(len(keys), d)
    coords = grid.astype(float) * eps

    ptr = np.zeros(len(keys) + 1, dtype=np.int64)
    flat: list[int] = []
    for i, k in enumerate(keys):
        nbrs = sorted(index[nb] for nb in adj[k])
        flat.extend(nbrs)
        ptr[i + 1] = len(flat)
    neighbor_idx = np.array(flat, dtype=np.int64)
    degree = np.diff(ptr)
    is_inner = degree < 2 * d

    lat = LatticeApprox(
        domain=domain,
        eps=float(eps),
        grid=grid,
        coords=coords,
        neighbor_ptr=ptr,
        neighbor_idx=neighbor_idx,
        degree=degree.astype(np.int64),
        is_inner=is_inner,
        meta={"dropped_sites": dropped},
    )
    return lat


# ---------------------------------------------------------------------------
# boundary partition and weights


@dataclass
class BoundaryPartition:
    """Partition of the surface measure with a cell-to-site assignment."""

    eps: float
    cells: list[BoundaryCell]
    assignment: list[np.ndarray]
    measures: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def total_measure(self) -> float:
        return float(self.measures.sum())

    def cell_ratio_bounds(self) -> tuple[float, float]:
        """Range of cell measure over eps^(d-1), the ellipticity ratios."""
        d = self.cells[0].midpoint.shape[0]
        ratios = self.measures / self.eps ** (d - 1)
        return float(ratios.min()), float(ratios.max())


def build_boundary_partition(
    domain: DomainSpec, eps: float, lattice: LatticeApprox
) -> BoundaryPartition:
    """Cells of comparable measure, each assigned to nearby boundary sites.

    A cell is assigned to every inner-boundary site within distance
    eps * sqrt(1 + M^2) of it, M the domain's Lipschitz constant.  A cell
    with no site in range is a construction failure.
    """
    cells = domain.boundary_cells(eps)
    inner = lattice.inner_sites
    if len(inner) == 0:
        raise GeometryError("lattice has no inner-boundary sites")
    pts = lattice.coords[inner]
    reach = eps * math.sqrt(1.0 + domain.lipschitz_constant ** 2) * (1.0 + _TOL)

    assignment = []
    for ci, cell in enumerate(cells):
        dists = np.array([cell.distance(p) for p in pts])
        hit = inner[dists <= reach]
        if len(hit) == 0:
            raise GeometryError(
                f"boundary cell {ci} at {np.round(cell.midpoint, 6)} has no "
                f"lattice site within {reach:.6g}; construction failed at eps={eps}"
            )
        assignment.append(hit)

    return BoundaryPartition(
        eps=float(eps),
        cells=cells,
        assignment=assignment,
        measures=np.array([c.measure for c in cells]),
    )


def assign_boundary_weights(
    lattice: LatticeApprox, partition: BoundaryPartition
) -> LatticeApprox:
    """Fill per-site weights alpha from the cell assignment.

    Each cell spreads its measure equally over its assigned sites, scaled
    by eps^(d-1), so that sum_x eps^(d-1) alpha(x) equals the total
    surface measure exactly.
    """
    d = lattice.d
    alpha = np.zeros(lattice.n_sites)
    for cell_sites, measure in zip(partition.assignment, partition.measures):
        alpha[cell_sites] += measure / (len(cell_sites) * lattice.eps ** (d - 1))
    uncovered = np.flatnonzero(lattice.is_inner & (alpha == 0.0))
    lattice.alpha = alpha
    lattice.partition = partition
    lattice.meta["unweighted_boundary_sites"] = len(uncovered)
    return lattice


def build_outer_boundary(
    lattice: LatticeApprox, domain: DomainSpec | None = None
) -> LatticeApprox:
    """Attach exterior grid sites and the uniform cross-boundary kernel.

    Candidates for a boundary site x are grid points z outside the open
    domain with |z - x| <= eps * sqrt(1 + M^2).  Each boundary site
    splits its weight alpha(x) equally over its candidates.  If a site
    has none, the radius is doubled once (recorded in meta); failure
    after widening is an error naming the site.
    """
    if lattice.alpha is None:
        raise GeometryError("assign boundary weights before the outer boundary")
    domain = domain or lattice.domain
    d = domain.d
    eps = lattice.eps
    base_radius = math.sqrt(1.0 + domain.lipschitz_constant ** 2) * (1.0 + _TOL)

    def offsets(radius):
        kmax = math.floor(radius)
        out = []
        for k in np.ndindex(*([2 * kmax + 1] * d)):
            off = np.array(k) - kmax
            if np.any(off) and float(off @ off) <= radius * radius:
                out.append(off)
        return out

    site_keys = {tuple(g) for g in lattice.grid}
    inner = lattice.inner_sites
    widened: list[int] = []
    cand_lists: list[list[tuple]] = []
    for i in inner:
        found = None
        for radius, widen in ((base_radius, False), (2.0 * base_radius, True)):
            cands = []
            for off in offsets(radius):
                key = tuple(lattice.grid[i] + off)
                if key in site_keys:
                    continue
                if domain.locate(np.array(key, dtype=float) * eps) != _INSIDE:
                    cands.append(key)
            if cands:
                found = cands
                if widen:
                    widened.append(int(i))
                break
        if found is None:
            raise GeometryError(
                f"boundary site {i} at {np.round(lattice.coords[i], 6)} has no "
                "exterior grid point even after widening the search radius"
            )
        cand_lists.append(found)

    outer_keys = sorted({k for cands in cand_lists for k in cands})
    outer_index = {k: j for j, k in enumerate(outer_keys)}
    cross_x, cross_z, cross_alpha = [], [], []
    for i, cands in zip(inner, cand_lists):
        share = lattice.alpha[i] / len(cands)
        for key in sorted(cands):
            cross_x.append(int(i))
            cross_z.append(outer_index[key])
            cross_alpha.append(share)

    lattice.outer_grid = np.array(outer_keys, dtype=np.int64).reshape(len(outer_keys), d)
    lattice.outer_coords = lattice.outer_grid.astype(float) * eps
    lattice.cross_x = np.array(cross_x, dtype=np.int64)
    lattice.cross_z = np.array(cross_z, dtype=np.int64)
    lattice.cross_alpha = np.array(cross_alpha)
    lattice.meta["widened_sites"] = widened
    lattice._freeze()
    return lattice


def build_domain_lattice(domain: DomainSpec, eps: float) -> LatticeApprox:
    """Run the full pipeline: sites, partition, weights, outer boundary."""
    lat = build_lattice(domain, eps)
    part = build_boundary_partition(domain, eps, lat)
    assign_boundary_weights(lat, part)
    return build_outer_boundary(lat, domain)


# ---------------------------------------------------------------------------
# config and dumps


def domain_from_config(cfg: dict) -> DomainSpec:
    """Build a DomainSpec from a mapping with a "shape" key.

    Shapes: polygon (vertices), box (intervals), disk (radius).  The
    optional key M_Omega sets the Lipschitz constant (default 1).
    """
    shape = cfg.get("shape")
    m = float(cfg.get("M_Omega", 1.0))
    if shape == "polygon":
        return DomainSpec.polygon(cfg["vertices"], m)
    if shape == "box":
        return DomainSpec.box(cfg["intervals"], m)
    if shape == "disk":
        return DomainSpec.disk(float(cfg["radius"]), m)
    raise GeometryError(f"unknown shape {shape!r}; use polygon, box or disk")


def save_lattice_csv(lattice: LatticeApprox, outdir) -> tuple[Path, Path]:
    """Write sites.csv and cross_edges.csv under outdir; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    d = lattice.d
    sites_path = outdir / "sites.csv"
    with open(sites_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index"] + [f"x{a + 1}" for a in range(d)]
            + ["degree", "is_inner_boundary", "alpha"]
        )
        alpha = lattice.alpha if lattice.alpha is not None else np.zeros(lattice.n_sites)
        for i in range(lattice.n_sites):
            writer.writerow(
                [i]
                + [repr(float(c)) for c in lattice.coords[i]]
                + [int(lattice.degree[i]), int(lattice.is_inner[i]), repr(float(alpha[i]))]
            )
    cross_path = outdir / "cross_edges.csv"
    with open(cross_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_index"] + [f"z{a + 1}" for a in range(d)] + ["alpha_xz"])
        if lattice.cross_x is not None:
            for x, z, a in zip(lattice.cross_x, lattice.cross_z, lattice.cross_alpha):
                writer.writerow(
                    [int(x)]
                    + [repr(float(c)) for c in lattice.outer_coords[z]]
                    + [repr(float(a))]
                )
    return sites_path, cross_path
