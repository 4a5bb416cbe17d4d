"""Triangulated disc meshes, boundary electrodes, and boundary quadrature.

The mesh generator builds a structured polar triangulation: concentric
vertex rings with angular counts proportional to the ring index, stitched
into triangles ring by ring.  The construction is deterministic, so equal
inputs always give identical meshes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class MeshError(ValueError):
    """Invalid mesh construction, import, or query."""


class ElectrodeError(ValueError):
    """Invalid electrode layout (overlap, zero coverage, bad arguments)."""


def _signed_areas(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


class Mesh:
    """Conforming triangulation of a disc-like domain.

    Triangles are stored with positive orientation.  Derived quantities
    (areas, centroids, nodal basis gradients, the boundary loop) are
    computed once at construction; instances are treated as immutable and
    may be shared freely across threads.

    Attributes
    ----------
    vertices : (n_v, 2) float array
    triangles : (n_t, 3) int array
    element_areas : (n_t,) float array
    centroids : (n_t, 2) float array
    grad_x, grad_y : (n_t, 3) float arrays
        Per-triangle gradients of the three nodal basis functions.
    boundary_edges : (n_b, 2) int array
        Vertex pairs of the closed boundary loop, in loop order.
    boundary_edge_angles : (n_b,) float array
        Polar angle of each boundary edge midpoint, in [0, 2*pi).
    boundary_edge_lengths : (n_b,) float array
    radius : float
        Largest vertex norm.
    """

    def __init__(self, vertices, triangles):
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must be an (m, 3) array")
        if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= len(vertices):
            raise MeshError("triangle vertex index out of range")

        signed = _signed_areas(vertices, triangles)
        flip = signed < 0.0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        areas = np.abs(signed)
        scale = max(np.max(np.abs(vertices)), 1.0)
        if np.any(areas <= 1e-14 * scale * scale):
            raise MeshError("degenerate (zero-area) triangle")

        self.vertices = vertices
        self.triangles = triangles
        self.element_areas = areas
        self.centroids = vertices[triangles].mean(axis=1)
        self.radius = float(np.max(np.hypot(vertices[:, 0], vertices[:, 1])))
        self._build_basis_gradients()
        self._build_boundary_loop()
        self._adjacency = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.triangles)

    def _build_basis_gradients(self):
        p = self.vertices[self.triangles]
        x, y = p[:, :, 0], p[:, :, 1]
        # grad of nodal basis a on each triangle: ((y_b - y_c), (x_c - x_b)) / (2 A)
        b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        inv2a = 1.0 / (2.0 * self.element_areas)
        self.grad_x = b * inv2a[:, None]
        self.grad_y = c * inv2a[:, None]

    def _build_boundary_loop(self):
        # A boundary edge belongs to exactly one triangle; taking it in that
        # triangle's (positive) orientation makes the loop run counterclockwise.
        edge_count = {}
        directed = {}
        for tri in self.triangles:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                i, j = int(tri[a]), int(tri[b])
                key = (i, j) if i < j else (j, i)
                edge_count[key] = edge_count.get(key, 0) + 1
                if key not in directed:
                    directed[key] = (i, j)
        boundary = [directed[k] for k, cnt in edge_count.items() if cnt == 1]
        if any(cnt > 2 for cnt in edge_count.values()):
            raise MeshError("non-manifold edge (shared by more than two triangles)")
        if not boundary:
            raise MeshError("mesh has no boundary")
        succ = {i: (i, j) for i, j in boundary}
        if len(succ) != len(boundary):
            raise MeshError("boundary is not a single closed loop")
        start = boundary[0][0]
        loop = []
        i = start
        for _ in range(len(boundary)):
            if i not in succ:
                raise MeshError("boundary is not a single closed loop")
            e = succ.pop(i)
            loop.append(e)
            i = e[1]
        if succ or loop[-1][1] != start:
            raise MeshError("boundary is not a single closed loop")

        edges = np.array(loop, dtype=np.int64)
        mids = 0.5 * (self.vertices[edges[:, 0]] + self.vertices[edges[:, 1]])
        angles = np.mod(np.arctan2(mids[:, 1], mids[:, 0]), TWO_PI)
        deltas = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        self.boundary_edges = edges
        self.boundary_edge_angles = angles
        self.boundary_edge_lengths = np.hypot(deltas[:, 0], deltas[:, 1])

    def boundary_polygon_area(self):
        """Shoelace area of the boundary loop (equals the triangle area sum)."""
        i, j = self.boundary_edges[:, 0], self.boundary_edges[:, 1]
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x[i] * y[j] - x[j] * y[i]))

    def element_adjacency(self):
        """Pairs of triangle indices sharing an edge, as an (n_pairs, 2) array."""
        if self._adjacency is None:
            owners = {}
            pairs = []
            for t, tri in enumerate(self.triangles):
                for a, b in ((0, 1), (1, 2), (2, 0)):
                    i, j = int(tri[a]), int(tri[b])
                    key = (i, j) if i < j else (j, i)
                    other = owners.setdefault(key, t)
                    if other != t:
                        pairs.append((other, t))
            self._adjacency = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        return self._adjacency


def _mesh_layout(target):
    """Pick (rings, angular base count) so rings*base ~ balanced triangles.

    count = k * n_r**2; the score trades closeness to the target against
    element aspect (k near 2*pi gives near-equilateral triangles).
    """
    best = None
    n_max = int(math.isqrt(max(target // 3, 1))) + 2
    for n_r in range(1, n_max + 1):
        k = max(3, round(target / n_r**2))
        count = k * n_r * n_r
        score = abs(count - target) / target + 0.1 * abs(math.log(k / TWO_PI))
        if best is None or score < best[0] - 1e-15:
            best = (score, n_r, k)
    return best[1], best[2]


def _stitch_rings(inner, outer):
    """Triangulate the annulus between two closed vertex rings.

    Both rings are listed in increasing-angle order with uniform angular
    spacing.  The walk advances whichever ring has the smaller next angle,
    which keeps chords from crossing and uses every vertex.
    """
    a, b = len(inner), len(outer)
    tris = []
    i = j = 0
    while i < a or j < b:
        if i < a and (j >= b or (i + 1) * b <= (j + 1) * a):
            tris.append((inner[i % a], inner[(i + 1) % a], outer[j % b]))
            i += 1
        else:
            tris.append((outer[j % b], outer[(j + 1) % b], inner[i % a]))
            j += 1
    return tris


def build_disc_mesh(radius, target_elements):
    """Build a structured polar triangulation of the disc of given radius.

    Parameters
    ----------
    radius : float
        Disc radius, must be positive.
    target_elements : int
        Requested triangle count; the result is within 20 % of it
        (typically much closer).  Must be at least 16.

    Returns
    -------
    Mesh
    """
    if radius <= 0.0:
        raise MeshError(f"radius must be positive, got {radius}")
    target_elements = int(target_elements)
    if target_elements < 16:
        raise MeshError(f"target_elements must be at least 16, got {target_elements}")

    n_r, k = _mesh_layout(target_elements)
    verts = [(0.0, 0.0)]
    rings = [[0]]
    for i in range(1, n_r + 1):
        count = k * i
        r = radius * i / n_r
        theta = TWO_PI * np.arange(count) / count
        first = len(verts)
        verts.extend(zip(r * np.cos(theta), r * np.sin(theta)))
        rings.append(list(range(first, first + count)))

    tris = [(0, rings[1][j], rings[1][(j + 1) % k]) for j in range(k)]
    for i in range(2, n_r + 1):
        tris.extend(_stitch_rings(rings[i - 1], rings[i]))

    mesh = Mesh(np.array(verts), np.array(tris))
    if abs(mesh.n_elements - target_elements) > 0.2 * target_elements:
        raise MeshError(
            f"could not reach {target_elements} elements within 20 % "
            f"(got {mesh.n_elements})"
        )
    return mesh


def _circular_distance(angles, center):
    return np.abs(np.mod(angles - center + math.pi, TWO_PI) - math.pi)


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """Boundary electrodes: owned edges, arc lengths, contact impedances.

    ``electrode_edges[l]`` holds indices into the mesh boundary-edge arrays
    for electrode ``l``.  Electrodes are indexed 0..m-1 with centers at
    angles 2*pi*l/m.
    """

    m: int
    half_width: float
    contact_impedance: np.ndarray
    electrode_edges: tuple
    arc_lengths: np.ndarray
    center_angles: np.ndarray

    @property
    def nominal_coverage(self):
        """Fraction of the circle covered by the nominal electrode arcs."""
        return self.m * 2.0 * self.half_width / TWO_PI


def place_electrodes(mesh, m, half_width, impedance):
    """Assign boundary edges to m equispaced electrodes.

    An edge belongs to electrode l when its midpoint angle lies within
    ``half_width`` of the electrode center angle 2*pi*l/m.  Arcs must be
    pairwise disjoint (m * 2 * half_width < 2*pi) and every electrode must
    capture at least one edge.

    Parameters
    ----------
    mesh : Mesh
    m : int
        Electrode count, at least 2.
    half_width : float
        Angular half-width of each electrode arc, in radians.
    impedance : float
        Contact impedance, shared by all electrodes; must be positive.

    Returns
    -------
    ElectrodeLayout
    """
    if m < 2:
        raise ElectrodeError(f"need at least 2 electrodes, got {m}")
    if half_width <= 0.0:
        raise ElectrodeError(f"half_width must be positive, got {half_width}")
    if m * 2.0 * half_width >= TWO_PI:
        raise ElectrodeError(
            f"electrode arcs overlap: {m} arcs of half-width {half_width} "
            f"cover the whole circle"
        )
    if impedance <= 0.0:
        raise ElectrodeError(f"contact impedance must be positive, got {impedance}")

    centers = TWO_PI * np.arange(m) / m
    edges = []
    for center in centers:
        sel = np.flatnonzero(_circular_distance(mesh.boundary_edge_angles, center) <= half_width)
        if sel.size == 0:
            raise ElectrodeError(
                "boundary too coarse: an electrode arc captures no edge "
                f"(half_width {half_width}, {len(mesh.boundary_edges)} boundary edges)"
            )
        edges.append(sel)
    arcs = np.array([mesh.boundary_edge_lengths[sel].sum() for sel in edges])
    return ElectrodeLayout(
        m=m,
        half_width=float(half_width),
        contact_impedance=np.full(m, float(impedance)),
        electrode_edges=tuple(edges),
        arc_lengths=arcs,
        center_angles=centers,
    )


def electrode_boundary_integral(mesh, layout, index, nodal_values):
    """Integrate a nodal field over one electrode arc (trapezoid rule).

    The trapezoid rule on each straight boundary edge is exact for fields
    that are linear along the edge, hence exact for the nodal basis used by
    the solver.
    """
    if not 0 <= index < layout.m:
        raise IndexError(f"electrode index {index} out of range 0..{layout.m - 1}")
    nodal_values = np.asarray(nodal_values, dtype=float)
    if nodal_values.shape != (mesh.n_vertices,):
        raise ValueError("nodal_values length does not match the mesh")
    sel = layout.electrode_edges[index]
    ij = mesh.boundary_edges[sel]
    lengths = mesh.boundary_edge_lengths[sel]
    return float(np.sum(lengths * 0.5 * (nodal_values[ij[:, 0]] + nodal_values[ij[:, 1]])))


def save_mesh(mesh, path):
    """Write a mesh to the plain-text exchange format."""
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices} triangles {mesh.n_elements}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path):
    """Read a mesh written by :func:`save_mesh`; derived data is recomputed."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "vertices" or header[2] != "triangles":
            raise MeshError(f"{path}: bad mesh header")
        try:
            n_v, n_t = int(header[1]), int(header[3])
        except ValueError as exc:
            raise MeshError(f"{path}: bad mesh header") from exc
        try:
            verts = [
                tuple(float(tok) for tok in fh.readline().split()) for _ in range(n_v)
            ]
            tris = [
                tuple(int(tok) for tok in fh.readline().split()) for _ in range(n_t)
            ]
        except ValueError as exc:
            raise MeshError(f"{path}: malformed vertex or triangle line") from exc
    if any(len(v) != 2 for v in verts) or any(len(t) != 3 for t in tris):
        raise MeshError(f"{path}: malformed vertex or triangle line")
    return Mesh(np.array(verts), np.array(tris))
