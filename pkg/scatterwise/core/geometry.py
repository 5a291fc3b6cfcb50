"""
Triangulated particle surfaces, canonical shapes and surface quadrature

Flat panels with centroid collocation carry every surface integral in the
package. Weakly singular 1/r kernels are handled by a polar split of the
panel around the singular point and by local subdivision of adjacent panels.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import scipy.sparse
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from ..utils.errors import (
    InvalidArgumentError, QuadratureError, TopologyError,
)
from ..utils.helpers import chunk_ranges, parallel_map

_LOGGER = logging.getLogger(__name__)

STRATEGIES = ('duffy', 'subdivide', 'none')

# Symmetric triangle rules in barycentric coordinates: degree -> (points, weights)
_RULES: Dict[int, Tuple[np.ndarray, np.ndarray]] = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[2 / 3, 1 / 6, 1 / 6],
                  [1 / 6, 2 / 3, 1 / 6],
                  [1 / 6, 1 / 6, 2 / 3]]), np.full(3, 1 / 3)),
    4: (np.array([[0.108103018168070, 0.445948490915965, 0.445948490915965],
                  [0.445948490915965, 0.108103018168070, 0.445948490915965],
                  [0.445948490915965, 0.445948490915965, 0.108103018168070],
                  [0.816847572980459, 0.091576213509771, 0.091576213509771],
                  [0.091576213509771, 0.816847572980459, 0.091576213509771],
                  [0.091576213509771, 0.091576213509771, 0.816847572980459]]),
        np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)),
    5: (np.array([[1 / 3, 1 / 3, 1 / 3],
                  [0.059715871789770, 0.470142064105115, 0.470142064105115],
                  [0.470142064105115, 0.059715871789770, 0.470142064105115],
                  [0.470142064105115, 0.470142064105115, 0.059715871789770],
                  [0.797426985353087, 0.101286507323456, 0.101286507323456],
                  [0.101286507323456, 0.797426985353087, 0.101286507323456],
                  [0.101286507323456, 0.101286507323456, 0.797426985353087]]),
        np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)),
}


@dataclass(frozen=True)
class QuadratureSpec:
    """Panel rule order, singular-pair strategy and local refinement depth."""

    order: int = 1
    strategy: str = 'duffy'
    refinement: int = 1

    def __post_init__(self):
        if int(self.order) < 1:
            raise InvalidArgumentError(f"quadrature order must be >= 1, got {self.order}")
        if self.strategy not in STRATEGIES:
            raise InvalidArgumentError(
                f"unknown singular-pair strategy '{self.strategy}', expected one of {STRATEGIES}")
        if int(self.refinement) < 0:
            raise InvalidArgumentError(f"refinement must be >= 0, got {self.refinement}")

    def rule(self) -> Tuple[np.ndarray, np.ndarray]:
        """Smallest tabulated rule exact to at least `order` (capped at degree 5)."""
        for degree in sorted(_RULES):
            if degree >= self.order:
                return _RULES[degree]
        return _RULES[5]


class SurfaceMesh:
    """
    Closed, outward-oriented triangulated surface.

    Arrays are read-only; derived quantities are computed lazily and cached.
    """

    def __init__(self, vertices: Any, triangles: Any, validate: bool = True):
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise InvalidArgumentError(f"vertices must have shape (n, 3), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or len(triangles) == 0:
            raise InvalidArgumentError(f"triangles must have shape (m, 3), got {triangles.shape}")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise InvalidArgumentError("triangle index out of range")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        self.vertices = vertices
        self.triangles = triangles
        if validate:
            validate_topology(self)

    def __repr__(self) -> str:
        return f"SurfaceMesh(vertices={len(self.vertices)}, panels={self.n_panels})"

    @property
    def n_panels(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self) -> np.ndarray:
        """Panel corner coordinates, shape (P, 3, 3)."""
        return self.vertices[self.triangles]

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normals per panel."""
        norms = np.linalg.norm(self._cross, axis=1)
        if np.any(norms == 0.0):
            bad = np.flatnonzero(norms == 0.0)
            raise TopologyError(f"degenerate panels with zero area: {bad[:10].tolist()}")
        return self._cross / norms[:, None]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    @cached_property
    def panel_diameters(self) -> np.ndarray:
        c = self.corners
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    @cached_property
    def tangents(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-panel orthonormal tangent basis (tau1, tau2) with tau1 x tau2 = normal."""
        c = self.corners
        edge = c[:, 1] - c[:, 0]
        tau1 = edge / np.linalg.norm(edge, axis=1)[:, None]
        tau2 = np.cross(self.normals, tau1)
        return tau1, tau2

    @cached_property
    def diameter(self) -> float:
        """Largest pairwise vertex distance (computed on the convex hull)."""
        points = self.vertices
        if len(points) > 64:
            try:
                points = points[ConvexHull(points).vertices]
            except QhullError:
                pass
        return float(pdist(points).max())

    @property
    def characteristic_size(self) -> float:
        """Characteristic dimension a: half the mesh diameter."""
        return 0.5 * self.diameter

    @cached_property
    def adjacent_pairs(self) -> np.ndarray:
        """Ordered pairs (p, q), p != q, of panels sharing at least one vertex."""
        P = self.n_panels
        rows = np.repeat(np.arange(P), 3)
        incidence = scipy.sparse.csr_matrix(
            (np.ones(3 * P), (rows, self.triangles.reshape(-1))),
            shape=(P, len(self.vertices)))
        touching = (incidence @ incidence.T).tocoo()
        mask = touching.row != touching.col
        return np.stack([touching.row[mask], touching.col[mask]], axis=1).astype(np.int64)

    def rule_points(self, spec: QuadratureSpec) -> Tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes (P, nq, 3) and area-scaled weights (P, nq)."""
        bary, weights = spec.rule()
        points = np.einsum('qk,pkd->pqd', bary, self.corners)
        return points, self.areas[:, None] * weights[None, :]


def _subdivide(vertices: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split every triangle into four through its edge midpoints."""
    t = triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    unique, inverse = np.unique(np.sort(edges, axis=1), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    midpoints = 0.5 * (vertices[unique[:, 0]] + vertices[unique[:, 1]])
    m = inverse.reshape(3, -1).T + len(vertices)
    a, b, c = t.T
    ab, bc, ca = m.T
    faces = np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([b, bc, ab], axis=1),
        np.stack([c, ca, bc], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])
    return np.vstack([vertices, midpoints]), faces


def _orient_outward(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Flip faces of a star-shaped (about the origin) surface to point outward."""
    corners = vertices[triangles]
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    flip = np.einsum('ij,ij->i', normals, corners.mean(axis=1)) < 0
    triangles = triangles.copy()
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


def _icosahedron() -> Tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    vertices /= np.linalg.norm(vertices, axis=1)[:, None]
    triangles = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return vertices, _orient_outward(vertices, triangles)


def _unit_sphere(refinement: int) -> Tuple[np.ndarray, np.ndarray]:
    vertices, triangles = _icosahedron()
    for _ in range(refinement):
        vertices, triangles = _subdivide(vertices, triangles)
        vertices = vertices / np.linalg.norm(vertices, axis=1)[:, None]
    return vertices, triangles


def _unit_cube() -> Tuple[np.ndarray, np.ndarray]:
    vertices = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    triangles = []
    for a, b, c, d in quads:
        triangles.extend([(a, b, c), (a, c, d)])
    return vertices, _orient_outward(vertices, np.array(triangles, dtype=np.int64))


def _positive(values: Sequence[float], count: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.size == 1 and count > 1:
        arr = np.repeat(arr, count)
    if arr.shape != (count,) or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidArgumentError(f"{name} must be {count} positive number(s), got {values!r}")
    return arr


def make_canonical_mesh(shape: str, size: Union[float, Sequence[float]], refinement: int = 3,
                        center: Optional[Sequence[float]] = None) -> SurfaceMesh:
    """
    Build a sphere (radius), ellipsoid (semiaxes) or box (extents) surface.

    Spheres and ellipsoids are subdivided icosahedra; boxes are split cube
    faces, so their volume is exact at every refinement.
    """
    if int(refinement) < 0:
        raise InvalidArgumentError(f"refinement must be >= 0, got {refinement}")
    shape = shape.lower()
    if shape == 'sphere':
        radius = _positive(size, 1, 'radius')[0]
        vertices, triangles = _unit_sphere(int(refinement))
        vertices = vertices * radius
    elif shape == 'ellipsoid':
        semiaxes = _positive(size, 3, 'semiaxes')
        vertices, triangles = _unit_sphere(int(refinement))
        vertices = vertices * semiaxes[None, :]
    elif shape == 'box':
        extents = _positive(size, 3, 'extents')
        vertices, triangles = _unit_cube()
        for _ in range(int(refinement)):
            vertices, triangles = _subdivide(vertices, triangles)
        vertices = vertices * extents[None, :]
    else:
        raise InvalidArgumentError(f"unknown canonical shape '{shape}'")
    if center is not None:
        vertices = vertices + np.asarray(center, dtype=float)[None, :]
    return SurfaceMesh(vertices, triangles)


def transform_mesh(mesh: SurfaceMesh, rotation: Optional[np.ndarray] = None,
                   translation: Optional[Sequence[float]] = None,
                   scale: Optional[float] = None) -> SurfaceMesh:
    """Apply x -> R (s x) + t; R must be a proper rotation."""
    vertices = np.array(mesh.vertices)
    if scale is not None:
        if not scale > 0:
            raise InvalidArgumentError(f"scale must be positive, got {scale}")
        vertices = vertices * float(scale)
    if rotation is not None:
        R = np.asarray(rotation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-10) \
                or np.linalg.det(R) < 0:
            raise InvalidArgumentError("rotation must be a proper orthogonal 3x3 matrix")
        vertices = vertices @ R.T
    if translation is not None:
        vertices = vertices + np.asarray(translation, dtype=float)[None, :]
    return SurfaceMesh(vertices, mesh.triangles, validate=False)


def validate_topology(mesh: SurfaceMesh) -> None:
    """Closed, consistently oriented, connected and outward-facing."""
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    undirected, counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    if np.any(counts != 2):
        bad = undirected[counts != 2]
        raise TopologyError(f"open or non-manifold mesh: {len(bad)} edge(s) not shared by exactly "
                            f"two triangles, e.g. {bad[0].tolist()}")
    if len(np.unique(directed, axis=0)) != len(directed):
        raise TopologyError("inconsistent triangle orientation")
    graph = nx.Graph()
    graph.add_nodes_from(np.unique(t).tolist())
    graph.add_edges_from(map(tuple, undirected.tolist()))
    if not nx.is_connected(graph):
        raise TopologyError(
            f"mesh has {nx.number_connected_components(graph)} disconnected components")
    if _signed_volume(mesh) <= 0:
        raise TopologyError("normals point inward (divergence-theorem volume is not positive)")


def _signed_volume(mesh: SurfaceMesh) -> float:
    c = mesh.corners
    return float(np.einsum('ij,ij->i', c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def mesh_measures(mesh: SurfaceMesh) -> Dict[str, Any]:
    """Area, enclosed volume V and volume centroid (the particle reference point)."""
    c = mesh.corners
    tet = np.einsum('ij,ij->i', c[:, 0], np.cross(c[:, 1], c[:, 2])) / 6.0
    volume = float(tet.sum())
    if volume <= 0:
        raise TopologyError("mesh does not enclose a positive volume")
    centroid = (tet[:, None] * c.sum(axis=1) / 4.0).sum(axis=0) / volume
    return {
        'area': float(mesh.areas.sum()),
        'volume': volume,
        'centroid': centroid,
    }


def icosahedral_directions(count: int = 42) -> np.ndarray:
    """Unit directions from a subdivided icosahedron (12, 42 or 162 nodes)."""
    levels = {12: 0, 42: 1, 162: 2}
    if count not in levels:
        raise InvalidArgumentError(f"direction count must be one of {sorted(levels)}, got {count}")
    vertices, _ = _unit_sphere(levels[count])
    return vertices


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def subdivided_rule(spec: QuadratureSpec, levels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Barycentric nodes/weights of the rule applied on 4**levels sub-triangles."""
    bary, weights = spec.rule()
    tri = np.eye(3)[None]  # sub-triangle corners in barycentric coordinates
    for _ in range(levels):
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tri = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    nodes = np.einsum('qk,skj->sqj', bary, tri).reshape(-1, 3)
    w = np.tile(weights, len(tri)) / len(tri)
    return nodes, w


def _duffy_rule(apex: np.ndarray, corners: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on a flat triangle, polar-split around an interior point."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing='ij')
    wu, wv = np.meshgrid(w, w, indexing='ij')
    u, v, wuv = u.ravel(), v.ravel(), (wu * wv).ravel()
    points, weights = [], []
    for i in range(3):
        a, b = corners[i], corners[(i + 1) % 3]
        sub_area = 0.5 * np.linalg.norm(np.cross(a - apex, b - apex))
        if sub_area == 0.0:
            continue
        pts = apex[None] + u[:, None] * (a - apex)[None] + (u * v)[:, None] * (b - a)[None]
        points.append(pts)
        weights.append(2.0 * sub_area * u * wuv)
    return np.concatenate(points), np.concatenate(weights)


def locate_panel(mesh: SurfaceMesh, point: np.ndarray) -> Optional[int]:
    """Index of the panel containing a point on the surface, if any."""
    candidates = mesh.centroid_tree.query(point, k=min(12, mesh.n_panels))[1]
    for p in np.atleast_1d(candidates):
        corners = mesh.corners[p]
        normal = mesh.normals[p]
        h = mesh.panel_diameters[p]
        if abs(np.dot(point - corners[0], normal)) > 1e-9 * max(h, 1.0):
            continue
        e1, e2 = corners[1] - corners[0], corners[2] - corners[0]
        d = point - corners[0]
        gram = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
        lam = np.linalg.solve(gram, np.array([d @ e1, d @ e2]))
        if lam.min() >= -1e-12 and lam.sum() <= 1 + 1e-12:
            return int(p)
    return None


def surface_integral(mesh: SurfaceMesh, integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
                     spec: Optional[QuadratureSpec] = None,
                     singular_at: Optional[Sequence[float]] = None):
    """
    Integrate integrand(points, normals) over the surface.

    The integrand is called with arrays of shape (n, 3) and must return an
    array whose leading axis has length n; the result keeps the trailing
    shape. With `singular_at` on the surface, the containing panel is
    polar-split around the point and adjacent panels are subdivided.
    """
    spec = spec or QuadratureSpec()
    points, weights = mesh.rule_points(spec)
    P, nq = weights.shape
    panel_of = np.repeat(np.arange(P), nq)
    pts = points.reshape(-1, 3)
    nrm = np.repeat(mesh.normals, nq, axis=0)
    w = weights.reshape(-1)

    if singular_at is not None and spec.strategy != 'none':
        x = np.asarray(singular_at, dtype=float)
        host = locate_panel(mesh, x)
        near = np.linalg.norm(mesh.centroids - x[None], axis=1) < 2.0 * mesh.panel_diameters
        if host is not None:
            near[host] = False
        keep = ~np.isin(panel_of, np.flatnonzero(near) if host is None else
                        np.append(np.flatnonzero(near), host))
        extra_pts, extra_nrm, extra_w, extra_panel = [pts[keep]], [nrm[keep]], [w[keep]], [panel_of[keep]]
        sub_bary, sub_w = subdivided_rule(spec, spec.refinement + 1)
        for p in np.flatnonzero(near):
            extra_pts.append(sub_bary @ mesh.corners[p])
            extra_w.append(sub_w * mesh.areas[p])
            extra_nrm.append(np.repeat(mesh.normals[p][None], len(sub_w), axis=0))
            extra_panel.append(np.full(len(sub_w), p))
        if host is not None:
            if spec.strategy == 'duffy':
                hp, hw = _duffy_rule(x, mesh.corners[host], max(6, 2 * spec.order + 2))
            else:
                deep_bary, deep_w = subdivided_rule(QuadratureSpec(2), spec.refinement + 2)
                hp, hw = deep_bary @ mesh.corners[host], deep_w * mesh.areas[host]
            extra_pts.append(hp)
            extra_w.append(hw)
            extra_nrm.append(np.repeat(mesh.normals[host][None], len(hw), axis=0))
            extra_panel.append(np.full(len(hw), host))
        pts = np.concatenate(extra_pts)
        nrm = np.concatenate(extra_nrm)
        w = np.concatenate(extra_w)
        panel_of = np.concatenate(extra_panel)

    with np.errstate(divide='ignore', invalid='ignore'):
        values = np.asarray(integrand(pts, nrm))
    if values.shape[0] != len(w):
        raise InvalidArgumentError(
            f"integrand returned leading dimension {values.shape[0]}, expected {len(w)}")
    finite = np.isfinite(values.reshape(len(w), -1)).all(axis=1)
    if not finite.all():
        raise QuadratureError("integrand produced non-finite values",
                              panels=np.unique(panel_of[~finite])[:10])
    return np.tensordot(w, values, axes=(0, 0))


# ---------------------------------------------------------------------------
# Dense panel operators
# ---------------------------------------------------------------------------

def _kernel_one_over_r(targets, target_normals, sources):
    return 1.0 / np.linalg.norm(targets - sources, axis=-1)


def _kernel_psi(targets, target_normals, sources):
    d = targets - sources
    r = np.linalg.norm(d, axis=-1)
    return -np.einsum('...k,...k->...', d, target_normals) / r ** 3


def self_integral_one_over_r(mesh: SurfaceMesh, points: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Exact integral of 1/|x - s| over each panel for a point x in that panel.

    Polar split around x: each edge contributes h (asinh(s2/h) - asinh(s1/h)),
    h being the distance from x to the edge line.
    """
    x = mesh.centroids if points is None else np.asarray(points, dtype=float)
    c = mesh.corners
    total = np.zeros(len(x))
    for i in range(3):
        a, b = c[:, i], c[:, (i + 1) % 3]
        length = np.linalg.norm(b - a, axis=1)
        e = (b - a) / length[:, None]
        foot = a + np.einsum('ij,ij->i', x - a, e)[:, None] * e
        h = np.linalg.norm(x - foot, axis=1)
        s1 = np.einsum('ij,ij->i', a - foot, e)
        s2 = np.einsum('ij,ij->i', b - foot, e)
        with np.errstate(divide='ignore', invalid='ignore'):
            contrib = h * (np.arcsinh(s2 / h) - np.arcsinh(s1 / h))
        total += np.where(h > 1e-14 * length, contrib, 0.0)
    return total


def _assemble(mesh: SurfaceMesh, spec: QuadratureSpec, kernel, chunk: int = 256) -> np.ndarray:
    """Regular part of a panel operator: row p = integral over each panel q seen from centroid p."""
    points, weights = mesh.rule_points(spec)
    P = mesh.n_panels
    out = np.empty((P, P))
    centroids, normals = mesh.centroids, mesh.normals
    _LOGGER.debug("assembling %d x %d panel operator in blocks of %d rows", P, P, chunk)

    def fill(block: Tuple[int, int]) -> None:
        start, stop = block
        with np.errstate(divide='ignore', invalid='ignore'):
            values = kernel(centroids[start:stop, None, None, :],
                            normals[start:stop, None, None, :], points[None])
        out[start:stop] = np.einsum('mpq,pq->mp', values, weights)

    parallel_map(fill, chunk_ranges(P, chunk))

    if spec.strategy != 'none' and len(mesh.adjacent_pairs):
        pairs = mesh.adjacent_pairs
        sub_bary, sub_w = subdivided_rule(spec, max(1, spec.refinement))
        src = np.einsum('qk,pkd->pqd', sub_bary, mesh.corners[pairs[:, 1]])
        with np.errstate(divide='ignore', invalid='ignore'):
            values = kernel(centroids[pairs[:, 0], None, :], normals[pairs[:, 0], None, :], src)
        out[pairs[:, 0], pairs[:, 1]] = values @ sub_w * mesh.areas[pairs[:, 1]]
    return out


def _check_finite(matrix: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(matrix)
    if bad.any():
        p, q = np.argwhere(bad)[0]
        raise QuadratureError(f"{name}: quadrature failed on singular pair", panels=(p, q))


def single_layer_matrix(mesh: SurfaceMesh, spec: Optional[QuadratureSpec] = None) -> np.ndarray:
    """S[p, q] ~ integral over panel q of 1/|c_p - s| ds."""
    spec = spec or QuadratureSpec()
    S = _assemble(mesh, spec, _kernel_one_over_r)
    idx = np.arange(mesh.n_panels)
    if spec.strategy == 'duffy':
        S[idx, idx] = self_integral_one_over_r(mesh)
    elif spec.strategy == 'subdivide':
        bary, w = subdivided_rule(QuadratureSpec(2), spec.refinement + 2)
        src = np.einsum('qk,pkd->pqd', bary, mesh.corners)
        r = np.linalg.norm(mesh.centroids[:, None, :] - src, axis=-1)
        S[idx, idx] = (1.0 / r) @ w * mesh.areas
    _check_finite(S, 'single layer')
    return S


def normal_derivative_matrix(mesh: SurfaceMesh, spec: Optional[QuadratureSpec] = None) -> np.ndarray:
    """
    K[p, q] ~ integral over panel q of psi(c_p, s) ds, psi(t, s) = d/dN_t 1/|t - s|.

    Self terms vanish on a flat panel; the diagonal is then set from the
    solid-angle identity  integral_S psi(t, s) dt = -2 pi  so that the
    discrete operator preserves it column by column.
    """
    spec = spec or QuadratureSpec()
    K = _assemble(mesh, spec, _kernel_psi)
    idx = np.arange(mesh.n_panels)
    K[idx, idx] = 0.0
    if spec.strategy != 'none':
        areas = mesh.areas
        column = areas @ K
        K[idx, idx] = (-2.0 * np.pi * areas - column) / areas
    _check_finite(K, 'normal derivative')
    return K


# ---------------------------------------------------------------------------
# Mesh files
# ---------------------------------------------------------------------------

def load_mesh(path: Union[str, Path]) -> SurfaceMesh:
    """Read the ASCII 'nv nt' triangle format or an STL file (normals recomputed)."""
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"mesh file not found: {path}")
    if path.suffix.lower() == '.stl':
        import trimesh
        loaded = trimesh.load(str(path), force='mesh', process=True)
        if not isinstance(loaded, trimesh.Trimesh):
            raise TopologyError(f"failed to load a triangle mesh from '{path}'")
        return SurfaceMesh(loaded.vertices, loaded.faces)

    with open(path, 'r') as f:
        lines = [line.split('#')[0].strip() for line in f]
    lines = [line for line in lines if line]
    try:
        nv, nt = (int(x) for x in lines[0].split()[:2])
        vertices = np.array([[float(x) for x in line.split()[:3]] for line in lines[1:1 + nv]])
        triangles = np.array([[int(x) for x in line.split()[:3]]
                              for line in lines[1 + nv:1 + nv + nt]], dtype=np.int64)
    except (ValueError, IndexError) as e:
        raise InvalidArgumentError(f"malformed mesh file '{path}': {e}")
    if len(vertices) != nv or len(triangles) != nt:
        raise InvalidArgumentError(
            f"mesh file '{path}' declares {nv} vertices / {nt} triangles, "
            f"found {len(vertices)} / {len(triangles)}")
    return SurfaceMesh(vertices, triangles)


def write_mesh(mesh: SurfaceMesh, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, 'w') as f:
        f.write(f"{len(mesh.vertices)} {mesh.n_panels}\n")
        for x, y, z in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in mesh.triangles:
            f.write(f"{i} {j} {k}\n")
    return path
