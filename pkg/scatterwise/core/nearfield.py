"""
Fields next to one particle from a tangential surface current

The scattered field is represented as E_s(x) = curl integral_S Phi(x, s) j(s) ds
with Phi = e^{ikr}/r. Imposing N x E = 0 from outside gives the second-kind
equation

    j(t) + integral_S N(t) x (grad_t G(t, s) x j(s)) ds = -(1/2 pi) N(t) x E_exc(t),

G = Phi / (2 pi), solved with one constant current per flat panel expressed
in the panel's tangent basis.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse

from ..utils.errors import (
    InvalidArgumentError, QuadratureError, SingularEvaluationError, SingularSystemError,
)
from ..utils.helpers import chunk_ranges, lu_with_condition, max_norm, parallel_map
from .geometry import QuadratureSpec, SurfaceMesh, locate_panel, subdivided_rule
from .multiparticle import IncidentField, LocalFields, ParticleInstance, scattered_at
from .scattering import WaveContext

_LOGGER = logging.getLogger(__name__)

EIGENVALUE_CONDITION = 1e8

Excitation = Callable[[np.ndarray], np.ndarray]


@dataclass
class BoundaryOperatorA:
    """Dense (2P, 2P) matrix acting on tangent-basis current coefficients."""

    matrix: np.ndarray
    mesh: SurfaceMesh
    k: float
    spec: QuadratureSpec

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Apply to per-panel 3-vectors; normal components are projected out."""
        coeffs = to_tangent(self.mesh, vectors)
        return from_tangent(self.mesh, (self.matrix @ coeffs.reshape(-1)).reshape(-1, 2))


@dataclass
class SurfaceCurrent:
    mesh: SurfaceMesh
    coefficients: np.ndarray
    k: float
    residual: float = 0.0
    condition: Optional[float] = None
    spec: QuadratureSpec = QuadratureSpec()

    @property
    def vectors(self) -> np.ndarray:
        """Current per panel as global 3-vectors, (P, 3)."""
        return from_tangent(self.mesh, self.coefficients)


def to_tangent(mesh: SurfaceMesh, vectors: np.ndarray) -> np.ndarray:
    tau1, tau2 = mesh.tangents
    v = np.asarray(vectors)
    return np.stack([np.einsum('pd,pd->p', v, tau1), np.einsum('pd,pd->p', v, tau2)], axis=1)


def from_tangent(mesh: SurfaceMesh, coefficients: np.ndarray) -> np.ndarray:
    tau1, tau2 = mesh.tangents
    c = np.asarray(coefficients)
    return c[:, :1] * tau1 + c[:, 1:] * tau2


def _grad_G(diff: np.ndarray, k: float) -> np.ndarray:
    """grad_t e^{ikr}/(2 pi r) for diff = t - s."""
    r = np.linalg.norm(diff, axis=-1)
    coef = np.exp(1j * k * r) * (1j * k * r - 1.0) / (2.0 * np.pi * r ** 3)
    return coef[..., None] * diff


def _neighbour_pairs(mesh: SurfaceMesh, owners: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(target index, panel) pairs for panels sharing a vertex with each target's own panel."""
    P = mesh.n_panels
    pairs = mesh.adjacent_pairs
    adj = scipy.sparse.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(P, P))
    counts = np.diff(adj.indptr)[owners]
    targets = np.repeat(np.arange(len(owners)), counts)
    if len(targets) == 0:
        return targets, targets
    panels = np.concatenate([adj.indices[adj.indptr[o]:adj.indptr[o + 1]] for o in owners])
    return targets, panels


def gradient_moments(mesh: SurfaceMesh, k: float, spec: QuadratureSpec, targets: np.ndarray,
                     owners: np.ndarray) -> np.ndarray:
    """
    W[i, q] = integral over panel q of grad_t G(t_i, s) ds for surface targets
    t_i lying on panel owners[i]; zero on the owner panel, shape (m, P, 3).
    """
    points, weights = mesh.rule_points(spec)
    with np.errstate(divide='ignore', invalid='ignore'):
        values = _grad_G(targets[:, None, None, :] - points[None], k)
    W = np.einsum('mpqd,pq->mpd', values, weights)
    ti, tq = _neighbour_pairs(mesh, owners)
    if len(ti):
        bary, sub_w = subdivided_rule(spec, max(1, spec.refinement))
        src = np.einsum('qk,pkd->pqd', bary, mesh.corners[tq])
        g = _grad_G(targets[ti, None, :] - src, k)
        W[ti, tq] = np.einsum('nsd,s->nd', g, sub_w) * mesh.areas[tq, None]
    W[np.arange(len(owners)), owners] = 0.0
    return W


def assemble_A(mesh: SurfaceMesh, ctx: WaveContext, spec: Optional[QuadratureSpec] = None,
               chunk: int = 128) -> BoundaryOperatorA:
    """Collocation matrix of j -> integral N x (grad G x j) in the tangent bases."""
    spec = spec or QuadratureSpec()
    P = mesh.n_panels
    tau = np.stack(mesh.tangents, axis=1)  # (P, 2, 3)
    normals = mesh.normals
    A = np.empty((2 * P, 2 * P), dtype=complex)
    _LOGGER.info("assembling boundary operator: %d panels, k=%g", P, ctx.k)

    def fill(block: Tuple[int, int]) -> None:
        start, stop = block
        rows = np.arange(start, stop)
        W = gradient_moments(mesh, ctx.k, spec, mesh.centroids[rows], rows)
        n = normals[rows]
        tW = np.einsum('mad,mqd->maq', tau[rows], W)        # tau_a(p) . W_pq
        nW = np.einsum('md,mqd->mq', n, W)                  # N_p . W_pq
        n_tau = np.einsum('md,qbd->mqb', n, tau)            # N_p . tau_b(q)
        tau_tau = np.einsum('mad,qbd->maqb', tau[rows], tau)
        block_values = tW[:, :, :, None] * n_tau[:, None, :, :] - tau_tau * nW[:, None, :, None]
        A[2 * start:2 * stop] = block_values.reshape(2 * (stop - start), 2 * P)

    parallel_map(fill, chunk_ranges(P, chunk))
    bad = ~np.isfinite(A)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise QuadratureError("boundary operator: quadrature failed on panel pair",
                              panels=(int(row) // 2, int(col) // 2))
    return BoundaryOperatorA(matrix=A, mesh=mesh, k=ctx.k, spec=spec)


def solve_current(mesh: SurfaceMesh, A: BoundaryOperatorA, exciting_E: np.ndarray,
                  strict: bool = False) -> SurfaceCurrent:
    """
    Solve (A + I) j = -(1/2 pi) N x E_exc with E_exc sampled at panel centroids.

    A condition estimate above 1e8 signals k^2 near an interior eigenvalue:
    a warning, or SingularSystemError when strict.
    """
    E = np.asarray(exciting_E, dtype=complex)
    if E.shape != (mesh.n_panels, 3):
        raise InvalidArgumentError(f"exciting field must have shape ({mesh.n_panels}, 3)")
    rhs = to_tangent(mesh, -np.cross(mesh.normals, E) / (2.0 * np.pi)).reshape(-1)
    # one Fortran-ordered copy, factorized in place
    system = np.array(A.matrix, order='F')
    system[np.diag_indices_from(system)] += 1.0
    lu_piv, condition = lu_with_condition(system, overwrite=True)
    if not np.isfinite(condition) or condition > EIGENVALUE_CONDITION:
        message = (f"surface-current system is ill-conditioned (cond ~ {condition:.3e}); "
                   "k^2 may be close to an interior eigenvalue")
        if strict or not np.isfinite(condition):
            raise SingularSystemError(message, condition=condition)
        _LOGGER.warning(message)
    x = scipy.linalg.lu_solve(lu_piv, rhs)
    residual = max_norm(A.matrix @ x + x - rhs)
    _LOGGER.info("surface current: cond=%.3e, residual=%.3e", condition, residual)
    return SurfaceCurrent(mesh=mesh, coefficients=x.reshape(-1, 2), k=A.k, residual=residual,
                          condition=condition, spec=A.spec)


def _check_off_surface(mesh: SurfaceMesh, points: np.ndarray) -> None:
    for x in points:
        panel = locate_panel(mesh, x)
        if panel is not None:
            raise SingularEvaluationError(
                f"point {x.tolist()} lies on panel {panel}; evaluate at an offset point")


def _layer_integrand(diff: np.ndarray, j: np.ndarray, k: float, kind: str) -> np.ndarray:
    """Integrands of curl(Phi j) ('E') and curl curl(Phi j) ('H', without 1/(i omega mu0))."""
    r = np.linalg.norm(diff, axis=-1)
    phase = np.exp(1j * k * r)
    d1 = phase * (1j * k / r - 1.0 / r ** 2)
    if kind == 'E':
        return np.cross((d1 / r)[..., None] * diff, j)
    d2 = phase * (-k ** 2 / r - 2j * k / r ** 2 + 2.0 / r ** 3)
    rhat = diff / r[..., None]
    rj = np.einsum('...d,...d->...', rhat, j)
    phi = phase / r
    return ((d2 - d1 / r) * rj)[..., None] * rhat + (d1 / r + k ** 2 * phi)[..., None] * j


def _layer_field(points: np.ndarray, current: SurfaceCurrent, kind: str,
                 chunk: int = 64) -> np.ndarray:
    mesh = current.mesh
    spec = current.spec
    k = current.k
    j = current.vectors
    nodes, weights = mesh.rule_points(spec)
    bary, sub_w = subdivided_rule(spec, spec.refinement + 2)
    out = np.zeros((len(points), 3), dtype=complex)

    def fill(block: Tuple[int, int]) -> None:
        start, stop = block
        x = points[start:stop]
        near = (np.linalg.norm(x[:, None, :] - mesh.centroids[None], axis=2)
                < 2.0 * mesh.panel_diameters[None, :])
        values = _layer_integrand(x[:, None, None, :] - nodes[None], j[None, :, None, :], k, kind)
        values[near] = 0.0
        total = np.einsum('mpqd,pq->md', values, weights)
        mi, pq = np.nonzero(near)
        if len(mi):
            src = np.einsum('sk,nkd->nsd', bary, mesh.corners[pq])
            vals = _layer_integrand(x[mi, None, :] - src, j[pq, None, :], k, kind)
            contrib = np.einsum('nsd,s->nd', vals, sub_w) * mesh.areas[pq, None]
            np.add.at(total, mi, contrib)
        out[start:stop] = total

    parallel_map(fill, chunk_ranges(len(points), chunk))
    return out


def _as_points(x) -> Tuple[np.ndarray, bool]:
    points = np.asarray(x, dtype=float)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    if points.shape[1] != 3:
        raise InvalidArgumentError("evaluation points must be 3-vectors")
    return points, single


def near_field_E(x, current: SurfaceCurrent, exciting: Optional[Excitation] = None) -> np.ndarray:
    """E_exc(x) + curl integral Phi j ds at exterior points; exciting returns (m, 6) values."""
    points, single = _as_points(x)
    _check_off_surface(current.mesh, points)
    E = _layer_field(points, current, 'E')
    if exciting is not None:
        E = E + np.asarray(exciting(points))[:, :3]
    return E[0] if single else E


def near_field_H(x, current: SurfaceCurrent, ctx: WaveContext,
                 exciting: Optional[Excitation] = None) -> np.ndarray:
    """H_exc(x) + (1/(i omega mu0)) curl curl integral Phi j ds."""
    points, single = _as_points(x)
    _check_off_surface(current.mesh, points)
    H = _layer_field(points, current, 'H') / (1j * ctx.angular_frequency * ctx.mu0)
    if exciting is not None:
        H = H + np.asarray(exciting(points))[:, 3:]
    return H[0] if single else H


def near_field(x, current: SurfaceCurrent, ctx: WaveContext,
               exciting: Optional[Excitation] = None) -> np.ndarray:
    """Stacked (E, H) 6-vectors."""
    E = near_field_E(x, current, exciting)
    H = near_field_H(x, current, ctx, exciting)
    return np.concatenate([E, H], axis=-1)


def vertex_interpolated_current(current: SurfaceCurrent, owners: np.ndarray,
                                bary: np.ndarray) -> np.ndarray:
    """
    Current at points inside panels: area-weighted vertex averages interpolated
    linearly and projected onto the owner panel's tangent plane.
    """
    mesh = current.mesh
    j = current.vectors
    nv = len(mesh.vertices)
    at_vertex = np.zeros((nv, 3), dtype=complex)
    weight = np.zeros(nv)
    for c in range(3):
        np.add.at(at_vertex, mesh.triangles[:, c], mesh.areas[:, None] * j)
        np.add.at(weight, mesh.triangles[:, c], mesh.areas)
    at_vertex /= weight[:, None]
    values = np.einsum('mk,mkd->md', bary, at_vertex[mesh.triangles[owners]])
    n = mesh.normals[owners]
    return values - np.einsum('md,md->m', values, n)[:, None] * n


def boundary_residual(mesh: SurfaceMesh, current: SurfaceCurrent, exciting: Excitation,
                      chunk: int = 128) -> float:
    """
    max |N x E| on the boundary relative to max |E_exc|, at the three interior
    nodes (2/3, 1/6, 1/6) of every panel.

    Uses the exterior limit N x E = N x E_exc + 2 pi (j + integral N x (grad G x j)).
    """
    bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    owners = np.repeat(np.arange(mesh.n_panels), 3)
    node_bary = np.tile(bary, (mesh.n_panels, 1))
    nodes = np.einsum('mk,mkd->md', node_bary, mesh.corners[owners])
    normals = mesh.normals[owners]
    E_exc = np.asarray(exciting(nodes))[:, :3]
    j_nodes = vertex_interpolated_current(current, owners, node_bary)
    j = current.vectors
    trace = np.empty((len(nodes), 3), dtype=complex)

    def fill(block: Tuple[int, int]) -> None:
        start, stop = block
        W = gradient_moments(mesh, current.k, current.spec, nodes[start:stop], owners[start:stop])
        n = normals[start:stop]
        nj = j @ n.T  # (P, m): N_t . j_q
        nW = np.einsum('md,mqd->mq', n, W)
        layer = np.einsum('mqd,qm->md', W, nj) - np.einsum('mq,qd->md', nW, j)
        trace[start:stop] = (np.cross(n, E_exc[start:stop])
                             + 2.0 * np.pi * (j_nodes[start:stop] + layer))

    parallel_map(fill, chunk_ranges(len(nodes), chunk))
    scale = max(float(np.max(np.linalg.norm(E_exc, axis=1))), 1e-300)
    return float(np.max(np.linalg.norm(trace, axis=1)) / scale)


def exciting_field_from_scene(index: int, fields: LocalFields, particles: Sequence[ParticleInstance],
                              incident: IncidentField, ctx: WaveContext) -> Excitation:
    """U0 + sum_{i != index} g S_i V_i as a sampler of (m, 6) values."""
    if not 0 <= index < len(particles):
        raise InvalidArgumentError(f"particle index {index} out of range")
    others = [p for i, p in enumerate(particles) if i != index]
    other_fields = LocalFields(values=np.delete(fields.values, index, axis=0))

    def sample(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        values = incident.at(points, ctx)
        if others:
            values = values + scattered_at(points, other_fields, others, ctx)
        return values

    return sample


def incident_excitation(incident: IncidentField, ctx: WaveContext) -> Excitation:
    return lambda points: incident.at(np.atleast_2d(points), ctx)
