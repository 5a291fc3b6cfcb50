"""
N-particle scattering: the 6N-unknown linear system for the local fields

    V_j = U0(x_j) + sum_{i != j} g(x_j, x_i) S_i(n_ji) V_i,

its diagonal-dominance diagnostics, the fixed-point and direct solvers, and
evaluation of the total field away from the particles.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from ..utils.errors import (
    ConfigurationError, InvalidArgumentError, NonConvergenceError, OutOfRegionError,
    RegimeViolationError, SingularSystemError,
)
from ..utils.helpers import (
    as_complex, as_vector, lu_with_condition, max_norm, parallel_map, row_sum_norm, unit,
)
from .geometry import QuadratureSpec, SurfaceMesh, mesh_measures, transform_mesh
from .polarizability import (
    BChain, MaterialContrast, PolarizabilityTensor, alpha_approx, beta_tensor, electric_tensor,
    zero_tensor,
)
from .scattering import WaveContext, farzone_error_report, green_r, s_operator_batch

_LOGGER = logging.getLogger(__name__)

DEFAULT_DENSE_CAP = 2000
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class ParticleInstance:
    """A small particle: reference point, tensors (global axes), volume and size a."""

    center: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    volume: float
    size: float
    contrast: Optional[MaterialContrast] = None
    shape: str = 'ball'
    mesh: Optional[SurfaceMesh] = None
    alpha_info: Optional[PolarizabilityTensor] = None
    beta_info: Optional[PolarizabilityTensor] = None

    def __post_init__(self):
        object.__setattr__(self, 'center', as_vector(self.center, name='center'))
        for name in ('alpha', 'beta'):
            tensor = np.asarray(getattr(self, name), dtype=complex)
            if tensor.shape != (3, 3):
                raise InvalidArgumentError(f"{name} must be a 3x3 tensor, got shape {tensor.shape}")
            object.__setattr__(self, name, tensor)

    def moved(self, center: Sequence[float]) -> 'ParticleInstance':
        """Same particle translated so its reference point sits at `center`."""
        center = as_vector(center, name='center')
        mesh = self.mesh
        if mesh is not None:
            mesh = transform_mesh(mesh, translation=center - self.center)
        return replace(self, center=center, mesh=mesh)


def particle_from_ball(center: Sequence[float], radius: float, contrast: MaterialContrast) -> ParticleInstance:
    if not radius > 0:
        raise InvalidArgumentError(f"ball radius must be positive, got {radius}")
    alpha = electric_tensor(None, contrast)
    beta = beta_tensor(None, contrast, size=radius)
    return ParticleInstance(
        center=as_vector(center, name='center'),
        alpha=alpha.tensor, beta=beta.tensor,
        volume=4.0 / 3.0 * np.pi * radius ** 3, size=float(radius),
        contrast=contrast, shape='ball', alpha_info=alpha, beta_info=beta,
    )


def particle_from_mesh(mesh: SurfaceMesh, contrast: MaterialContrast,
                       spec: Optional[QuadratureSpec] = None, tol: float = 1e-8,
                       max_order: int = 30, shape: str = 'mesh',
                       panel_budget: Optional[int] = None,
                       order: Optional[int] = None) -> ParticleInstance:
    """
    Tensors from the boundary series; the volume centroid is the reference point.

    order None raises the series order adaptively up to max_order; a fixed
    order evaluates alpha^(order) directly.
    """
    measures = mesh_measures(mesh)
    kwargs = {} if panel_budget is None else {'panel_budget': panel_budget}
    chain = BChain(mesh, spec, **kwargs)
    if order is None:
        alpha = electric_tensor(mesh, contrast, chain=chain, tol=tol, max_order=max_order)
        beta = beta_tensor(mesh, contrast, chain=chain, tol=tol, max_order=max_order)
    else:
        gamma = contrast.gamma_eps
        alpha = alpha_approx(mesh, gamma, order, chain=chain) if gamma != 0 else zero_tensor()
        beta = beta_tensor(mesh, contrast, n=order, chain=chain)
    return ParticleInstance(
        center=measures['centroid'], alpha=alpha.tensor, beta=beta.tensor,
        volume=measures['volume'], size=mesh.characteristic_size,
        contrast=contrast, shape=shape, mesh=mesh, alpha_info=alpha, beta_info=beta,
    )


@dataclass(frozen=True)
class IncidentField:
    """
    Incident field U0: a plane wave, or a user sampler returning (m, 6) values.

    The plane wave is E = amplitude * polarization * e^{ik d.x} with
    H = sqrt(eps0/mu0) d x E.
    """

    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    polarization: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0], dtype=complex))
    amplitude: complex = 1.0
    sampler: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @classmethod
    def plane_wave(cls, direction: Sequence[float], polarization: Sequence[Any],
                   amplitude: Any = 1.0) -> 'IncidentField':
        d = unit(direction, 'incident direction')
        p = as_vector(polarization, name='polarization', dtype=complex)
        norm = np.linalg.norm(p)
        if norm == 0:
            raise InvalidArgumentError("polarization must be non-zero")
        p = p / norm
        if abs(np.dot(d, p)) > 1e-10:
            raise InvalidArgumentError("polarization must be transverse to the incident direction")
        return cls(direction=d, polarization=p, amplitude=as_complex(amplitude, 'amplitude'))

    @classmethod
    def zero(cls) -> 'IncidentField':
        return cls(amplitude=0.0)

    def scaled(self, factor: complex) -> 'IncidentField':
        if self.sampler is not None:
            base = self.sampler
            return replace(self, sampler=lambda points: factor * base(points))
        return replace(self, amplitude=self.amplitude * factor)

    def at(self, points: np.ndarray, ctx: WaveContext) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.sampler is not None:
            values = np.asarray(self.sampler(points), dtype=complex)
            if values.shape != (len(points), 6):
                raise InvalidArgumentError(f"incident sampler must return shape ({len(points)}, 6)")
            return values
        phase = np.exp(1j * ctx.k * points @ self.direction)
        E = self.amplitude * phase[:, None] * self.polarization[None, :]
        H = ctx.admittance * np.cross(self.direction[None, :], E)
        return np.hstack([E, H])


@dataclass
class LocalFields:
    """Solved local 6-vectors V(x_j) with solver diagnostics."""

    values: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    route: str = 'fixed-point'
    history: List[float] = field(default_factory=list)
    rate: Optional[float] = None
    condition: Optional[float] = None

    def __len__(self) -> int:
        return len(self.values)


def centers_of(particles: Sequence[ParticleInstance]) -> np.ndarray:
    if not particles:
        return np.zeros((0, 3))
    return np.array([p.center for p in particles], dtype=float)


def min_distance(particles: Sequence[ParticleInstance]) -> float:
    """Smallest pairwise center distance; inf for fewer than two particles."""
    if len(particles) < 2:
        return float('inf')
    d = float(pdist(centers_of(particles)).min())
    if d == 0.0:
        raise ConfigurationError("two particles share the same reference point")
    return d


def guard_radius(particles: Sequence[ParticleInstance]) -> float:
    """Exclusion radius around each particle: d, or 10 a for a single particle."""
    if not particles:
        return 0.0
    if len(particles) == 1:
        return 10.0 * particles[0].size
    return min_distance(particles)


def regime_report(particles: Sequence[ParticleInstance], ctx: WaveContext,
                  ka_max: float = 0.2, kd_min: float = 10.0) -> Dict[str, Any]:
    """Far-zone margins (ka, kd, a/d) per particle against its nearest neighbour."""
    if not particles:
        return {'regime_ok': True, 'particles': [], 'ka_max': 0.0, 'kd_min': float('inf')}
    centers = centers_of(particles)
    if len(particles) > 1:
        dist, _ = cKDTree(centers).query(centers, k=2)
        nearest = dist[:, 1]
    else:
        nearest = np.array([float('inf')])
    rows = []
    for j, (p, d) in enumerate(zip(particles, nearest)):
        if d == 0.0:
            raise ConfigurationError(f"particle {j} coincides with another particle")
        report = farzone_error_report(p.size, float(d), ctx.k, ka_max=ka_max, kd_min=kd_min)
        report['particle'] = j
        rows.append(report)
    return {
        'regime_ok': all(r['regime_ok'] for r in rows),
        'particles': rows,
        'ka_max': max(r['ka'] for r in rows),
        'kd_min': min(r['kd'] for r in rows),
    }


def _source_blocks(particle: ParticleInstance, index: int, centers: np.ndarray,
                   ctx: WaveContext) -> np.ndarray:
    """g(x_j, x_i) S_i(n_ji) for every target j, shape (N, 6, 6); zero at j == i."""
    diff = centers - particle.center[None, :]
    dist = np.linalg.norm(diff, axis=1)
    dist[index] = 1.0
    if np.any(dist == 0.0):
        raise ConfigurationError(f"particle {index} coincides with another particle")
    n = diff / dist[:, None]
    n[index] = (0.0, 0.0, 1.0)
    blocks = s_operator_batch(particle.alpha, particle.beta, n, ctx, particle.volume)
    blocks = blocks * green_r(dist, ctx.k)[:, None, None]
    blocks[index] = 0.0
    return blocks


class InteractionOperator:
    """
    The off-diagonal part T of the system V = U0 + T V.

    Blocks are kept densely up to `dense_cap` particles and streamed per
    source particle above it.
    """

    def __init__(self, particles: Sequence[ParticleInstance], ctx: WaveContext,
                 dense_cap: int = DEFAULT_DENSE_CAP):
        self.particles = list(particles)
        self.ctx = ctx
        self.dense_cap = dense_cap
        self.centers = centers_of(self.particles)
        min_distance(self.particles)
        self._blocks: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.particles)

    def blocks(self) -> np.ndarray:
        """T[j, i] as an (N, N, 6, 6) array."""
        if self._blocks is None:
            N = len(self.particles)
            if N > self.dense_cap:
                raise InvalidArgumentError(
                    f"{N} particles exceed the dense cap of {self.dense_cap}")
            columns = parallel_map(
                lambda i: _source_blocks(self.particles[i], i, self.centers, self.ctx), range(N))
            self._blocks = np.stack(columns, axis=1) if N else np.zeros((0, 0, 6, 6), dtype=complex)
        return self._blocks

    def apply(self, values: np.ndarray) -> np.ndarray:
        N = len(self.particles)
        if N <= self.dense_cap:
            return np.einsum('jiab,ib->ja', self.blocks(), values)
        out = np.zeros((N, 6), dtype=complex)
        for i, particle in enumerate(self.particles):
            out += _source_blocks(particle, i, self.centers, self.ctx) @ values[i]
        return out

    def matrix(self) -> np.ndarray:
        """Dense 6N x 6N matrix T."""
        N = len(self.particles)
        return self.blocks().transpose(0, 2, 1, 3).reshape(6 * N, 6 * N)


def interaction_matrix(particles: Sequence[ParticleInstance], ctx: WaveContext,
                       dense_cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """System matrix I - T of the 6N local-field unknowns."""
    T = InteractionOperator(particles, ctx, dense_cap).matrix()
    return np.eye(len(T), dtype=complex) - T


def dominance_bound(particles: Sequence[ParticleInstance], ctx: WaveContext,
                    dense_cap: int = DEFAULT_DENSE_CAP,
                    operator: Optional['InteractionOperator'] = None) -> Dict[str, Any]:
    """
    Diagonal-dominance diagnostics of the local-field system.

    bound    max_j row-sum norm of [T_j1 ... T_jN]; contraction factor of the iteration
    bound_summed max_j row-sum norm of sum_i T_ji (never above bound)
    bound_distance max_j sum_i ||S_i|| / (k |x_j - x_i|) (never below bound)

    An already built `operator` is reused, so its dense blocks are assembled once.
    """
    N = len(particles)
    if N < 2:
        return {'bound': 0.0, 'bound_summed': 0.0, 'bound_distance': 0.0, 'dominant': True,
                'min_distance': float('inf')}
    op = operator if operator is not None else InteractionOperator(particles, ctx, dense_cap)
    dense_cap = op.dense_cap
    if N <= dense_cap:
        T = op.blocks()
        absT = np.abs(T)
        bound = float(np.max(absT.sum(axis=(1, 3))))
        bound_summed = float(max(row_sum_norm(T[j].sum(axis=0)) for j in range(N)))
        norms = absT.sum(axis=3).max(axis=2)  # ||T_ji|| = |g_ji| ||S_i||
        bound_distance = float(norms.sum(axis=1).max())
    else:
        rows = np.zeros((N, 6))
        summed = np.zeros((N, 6, 6), dtype=complex)
        norm_sum = np.zeros(N)
        for i, p in enumerate(particles):
            blocks = _source_blocks(p, i, op.centers, ctx)
            rows += np.abs(blocks).sum(axis=2)
            summed += blocks
            norm_sum += np.abs(blocks).sum(axis=2).max(axis=1)
        bound = float(rows.max())
        bound_summed = float(max(row_sum_norm(s) for s in summed))
        bound_distance = float(norm_sum.max())
    _LOGGER.info("dominance bound %.3e (N=%d)", bound, N)
    return {
        'bound': bound,
        'bound_summed': bound_summed,
        'bound_distance': bound_distance,
        'dominant': bound < 1.0,
        'min_distance': min_distance(particles),
    }


def _residual(op: InteractionOperator, values: np.ndarray, incident_values: np.ndarray) -> float:
    if len(values) == 0:
        return 0.0
    return max_norm(values - incident_values - op.apply(values))


def solve_direct(particles: Sequence[ParticleInstance], incident: IncidentField, ctx: WaveContext,
                 dense_cap: int = DEFAULT_DENSE_CAP) -> LocalFields:
    """Dense LU solve of (I - T) V = U0."""
    N = len(particles)
    if N > dense_cap:
        raise ConfigurationError(f"{N} particles exceed the dense solver cap of {dense_cap}")
    op = InteractionOperator(particles, ctx, dense_cap)
    U0 = incident.at(op.centers, ctx) if N else np.zeros((0, 6), dtype=complex)
    if N == 0:
        return LocalFields(values=U0, route='direct')
    A = np.eye(6 * N, dtype=complex) - op.matrix()
    lu_piv, condition = lu_with_condition(A)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularSystemError(
            f"local-field system is singular or ill-conditioned (cond ~ {condition:.3e})",
            condition=condition)
    values = scipy.linalg.lu_solve(lu_piv, U0.reshape(-1)).reshape(N, 6)
    residual = _residual(op, values, U0)
    _LOGGER.info("direct solve: N=%d, cond=%.3e, residual=%.3e", N, condition, residual)
    return LocalFields(values=values, iterations=0, residual=residual, route='direct',
                       condition=condition)


def solve_fixed_point(particles: Sequence[ParticleInstance], incident: IncidentField,
                      ctx: WaveContext, tol: float = 1e-10, max_iter: int = 200,
                      strict: bool = False, reroute: bool = True,
                      dense_cap: int = DEFAULT_DENSE_CAP) -> LocalFields:
    """
    Iterate V <- U0 + T V from V = U0 until the max-norm update drops below tol.

    When the system is not diagonally dominant, strict mode raises; otherwise
    the solve is rerouted to the direct solver (or, with reroute off, the
    iteration proceeds with a warning).
    """
    N = len(particles)
    op = InteractionOperator(particles, ctx, dense_cap)
    U0 = incident.at(op.centers, ctx) if N else np.zeros((0, 6), dtype=complex)
    dominance = dominance_bound(particles, ctx, operator=op)
    if not dominance['dominant']:
        message = f"system is not diagonally dominant (bound {dominance['bound']:.3e} >= 1)"
        if strict:
            raise RegimeViolationError(message)
        if reroute:
            _LOGGER.warning("%s; rerouting to the direct solver", message)
            return solve_direct(particles, incident, ctx, dense_cap)
        _LOGGER.warning("%s; iterating anyway", message)

    values = U0.copy()
    history: List[float] = []
    for iteration in range(1, max_iter + 1):
        updated = U0 + op.apply(values) if N else U0
        change = max_norm(updated - values)
        history.append(change)
        values = updated
        _LOGGER.debug("sweep %d: update %.3e", iteration, change)
        if change < tol:
            break
    else:
        raise NonConvergenceError(
            f"fixed-point iteration did not converge in {max_iter} sweeps "
            f"(last update {history[-1]:.3e})", history=history)

    ratios = [b / a for a, b in zip(history[:-1], history[1:]) if a > 0 and b > 0]
    rate = max(ratios) if ratios else None
    residual = _residual(op, values, U0)
    _LOGGER.info("fixed point: %d sweeps, residual %.3e", iteration, residual)
    return LocalFields(values=values, iterations=iteration, residual=residual,
                       route='fixed-point', history=history, rate=rate)


def scattered_at(points: np.ndarray, fields: LocalFields, particles: Sequence[ParticleInstance],
                 ctx: WaveContext) -> np.ndarray:
    """sum_i g(x, x_i) S_i(n) V_i at each point, shape (m, 6)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    total = np.zeros((len(points), 6), dtype=complex)
    for i, p in enumerate(particles):
        diff = points - p.center[None, :]
        dist = np.linalg.norm(diff, axis=1)
        if np.any(dist == 0.0):
            raise OutOfRegionError(f"field point coincides with particle {i}", particle=i)
        blocks = s_operator_batch(p.alpha, p.beta, diff / dist[:, None], ctx, p.volume)
        total += green_r(dist, ctx.k)[:, None] * (blocks @ fields.values[i])
    return total


def evaluate_field(x: Sequence[float], fields: LocalFields, particles: Sequence[ParticleInstance],
                   incident: IncidentField, ctx: WaveContext, margin: float = 1.0) -> np.ndarray:
    """Total field U0(x) + sum_i g(x, x_i) S_i V_i at a point outside every guard ball."""
    x = as_vector(x, name='x')
    radius = margin * guard_radius(particles)
    for i, p in enumerate(particles):
        if np.linalg.norm(x - p.center) < radius:
            raise OutOfRegionError(
                f"point {x.tolist()} lies within {radius:.4g} of particle {i}; "
                "use the near-field solver there", particle=i)
    return incident.at(x[None], ctx)[0] + scattered_at(x[None], fields, particles, ctx)[0]


@dataclass
class FieldGrid:
    points: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    shape: Tuple[int, int, int]


def grid_points(region: Sequence[Sequence[float]], resolution: Sequence[int]) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Nodes of a regular grid with `resolution` cells per axis (x fastest varying last)."""
    lo = as_vector(region[0], name='region lower corner')
    hi = as_vector(region[1], name='region upper corner')
    res = [int(r) for r in resolution]
    if len(res) != 3 or min(res) < 0:
        raise InvalidArgumentError(f"resolution must be three non-negative integers, got {resolution}")
    axes = [np.linspace(lo[d], hi[d], res[d] + 1) if res[d] > 0 else np.array([lo[d]])
            for d in range(3)]
    mesh = np.meshgrid(*axes, indexing='ij')
    shape = tuple(len(a) for a in axes)
    return np.stack([m.ravel() for m in mesh], axis=1), shape


def field_grid(region: Sequence[Sequence[float]], resolution: Sequence[int], fields: LocalFields,
               particles: Sequence[ParticleInstance], incident: IncidentField, ctx: WaveContext,
               margin: float = 1.0) -> FieldGrid:
    """Sample the total field on a grid; points inside guard balls are masked with zero values."""
    points, shape = grid_points(region, resolution)
    mask = np.zeros(len(points), dtype=bool)
    if particles:
        radius = margin * guard_radius(particles)
        tree = cKDTree(centers_of(particles))
        dist, _ = tree.query(points)
        mask = dist < radius
    values = np.zeros((len(points), 6), dtype=complex)
    keep = ~mask
    if keep.any():
        values[keep] = incident.at(points[keep], ctx) + scattered_at(points[keep], fields, particles, ctx)
    _LOGGER.info("field grid: %d points, %d masked", len(points), int(mask.sum()))
    return FieldGrid(points=points, values=values, mask=mask, shape=shape)


def lattice_positions(shape: Sequence[int], spacing: float,
                      origin: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Simple cubic lattice of nx * ny * nz points starting at origin."""
    counts = [int(s) for s in shape]
    if len(counts) != 3 or min(counts) < 1:
        raise InvalidArgumentError(f"lattice shape must be three positive integers, got {shape}")
    if not spacing > 0:
        raise InvalidArgumentError(f"lattice spacing must be positive, got {spacing}")
    idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing='ij'), axis=-1).reshape(-1, 3)
    return as_vector(origin, name='origin')[None, :] + spacing * idx


def random_positions(count: int, box: Sequence[Sequence[float]], min_distance: float = 0.0,
                     seed: int = 0, max_tries: int = 1000) -> np.ndarray:
    """Uniform points in a box with a minimum separation, by seeded rejection sampling."""
    lo = as_vector(box[0], name='box lower corner')
    hi = as_vector(box[1], name='box upper corner')
    if np.any(hi <= lo):
        raise InvalidArgumentError("box upper corner must exceed the lower corner")
    rng = np.random.default_rng(seed)
    points: List[np.ndarray] = []
    tries = 0
    while len(points) < count:
        candidate = lo + (hi - lo) * rng.random(3)
        if not points or np.min(np.linalg.norm(np.array(points) - candidate, axis=1)) >= min_distance:
            points.append(candidate)
            tries = 0
            continue
        tries += 1
        if tries > max_tries:
            raise ConfigurationError(
                f"could not place {count} particles with separation {min_distance} "
                f"(placed {len(points)})")
    return np.array(points).reshape(-1, 3)


def stratified_positions(cells: Sequence[int], box: Sequence[Sequence[float]], seed: int = 0,
                         jitter: float = 0.5) -> np.ndarray:
    """One point per cell of a regular partition of the box, jittered about the cell center."""
    lo = as_vector(box[0], name='box lower corner')
    hi = as_vector(box[1], name='box upper corner')
    counts = np.array([int(c) for c in cells])
    if len(counts) != 3 or counts.min() < 1:
        raise InvalidArgumentError(f"cells must be three positive integers, got {cells}")
    if not 0 <= jitter < 1:
        raise InvalidArgumentError(f"jitter must lie in [0, 1), got {jitter}")
    step = (hi - lo) / counts
    idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing='ij'), axis=-1).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    offsets = jitter * (rng.random(idx.shape) - 0.5)
    return lo + (idx + 0.5 + offsets) * step
