"""
Effective medium of many small particles

A cloud of particles with number density N(y) is replaced by the potential
q(y, beta) = N(y) S(beta) and the self-consistent field solves

    U(x) = U0(x) + integral_D e^{ik|x-y|} / (k|x-y|) q(y, x) U(y) dy

collocated at voxel centers with the midpoint rule.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from ..utils.errors import (
    ConfigurationError, InvalidArgumentError, NonConvergenceError, OutOfRegionError,
    SingularSystemError,
)
from ..utils.helpers import as_complex, as_vector, lu_with_condition, max_norm, parallel_map
from .geometry import icosahedral_directions
from .multiparticle import IncidentField, ParticleInstance
from .scattering import WaveContext, green_r, s_operator_batch

_LOGGER = logging.getLogger(__name__)

DEFAULT_DIRECTIONS = 42
DEFAULT_DIRECT_CAP = 400
ISOTROPY_TOL = 1e-6
LOOKUPS = ('nearest', 'exact')


@dataclass(frozen=True)
class LimitDiagnostics:
    """w is the limit of (a/d)^3 (eps' - eps0)/(eps' + 2 eps0) as a/d -> 0."""

    w: complex
    kappa: Optional[complex]
    regime: str
    value: complex

    def to_dict(self) -> Dict[str, Any]:
        return {'w': self.w, 'kappa': self.kappa, 'regime': self.regime, 'value': self.value}


def limit_diagnostics(eps: Any, eps0: float = 1.0, sigma: float = 0.0,
                      omega: Optional[float] = None, a_over_d: float = 0.1,
                      kappa: Optional[Any] = None) -> LimitDiagnostics:
    """
    Classify the small-particle limit of the per-volume scattering strength.

    static-eps  eps = -2 eps0 + kappa (a/d)^3 with kappa != 0: w = (eps - eps0)/kappa
    dispersive  eps -> -2 eps0 with i sigma/omega = kappa1 (a/d)^3: w = (eps' - eps0)/kappa1
    resonant    |eps' + 2 eps0| below (a/d)^3 without a tuning law: the ratio blows up
    vanishing   every other material: w = 0
    """
    if not 0 < a_over_d < 1:
        raise InvalidArgumentError(f"a/d must lie in (0, 1), got {a_over_d}")
    eps = as_complex(eps, 'eps')
    if sigma < 0:
        raise InvalidArgumentError(f"conductivity must be >= 0, got {sigma}")
    if sigma > 0 and not (omega and omega > 0):
        raise InvalidArgumentError("a conducting material needs a positive angular frequency")
    eps_prime = eps + (1j * sigma / omega if sigma > 0 else 0.0)
    kappa = None if kappa is None else as_complex(kappa, 'kappa')
    cube = a_over_d ** 3
    denominator = eps_prime + 2.0 * eps0

    if denominator == 0 and not kappa:
        raise ConfigurationError("eps' = -2 eps0 with kappa = 0: the limit is singular")
    value = cube * (eps_prime - eps0) / denominator if denominator != 0 else complex('inf')

    if eps_prime == eps0:
        return LimitDiagnostics(w=0j, kappa=kappa, regime='vanishing', value=0j)
    if kappa:
        return LimitDiagnostics(w=(eps - eps0) / kappa, kappa=kappa, regime='static-eps', value=value)
    if sigma > 0 and abs(eps + 2.0 * eps0) <= 1e-9 * max(1.0, eps0):
        kappa1 = (1j * sigma / omega) / cube
        return LimitDiagnostics(w=(eps_prime - eps0) / kappa1, kappa=kappa1,
                                regime='dispersive', value=value)
    if abs(denominator) < cube:
        _LOGGER.warning("eps' is within (a/d)^3 of -2 eps0 without a tuning law: resonant")
        return LimitDiagnostics(w=value, kappa=None, regime='resonant', value=value)
    return LimitDiagnostics(w=0j, kappa=None, regime='vanishing', value=value)


@dataclass
class DensityField:
    """
    Particle number density on a cell-centered voxel grid over `box`.

    template_ids selects, per voxel, a template particle from `templates`
    (-1 for none); a single template covers every voxel by default.
    """

    box: np.ndarray
    density: np.ndarray
    templates: List[ParticleInstance] = field(default_factory=list)
    template_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float)
        self.density = np.asarray(self.density, dtype=float)
        if self.box.shape != (2, 3) or np.any(self.box[1] <= self.box[0]):
            raise InvalidArgumentError("box must be [[x0, y0, z0], [x1, y1, z1]] with x1 > x0")
        if self.density.ndim != 3:
            raise InvalidArgumentError(f"density must be a 3-d voxel array, got {self.density.shape}")
        if np.any(self.density < 0) or not np.all(np.isfinite(self.density)):
            raise InvalidArgumentError("densities must be finite and non-negative")
        if self.template_ids is None:
            self.template_ids = np.zeros(self.density.shape, dtype=np.int64)
        self.template_ids = np.asarray(self.template_ids, dtype=np.int64)
        if self.template_ids.shape != self.density.shape:
            raise InvalidArgumentError("template_ids must match the density grid")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.density.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.box[1] - self.box[0]) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def centers(self) -> np.ndarray:
        """Voxel centers in C order (z fastest)."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.shape], indexing='ij'),
                       axis=-1).reshape(-1, 3)
        return self.box[0] + (idx + 0.5) * self.spacing

    @property
    def indices(self) -> np.ndarray:
        return np.stack(np.meshgrid(*[np.arange(n) for n in self.shape], indexing='ij'),
                        axis=-1).reshape(-1, 3)

    def scaled(self, factor: float) -> 'DensityField':
        return DensityField(self.box, self.density * factor, self.templates, self.template_ids)


def uniform_density(box: Sequence[Sequence[float]], shape: Sequence[int], count: float,
                    template: ParticleInstance) -> DensityField:
    """`count` particles spread uniformly over the box."""
    box = np.asarray(box, dtype=float)
    volume = float(np.prod(box[1] - box[0]))
    cells = tuple(int(s) for s in shape)
    if len(cells) != 3 or min(cells) < 1:
        raise InvalidArgumentError(f"grid shape must be three positive integers, got {shape}")
    return DensityField(box=box, density=np.full(cells, count / volume), templates=[template])


@dataclass
class PotentialQ:
    """
    q(y, beta) = N(y) S_t(y)(beta), stored as the density plus one icosahedral
    direction table of S per template.
    """

    density: DensityField
    directions: np.ndarray
    table: np.ndarray
    isotropic: bool
    ctx: WaveContext

    def __post_init__(self):
        self._tree = cKDTree(self.directions)

    @property
    def flat_density(self) -> np.ndarray:
        return self.density.density.reshape(-1)

    @property
    def flat_templates(self) -> np.ndarray:
        return self.density.template_ids.reshape(-1)

    def nearest(self, directions: np.ndarray) -> np.ndarray:
        return self._tree.query(np.atleast_2d(directions))[1]

    def voxel_table(self, voxel: int) -> np.ndarray:
        """Materialized q(y_voxel, beta) over the direction nodes, (n_dirs, 6, 6)."""
        n = self.flat_density[voxel]
        if n == 0:
            return np.zeros(self.table.shape[1:], dtype=complex)
        return n * self.table[self.flat_templates[voxel]]

    def operators(self, voxels: np.ndarray, directions: np.ndarray,
                  lookup: str = 'nearest') -> np.ndarray:
        """q(y_v, n) for paired voxels and unit directions, shape (m, 6, 6)."""
        voxels = np.asarray(voxels)
        n = self.flat_density[voxels]
        tids = self.flat_templates[voxels]
        out = np.zeros((len(voxels), 6, 6), dtype=complex)
        if lookup == 'nearest':
            nodes = self.nearest(directions)
            live = n > 0
            out[live] = n[live, None, None] * self.table[tids[live], nodes[live]]
            return out
        if lookup != 'exact':
            raise InvalidArgumentError(f"unknown direction lookup '{lookup}', expected {LOOKUPS}")
        for t in np.unique(tids[n > 0]):
            sel = (tids == t) & (n > 0)
            p = self.density.templates[t]
            out[sel] = n[sel, None, None] * s_operator_batch(
                p.alpha, p.beta, directions[sel], self.ctx, p.volume)
        return out

    def averaged(self, voxels: np.ndarray) -> np.ndarray:
        """Direction average of q per voxel, (m, 6, 6)."""
        voxels = np.asarray(voxels)
        mean = self.table.mean(axis=1)
        n = self.flat_density[voxels]
        return n[:, None, None] * mean[self.flat_templates[voxels]]


def q_from_density(density: DensityField, ctx: WaveContext,
                   directions: int = DEFAULT_DIRECTIONS) -> PotentialQ:
    """Per-template direction tables of S; q is N(y) times the voxel's table."""
    active = density.density > 0
    used = np.unique(density.template_ids[active])
    if np.any(used < 0) or np.any(used >= len(density.templates)):
        bad = np.argwhere(active & ((density.template_ids < 0) |
                                    (density.template_ids >= len(density.templates))))
        raise ConfigurationError(
            f"voxel {bad[0].tolist()} has particles but no template")
    nodes = icosahedral_directions(directions)
    table = np.zeros((max(1, len(density.templates)), len(nodes), 6, 6), dtype=complex)
    for t, p in enumerate(density.templates):
        table[t] = s_operator_batch(p.alpha, p.beta, nodes, ctx, p.volume)
    spread = np.abs(table - table[:, :1]).max()
    scale = max(np.abs(table).max(), 1e-300)
    isotropic = bool(spread <= ISOTROPY_TOL * scale)
    return PotentialQ(density=density, directions=nodes, table=table, isotropic=isotropic, ctx=ctx)


def self_cell_integral(k: float, cell_volume: float) -> complex:
    """
    Integral of e^{ikr}/(kr) over the ball of the cell's volume, centered at
    the collocation point: (4 pi / k) [e^{ikR} (R/(ik) + 1/k^2) - 1/k^2].
    """
    R = (3.0 * cell_volume / (4.0 * np.pi)) ** (1.0 / 3.0)
    return complex(4.0 * np.pi / k * (np.exp(1j * k * R) * (R / (1j * k) + 1.0 / k ** 2) - 1.0 / k ** 2))


@dataclass
class EffectiveFieldSolution:
    """Effective field on every voxel center; `active` voxels carry particles."""

    points: np.ndarray
    values: np.ndarray
    active: np.ndarray
    route: str
    iterations: int = 0
    residual: float = 0.0
    kernel_norm: float = 0.0
    history: List[float] = field(default_factory=list)
    lookup: str = 'nearest'


def _source_terms(points: np.ndarray, sources: np.ndarray, source_values: np.ndarray,
                  q: PotentialQ, lookup: str, skip_self: bool = False) -> np.ndarray:
    """sum_b g(x, y_b) h^3 q(y_b, n) U_b for every point, shape (m, 6)."""
    centers = q.density.centers
    h3 = q.density.cell_volume
    out = np.zeros((len(points), 6), dtype=complex)
    for b, u in zip(sources, source_values):
        diff = points - centers[b][None, :]
        dist = np.linalg.norm(diff, axis=1)
        live = dist > 0 if skip_self else np.ones(len(points), dtype=bool)
        if not live.any():
            continue
        n = diff[live] / dist[live, None]
        ops = q.operators(np.full(int(live.sum()), b), n, lookup)
        out[live] += (green_r(dist[live], q.ctx.k) * h3)[:, None] * (ops @ u)
    return out


def kernel_blocks(q: PotentialQ, active: np.ndarray, lookup: str = 'nearest') -> np.ndarray:
    """Dense voxel kernel K[a, b] over the active voxels, (M, M, 6, 6), self-cell included."""
    centers = q.density.centers[active]
    M = len(active)
    h3 = q.density.cell_volume

    def column(b: int) -> np.ndarray:
        diff = centers - centers[b][None, :]
        dist = np.linalg.norm(diff, axis=1)
        dist[b] = 1.0
        n = diff / dist[:, None]
        n[b] = (0.0, 0.0, 1.0)
        blocks = q.operators(np.full(M, active[b]), n, lookup)
        blocks *= (green_r(dist, q.ctx.k) * h3)[:, None, None]
        blocks[b] = self_cell_integral(q.ctx.k, h3) * q.averaged(active[b:b + 1])[0]
        return blocks

    columns = parallel_map(column, range(M))
    return np.stack(columns, axis=1) if M else np.zeros((0, 0, 6, 6), dtype=complex)


def solve_effective_field(q: PotentialQ, incident: IncidentField, ctx: Optional[WaveContext] = None,
                          tol: float = 1e-10, max_iter: int = 500, method: str = 'auto',
                          direct_cap: int = DEFAULT_DIRECT_CAP,
                          lookup: str = 'nearest') -> EffectiveFieldSolution:
    """
    Collocate the effective-field equation on the voxel grid.

    Only voxels with particles carry unknowns; every other voxel value is the
    explicit quadrature of the solved field. method is 'neumann', 'direct' or
    'auto' (direct up to `direct_cap` active voxels).
    """
    ctx = ctx or q.ctx
    if method not in ('auto', 'neumann', 'direct'):
        raise InvalidArgumentError(f"unknown method '{method}'")
    if lookup not in LOOKUPS:
        raise InvalidArgumentError(f"unknown direction lookup '{lookup}', expected {LOOKUPS}")
    centers = q.density.centers
    U0 = incident.at(centers, ctx)
    active = np.flatnonzero(q.flat_density > 0)
    M = len(active)
    if M == 0:
        return EffectiveFieldSolution(points=centers, values=U0, active=active, route='empty',
                                      lookup=lookup)
    if method == 'auto':
        method = 'direct' if M <= direct_cap else 'neumann'
    if method == 'direct' and M > direct_cap:
        raise ConfigurationError(f"{M} active voxels exceed the direct cap of {direct_cap}")

    K = kernel_blocks(q, active, lookup)
    kernel_norm = float(np.abs(K).sum(axis=(1, 3)).max())
    _LOGGER.info("effective field: %d active voxels, kernel norm %.3e, %s solve",
                 M, kernel_norm, method)
    b = U0[active]
    history: List[float] = []
    iterations = 0
    if method == 'direct':
        A = np.eye(6 * M, dtype=complex) - K.transpose(0, 2, 1, 3).reshape(6 * M, 6 * M)
        lu_piv, condition = lu_with_condition(A)
        if not np.isfinite(condition) or condition > 1e12:
            raise SingularSystemError(
                f"effective-field system is ill-conditioned (cond ~ {condition:.3e})",
                condition=condition)
        U = scipy.linalg.lu_solve(lu_piv, b.reshape(-1)).reshape(M, 6)
    else:
        U = b.copy()
        threshold = tol * max(max_norm(b), 1e-300)
        growth = 0
        for iterations in range(1, max_iter + 1):
            updated = b + np.einsum('abij,bj->ai', K, U)
            change = max_norm(updated - U)
            if history and change > history[-1]:
                growth += 1
            else:
                growth = 0
            history.append(change)
            U = updated
            if growth >= 3 or not np.isfinite(change):
                raise NonConvergenceError(
                    f"Neumann iteration diverges (kernel norm estimate {kernel_norm:.3e}); "
                    "use the direct solver", history=history, ratio=kernel_norm)
            if change <= threshold:
                break
        else:
            raise NonConvergenceError(
                f"Neumann iteration did not converge in {max_iter} sweeps", history=history,
                ratio=kernel_norm)

    residual = max_norm(U - b - np.einsum('abij,bj->ai', K, U))
    values = U0.copy()
    values[active] = U
    passive = np.setdiff1d(np.arange(len(centers)), active)
    if len(passive):
        values[passive] += _source_terms(centers[passive], active, U, q, lookup)
    return EffectiveFieldSolution(points=centers, values=values, active=active, route=method,
                                  iterations=iterations, residual=residual,
                                  kernel_norm=kernel_norm, history=history, lookup=lookup)


def evaluate_effective_field(x: Any, solution: EffectiveFieldSolution, q: PotentialQ,
                             incident: IncidentField, ctx: Optional[WaveContext] = None) -> np.ndarray:
    """U0(x) plus the voxel quadrature of the solved field, at points outside every active cell."""
    ctx = ctx or q.ctx
    points = np.atleast_2d(np.asarray(x, dtype=float))
    if points.shape[1] != 3:
        raise InvalidArgumentError("evaluation points must be 3-vectors")
    if len(solution.active):
        half = q.density.spacing / 2.0
        centers = q.density.centers[solution.active]
        for p in points:
            inside = np.all(np.abs(centers - p[None, :]) < half[None, :], axis=1)
            if inside.any():
                raise OutOfRegionError(
                    f"point {p.tolist()} lies inside an occupied voxel; read the solution there")
    values = incident.at(points, ctx)
    if len(solution.active):
        values = values + _source_terms(points, solution.active, solution.values[solution.active],
                                        q, solution.lookup)
    return values[0] if np.ndim(x) == 1 else values
