"""
Electric and magnetic polarizability tensors of small homogeneous bodies

The electric tensor is the truncated series

    alpha^(n)(gamma) = (2/V) sum_{m=0..n} (-1)^m / (2 pi)^m
                       * (gamma^{n+2} - gamma^{m+1}) / (gamma - 1) * b^(m)

over the chained boundary tensors b^(m). With b^(0) = integral of t_i N_j,
b^(1) the 1/r-weighted normal-pair integral and every further order adding
one normal-derivative factor, the series reproduces the ball value
3 (eps - 1) / (eps + 2) exactly in the limit.

On a panel mesh b^(0) enters the series in its balanced form (see
BChain.balanced_zero), so the corrections shrink at the rate set by the
geometry rather than by gamma alone.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from ..utils.errors import (
    InvalidArgumentError, NonConvergenceError, SingularEvaluationError,
)
from ..utils.helpers import as_complex, as_vector
from .geometry import (
    QuadratureSpec, SurfaceMesh, mesh_measures, normal_derivative_matrix, single_layer_matrix,
)

_LOGGER = logging.getLogger(__name__)

DEFAULT_PANEL_BUDGET = 20000
DEFAULT_SKIN_RATIO = 0.1


@dataclass(frozen=True)
class MaterialContrast:
    """
    Particle material relative to the background.

    `sigma` is measured in units of omega * eps0, so eps' = eps + i sigma / omega.
    `skin` forces the skin-regime flag; otherwise it is derived from the skin
    depth relative to the particle size.
    """

    eps: complex
    mu: complex = 1.0
    sigma: float = 0.0
    omega: Optional[float] = None
    eps0: float = 1.0
    mu0: float = 1.0
    skin: Optional[bool] = None

    def __post_init__(self):
        if self.eps0 <= 0 or self.mu0 <= 0:
            raise InvalidArgumentError("background eps0 and mu0 must be positive")
        if self.sigma < 0:
            raise InvalidArgumentError(f"conductivity must be >= 0, got {self.sigma}")
        if self.sigma > 0 and not (self.omega and self.omega > 0):
            raise InvalidArgumentError("a conducting particle needs a positive angular frequency")
        eps_prime = self.eps_prime
        if eps_prime.real >= 0 and eps_prime.imag >= 0:
            if abs(self.gamma_eps) > 1 + 1e-12:
                raise InvalidArgumentError(
                    f"passive material gives |gamma_eps| = {abs(self.gamma_eps):.6g} > 1")

    @classmethod
    def from_values(cls, eps: Any, mu: Any = 1.0, sigma: float = 0.0,
                    omega: Optional[float] = None, eps0: float = 1.0, mu0: float = 1.0,
                    skin: Optional[bool] = None) -> 'MaterialContrast':
        return cls(eps=as_complex(eps, 'eps'), mu=as_complex(mu, 'mu'), sigma=float(sigma),
                   omega=None if omega is None else float(omega),
                   eps0=float(eps0), mu0=float(mu0), skin=skin)

    @property
    def eps_prime(self) -> complex:
        if self.sigma == 0:
            return complex(self.eps)
        return complex(self.eps) + 1j * self.sigma / self.omega

    @property
    def gamma_eps(self) -> complex:
        ep = self.eps_prime
        if ep == -self.eps0:
            raise InvalidArgumentError("eps' = -eps0: contrast factor is singular")
        return (ep - self.eps0) / (ep + self.eps0)

    @property
    def gamma_mu(self) -> complex:
        if self.mu == self.mu0:
            return 0j
        if self.mu == -self.mu0:
            raise InvalidArgumentError("mu = -mu0: contrast factor is singular")
        return (self.mu - self.mu0) / (self.mu + self.mu0)

    @property
    def skin_depth(self) -> float:
        """delta = sqrt(2 / (omega sigma mu)); infinite for an insulator."""
        if self.sigma == 0:
            return float('inf')
        return float(np.sqrt(2.0 / (self.omega * self.sigma * abs(self.mu * self.mu0))))

    def skin_regime(self, size: float, ratio: float = DEFAULT_SKIN_RATIO) -> bool:
        """True when delta << a, i.e. delta / a <= ratio."""
        if self.skin is not None:
            return bool(self.skin)
        return self.skin_depth / size <= ratio


@dataclass(frozen=True)
class BChainTensor:
    order: int
    tensor: np.ndarray
    spec: QuadratureSpec


@dataclass(frozen=True)
class PolarizabilityTensor:
    """3x3 complex tensor with the series metadata it was computed with."""

    tensor: np.ndarray
    order: int = 0
    ratio: Optional[float] = None
    error_estimate: float = 0.0
    corrections: List[float] = field(default_factory=list)

    def __array__(self, dtype=None):
        return self.tensor if dtype is None else self.tensor.astype(dtype)

    def __add__(self, other: 'PolarizabilityTensor') -> 'PolarizabilityTensor':
        ratios = [r for r in (self.ratio, other.ratio) if r is not None]
        return PolarizabilityTensor(
            tensor=self.tensor + other.tensor,
            order=max(self.order, other.order),
            ratio=max(ratios) if ratios else None,
            error_estimate=self.error_estimate + other.error_estimate,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'order': self.order,
            'ratio': self.ratio,
            'error_estimate': self.error_estimate,
            'diagonal': [complex(v) for v in np.diag(self.tensor)],
        }


def zero_tensor() -> PolarizabilityTensor:
    return PolarizabilityTensor(np.zeros((3, 3), dtype=complex))


def psi_kernel(t: Sequence[float], s: Sequence[float], normal_t: Sequence[float]) -> float:
    """psi(t, s) = d/dN_t (1/|s - t|) = -((t - s) . N_t) / |s - t|**3."""
    t = as_vector(t, name='t')
    s = as_vector(s, name='s')
    d = t - s
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise SingularEvaluationError("psi(t, s) evaluated at t == s; use singular quadrature")
    return float(-np.dot(d, as_vector(normal_t, name='normal_t')) / r ** 3)


class BChain:
    """
    Lazily extended sequence of boundary tensors b^(m) for one mesh.

    Each extra order costs one dense panel matrix-vector product with the
    normal-derivative operator, so b^(0..m) is O(m P^2) after assembly.
    The constant density is an eigenvector of that operator with
    eigenvalue -2 pi and is projected out of every chain iterate.
    """

    def __init__(self, mesh: SurfaceMesh, spec: Optional[QuadratureSpec] = None,
                 panel_budget: int = DEFAULT_PANEL_BUDGET):
        if mesh.n_panels > panel_budget:
            raise InvalidArgumentError(
                f"mesh has {mesh.n_panels} panels, above the dense-operator budget of {panel_budget}")
        self.mesh = mesh
        self.spec = spec or QuadratureSpec()
        self.volume = mesh_measures(mesh)['volume']
        self._S: Optional[np.ndarray] = None
        self._K: Optional[np.ndarray] = None
        self._chain: Optional[np.ndarray] = None  # K^{m-1} N for the last m computed
        self._tensors: List[np.ndarray] = []
        self._balanced: Optional[np.ndarray] = None

    def _operators(self) -> None:
        if self._S is None:
            _LOGGER.info("assembling panel operators for %d panels", self.mesh.n_panels)
            self._S = single_layer_matrix(self.mesh, self.spec)
            self._K = normal_derivative_matrix(self.mesh, self.spec)

    def _deflate(self, density: np.ndarray) -> np.ndarray:
        """Remove the area-weighted mean of each density column."""
        areas = self.mesh.areas
        return density - (areas @ density / areas.sum())[None, :]

    def tensor(self, m: int) -> np.ndarray:
        if m < 0:
            raise InvalidArgumentError(f"chain order must be >= 0, got {m}")
        mesh = self.mesh
        weighted = mesh.areas[:, None] * mesh.normals
        if not self._tensors:
            self._tensors.append(mesh.centroids.T @ weighted)  # b0[i, j] = sum A t_i N_j
        while len(self._tensors) <= m:
            self._operators()
            if self._chain is None:
                self._chain = self._deflate(np.array(mesh.normals))
            else:
                self._chain = self._deflate(self._K @ self._chain)
            self._tensors.append(weighted.T @ (self._S @ self._chain))
        return self._tensors[m]

    def tensors(self, n: int) -> List[np.ndarray]:
        self.tensor(n)
        return self._tensors[:n + 1]

    def balanced_zero(self) -> np.ndarray:
        """
        b^(0) balanced against the discrete chain.

        For the exact operators sum_m (-1/2pi)^m b^(m) = 0, which keeps alpha
        finite at gamma = 1. The panel operators leave a residue of the order
        of the quadrature error that the series would otherwise carry as a
        term decaying only like gamma^n. This returns
        -sum_{m>=1} (-1/2pi)^m b^(m), summed in closed form by one deflated
        solve (I + K/2pi + 1 A^T / |A|) x = N, and equals V I up to that
        quadrature error.
        """
        if self._balanced is None:
            self._operators()
            mesh = self.mesh
            areas = mesh.areas
            weighted = areas[:, None] * mesh.normals
            system = np.eye(mesh.n_panels) + self._K / (2.0 * np.pi)
            system += np.outer(np.ones(mesh.n_panels), areas) / areas.sum()
            density = scipy.linalg.solve(system, self._deflate(np.array(mesh.normals)))
            self._balanced = weighted.T @ (self._S @ density) / (2.0 * np.pi)
            _LOGGER.debug("balanced b^(0) deviates from V I by %.3e",
                          float(np.max(np.abs(self._balanced - self.tensor(0)))) / self.volume)
        return self._balanced

    def series_tensors(self, n: int) -> List[np.ndarray]:
        """b^(0..n) with b^(0) replaced by its balanced value."""
        return [self.balanced_zero()] + self.tensors(n)[1:]


def compute_b_tensor(mesh: SurfaceMesh, m: int, spec: Optional[QuadratureSpec] = None,
                     chain: Optional[BChain] = None) -> BChainTensor:
    chain = chain or BChain(mesh, spec)
    return BChainTensor(order=m, tensor=chain.tensor(m), spec=chain.spec)


def _geometric(gamma: complex, m: int, n: int) -> complex:
    """sum_{p=m+1..n+1} gamma^p, by the closed quotient away from gamma = 1."""
    if abs(gamma - 1.0) < 1e-8:
        return complex(sum(gamma ** p for p in range(m + 1, n + 2)))
    return (gamma ** (n + 2) - gamma ** (m + 1)) / (gamma - 1.0)


def _partial_sum(b: List[np.ndarray], volume: float, gamma: complex, n: int) -> np.ndarray:
    total = np.zeros((3, 3), dtype=complex)
    for m in range(n + 1):
        total += ((-1) ** m / (2 * np.pi) ** m) * _geometric(gamma, m, n) * b[m]
    return 2.0 / volume * total


def _series(chain: BChain, gamma: complex, n_max: int, tol: Optional[float]) -> PolarizabilityTensor:
    gamma = complex(gamma)
    if abs(gamma) > 1 + 1e-12:
        raise InvalidArgumentError(
            f"|gamma| = {abs(gamma):.6g} > 1: the boundary series does not apply")
    if n_max < 1:
        raise InvalidArgumentError(f"series order must be >= 1, got {n_max}")
    b = chain.series_tensors(n_max)
    previous = _partial_sum(b, chain.volume, gamma, 0)
    corrections: List[float] = []
    growth = 0
    current = previous
    order = n_max
    for n in range(1, n_max + 1):
        current = _partial_sum(b, chain.volume, gamma, n)
        corrections.append(float(np.max(np.abs(current - previous))))
        previous = current
        if len(corrections) > 1 and corrections[-1] > corrections[-2] > 0:
            growth += 1
            if growth >= 3:
                raise NonConvergenceError(
                    f"polarizability series diverges (gamma={gamma:.4g})",
                    history=corrections, ratio=corrections[-1] / corrections[-2])
        else:
            growth = 0
        _LOGGER.debug("alpha^(%d): correction %.3e", n, corrections[-1])
        if tol is not None and corrections[-1] <= tol * max(1.0, float(np.max(np.abs(current)))):
            order = n
            break

    ratio = None
    if len(corrections) >= 2 and corrections[-2] > 0:
        ratio = corrections[-1] / corrections[-2]
    error = 0.0
    if ratio is not None and ratio < 1:
        error = corrections[-1] * ratio / (1 - ratio)
    return PolarizabilityTensor(tensor=current, order=order, ratio=ratio,
                                error_estimate=error, corrections=corrections)


def alpha_approx(mesh: SurfaceMesh, gamma: complex, n: int, spec: Optional[QuadratureSpec] = None,
                 chain: Optional[BChain] = None) -> PolarizabilityTensor:
    """The n-th series approximation alpha^(n)(gamma)."""
    chain = chain or BChain(mesh, spec)
    return _series(chain, gamma, n, tol=None)


def polarizability(mesh: SurfaceMesh, gamma: complex, spec: Optional[QuadratureSpec] = None,
                   tol: float = 1e-8, max_order: int = 30,
                   chain: Optional[BChain] = None) -> PolarizabilityTensor:
    """Raise the series order until successive corrections fall below tol."""
    chain = chain or BChain(mesh, spec)
    result = _series(chain, gamma, max_order, tol=tol)
    if result.corrections and result.corrections[-1] > tol * max(1.0, float(np.max(np.abs(result.tensor)))):
        _LOGGER.warning("polarizability series stopped at order %d with correction %.3e",
                        result.order, result.corrections[-1])
    return result


def ball_polarizability(gamma: complex) -> PolarizabilityTensor:
    """Closed form for a ball: 6 gamma / (3 - gamma) I = 3 (eps - 1)/(eps + 2) I."""
    gamma = complex(gamma)
    return PolarizabilityTensor(tensor=6.0 * gamma / (3.0 - gamma) * np.eye(3, dtype=complex))


def beta_tensor(mesh: Optional[SurfaceMesh], contrast: MaterialContrast,
                spec: Optional[QuadratureSpec] = None, n: Optional[int] = None,
                chain: Optional[BChain] = None, size: Optional[float] = None,
                tol: float = 1e-8, max_order: int = 30) -> PolarizabilityTensor:
    """
    beta = alpha(-1) [skin regime only] + alpha(gamma_mu) [mu != mu0 only].

    With mesh None the particle is treated as a ball of radius `size`.
    """
    if mesh is None and size is None:
        raise InvalidArgumentError("a ball particle needs its radius to decide the skin regime")
    a = size if size is not None else mesh.characteristic_size
    terms = []
    if contrast.skin_regime(a):
        terms.append(-1.0 + 0j)
    gamma_mu = contrast.gamma_mu
    if gamma_mu != 0:
        terms.append(gamma_mu)
    if not terms:
        return zero_tensor()

    result = zero_tensor()
    for gamma in terms:
        if mesh is None:
            part = ball_polarizability(gamma)
        else:
            chain = chain or BChain(mesh, spec)
            if n is None:
                part = polarizability(mesh, gamma, tol=tol, max_order=max_order, chain=chain)
            else:
                part = alpha_approx(mesh, gamma, n, chain=chain)
        result = result + part
    return result


def electric_tensor(mesh: Optional[SurfaceMesh], contrast: MaterialContrast,
                    spec: Optional[QuadratureSpec] = None, chain: Optional[BChain] = None,
                    tol: float = 1e-8, max_order: int = 30) -> PolarizabilityTensor:
    """alpha(gamma_eps): closed form for balls (mesh None), series otherwise."""
    gamma = contrast.gamma_eps
    if mesh is None:
        return ball_polarizability(gamma)
    if gamma == 0:
        return zero_tensor()
    return polarizability(mesh, gamma, spec=spec, tol=tol, max_order=max_order, chain=chain)


def induced_moments(alpha: Union[PolarizabilityTensor, np.ndarray],
                    beta: Union[PolarizabilityTensor, np.ndarray],
                    volume: float, E: Sequence[complex], H: Sequence[complex],
                    eps0: float = 1.0, mu0: float = 1.0) -> Dict[str, np.ndarray]:
    """P = alpha V eps0 E and M = beta V mu0 H."""
    a = np.asarray(alpha, dtype=complex)
    b = np.asarray(beta, dtype=complex)
    if a.shape != (3, 3) or b.shape != (3, 3):
        raise InvalidArgumentError("polarizability tensors must be 3x3")
    E = as_vector(E, name='E', dtype=complex)
    H = as_vector(H, name='H', dtype=complex)
    return {
        'P': a @ E * volume * eps0,
        'M': b @ H * volume * mu0,
    }
