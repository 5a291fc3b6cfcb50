"""
Free-space Green's function and single-particle scattering operators

Time dependence e^{-i omega t} throughout. Scattered amplitudes are the
coefficients of g = e^{ikr}/(kr), so a particle with tensors alpha, beta and
volume V radiates, in direction n,

    E' = (k^3 V / 4 pi) [ (I - n n^T) alpha E - sqrt(mu0/eps0) n x (beta H) ]
    H' = sqrt(eps0/mu0) n x E'

which is the point-dipole field of P = alpha V eps0 E and M = beta V mu0 H.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import InvalidArgumentError, SingularEvaluationError
from ..utils.helpers import as_vector, cross_matrix, unit

_LOGGER = logging.getLogger(__name__)

DEFAULT_KA_MAX = 0.2
DEFAULT_KD_MIN = 10.0


@dataclass(frozen=True)
class WaveContext:
    """Background wave: wavenumber k and background constants eps0, mu0."""

    k: float
    eps0: float = 1.0
    mu0: float = 1.0
    omega: Optional[float] = None

    def __post_init__(self):
        if not (self.k > 0 and np.isfinite(self.k)):
            raise InvalidArgumentError(f"wavenumber k must be positive, got {self.k}")
        if self.eps0 <= 0 or self.mu0 <= 0:
            raise InvalidArgumentError("eps0 and mu0 must be positive")
        if self.omega is not None:
            expected = self.omega * np.sqrt(self.eps0 * self.mu0)
            if abs(expected - self.k) > 1e-9 * self.k:
                raise InvalidArgumentError(
                    f"k = {self.k} is inconsistent with omega sqrt(eps0 mu0) = {expected}")

    @property
    def wavelength(self) -> float:
        return 2.0 * np.pi / self.k

    @property
    def admittance(self) -> float:
        """sqrt(eps0 / mu0), the H/E ratio of a plane wave."""
        return float(np.sqrt(self.eps0 / self.mu0))

    @property
    def angular_frequency(self) -> float:
        if self.omega is not None:
            return self.omega
        return self.k / np.sqrt(self.eps0 * self.mu0)


def green(x: Sequence[float], y: Sequence[float], k: float) -> complex:
    """g(x, y) = e^{ik|x-y|} / (k|x-y|)."""
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)))
    if r == 0.0:
        raise SingularEvaluationError("g(x, y) evaluated at x == y")
    return complex(np.exp(1j * k * r) / (k * r))


def green_r(r: np.ndarray, k: float) -> np.ndarray:
    """Vectorized g as a function of distance; r must be positive."""
    r = np.asarray(r, dtype=float)
    return np.exp(1j * k * r) / (k * r)


def farzone_error_report(a: float, d: float, k: float, ka_max: float = DEFAULT_KA_MAX,
                         kd_min: float = DEFAULT_KD_MIN) -> Dict[str, Any]:
    """
    Relative errors of the far-zone approximations for size a and spacing d.

    g_error ~ a/d + k a^2/d for freezing g over a particle, grad_error = 1/(kd)
    for dropping 1/r against ik in grad g.
    """
    if a <= 0 or d <= 0 or k <= 0:
        raise InvalidArgumentError("a, d and k must be positive")
    ka, kd = k * a, k * d
    violations = []
    if ka > ka_max:
        violations.append(f"ka = {ka:.4g} > {ka_max:g} (particle not small against the wavelength)")
    if kd < kd_min:
        violations.append(f"kd = {kd:.4g} < {kd_min:g} (particles not in each other's far zone)")
    return {
        'regime_ok': not violations,
        'g_error': a / d + k * a * a / d,
        'grad_error': 1.0 / kd,
        'ka': ka,
        'kd': kd,
        'a_over_d': a / d,
        'violations': violations,
    }


def rotate_tensor(tensor: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """R T R^T."""
    return rotation @ np.asarray(tensor) @ rotation.T


@dataclass(frozen=True)
class ScatterFrame:
    """
    Scattering-plane frame for an incident/scattered direction pair.

    z is the incident direction, x the normal of the scattering plane and
    y = z x x; the scattered direction is sin(theta) y + cos(theta) z and the
    primed frame is (x, cos(theta) y - sin(theta) z, scattered).
    """

    incident: np.ndarray
    scattered: np.ndarray
    theta: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @classmethod
    def from_directions(cls, incident: Sequence[float], scattered: Sequence[float]) -> 'ScatterFrame':
        z = unit(incident, 'incident direction')
        n = unit(scattered, 'scattering direction')
        normal = np.cross(n, z)
        if np.linalg.norm(normal) < 1e-12:
            # theta in {0, pi}: the plane through z and the global x (or y) axis
            axis = np.array([1.0, 0.0, 0.0])
            if abs(np.dot(axis, z)) > 1.0 - 1e-12:
                axis = np.array([0.0, 1.0, 0.0])
            y = axis - np.dot(axis, z) * z
            y = y / np.linalg.norm(y)
            x = np.cross(y, z)
            theta = 0.0 if np.dot(n, z) > 0 else float(np.pi)
        else:
            x = normal / np.linalg.norm(normal)
            y = np.cross(z, x)
            theta = float(np.arctan2(np.dot(n, y), np.dot(n, z)))
        return cls(incident=z, scattered=n, theta=theta, x=x, y=y, z=z)

    @property
    def rotation(self) -> np.ndarray:
        """Rows are the frame axes; maps global components to (x, y, z) components."""
        return np.stack([self.x, self.y, self.z])

    @property
    def y_prime(self) -> np.ndarray:
        return np.cos(self.theta) * self.y - np.sin(self.theta) * self.z

    @property
    def rotation_prime(self) -> np.ndarray:
        return np.stack([self.x, self.y_prime, self.scattered])

    def to_local(self, tensor: np.ndarray) -> np.ndarray:
        return rotate_tensor(tensor, self.rotation)


def _tensor(value: Any, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=complex)
    if arr.shape != (3, 3):
        raise InvalidArgumentError(f"{name} must be a 3x3 tensor, got shape {arr.shape}")
    return arr


def s_matrix_E(alpha: Any, beta: Any, frame: ScatterFrame, ctx: WaveContext,
               volume: float) -> np.ndarray:
    """
    2x2 matrix mapping (E2, E1) of the incident wave to (E2', E1').

    alpha and beta must be given in the frame's (x, y, z) axes. beta enters
    without the mu0 factor: with P = alpha V eps0 E and M = beta V mu0 H the
    background constants cancel for a plane wave.
    """
    a = _tensor(alpha, 'alpha')
    b = _tensor(beta, 'beta')
    c, s = np.cos(frame.theta), np.sin(frame.theta)
    pref = ctx.k ** 3 * volume / (4.0 * np.pi)
    return pref * np.array([
        [b[0, 0] + a[1, 1] * c - a[2, 1] * s, a[1, 0] * c - a[2, 0] * s - b[0, 1]],
        [a[0, 1] - b[1, 0] * c + b[2, 0] * s, a[0, 0] + b[1, 1] * c - b[2, 1] * s],
    ], dtype=complex)


def apply_s_matrix_E(S_E: np.ndarray, frame: ScatterFrame, E: Sequence[complex]) -> np.ndarray:
    """Scatter a transverse incident E (global components) to E' (global components)."""
    E = as_vector(E, name='E', dtype=complex)
    e1, e2 = np.dot(frame.x, E), np.dot(frame.y, E)
    out2, out1 = np.asarray(S_E) @ np.array([e2, e1])
    return out1 * frame.x + out2 * frame.y_prime


def h_from_e(E_prime: Sequence[complex], direction: Union[ScatterFrame, Sequence[float]],
             ctx: WaveContext, tol: float = 1e-8) -> np.ndarray:
    """Far-zone H' = sqrt(eps0/mu0) n x E' for a transverse amplitude E'."""
    n = direction.scattered if isinstance(direction, ScatterFrame) else unit(direction)
    E = as_vector(E_prime, name="E'", dtype=complex)
    radial = abs(np.dot(n, E))
    if radial > tol * max(float(np.linalg.norm(E)), 1e-300):
        raise InvalidArgumentError(
            f"far-field amplitude is not transverse (|n . E'| = {radial:.3e})")
    return ctx.admittance * np.cross(n, E)


def dipole_far_field(P: Sequence[complex], M: Sequence[complex], direction: Sequence[float],
                     ctx: WaveContext) -> Tuple[np.ndarray, np.ndarray]:
    """Far-zone amplitudes (coefficients of e^{ikr}/(kr)) of point dipoles P, M."""
    n = unit(direction)
    P = as_vector(P, name='P', dtype=complex)
    M = as_vector(M, name='M', dtype=complex)
    transverse = P - n * np.dot(n, P)
    E = ctx.k ** 3 / (4.0 * np.pi) * (
        transverse / ctx.eps0 - np.cross(n, M) / np.sqrt(ctx.eps0 * ctx.mu0))
    return E, ctx.admittance * np.cross(n, E)


@dataclass(frozen=True)
class SOperator6:
    """6x6 operator acting on stacked (E, H) for one scattering direction."""

    matrix: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    prefactor: float
    direction: np.ndarray

    def __matmul__(self, field: np.ndarray) -> np.ndarray:
        return self.matrix @ field

    def apply(self, field: Sequence[complex]) -> np.ndarray:
        return self.matrix @ as_vector(field, length=6, name='field', dtype=complex)


def s_operator_matrix(alpha: np.ndarray, beta: np.ndarray, n: np.ndarray, ctx: WaveContext,
                      volume: float) -> np.ndarray:
    """Raw 6x6 matrix for global-axis tensors and unit direction n."""
    pref = ctx.k ** 3 * volume / (4.0 * np.pi)
    projector = np.eye(3) - np.outer(n, n)
    nx = cross_matrix(n)
    E_block = pref * np.hstack([projector @ alpha,
                                -np.sqrt(ctx.mu0 / ctx.eps0) * nx @ beta])
    H_block = ctx.admittance * nx @ E_block
    return np.vstack([E_block, H_block])


def s_operator(alpha: Any, beta: Any, frame: Union[ScatterFrame, Sequence[float]],
               ctx: WaveContext, volume: float) -> SOperator6:
    """
    Direction-dependent scattering operator of one particle.

    Only the scattering direction matters: the operator radiates the dipoles
    induced by an arbitrary local 6-vector (E, H), which for a plane wave
    reproduces s_matrix_E.
    """
    a = _tensor(alpha, 'alpha')
    b = _tensor(beta, 'beta')
    n = frame.scattered if isinstance(frame, ScatterFrame) else unit(frame)
    return SOperator6(
        matrix=s_operator_matrix(a, b, n, ctx, volume),
        alpha=a, beta=b,
        prefactor=ctx.k ** 3 * volume / (4.0 * np.pi),
        direction=n,
    )


def s_operator_batch(alpha: np.ndarray, beta: np.ndarray, directions: np.ndarray,
                     ctx: WaveContext, volume: float) -> np.ndarray:
    """Stack of 6x6 operators for unit directions of shape (m, 3)."""
    n = np.asarray(directions, dtype=float)
    pref = ctx.k ** 3 * volume / (4.0 * np.pi)
    projector = np.eye(3)[None] - np.einsum('mi,mj->mij', n, n)
    nx = np.zeros((len(n), 3, 3))
    nx[:, 0, 1], nx[:, 0, 2] = -n[:, 2], n[:, 1]
    nx[:, 1, 0], nx[:, 1, 2] = n[:, 2], -n[:, 0]
    nx[:, 2, 0], nx[:, 2, 1] = -n[:, 1], n[:, 0]
    E_block = pref * np.concatenate([
        projector @ alpha, -np.sqrt(ctx.mu0 / ctx.eps0) * nx @ beta], axis=2)
    H_block = ctx.admittance * nx @ E_block
    return np.concatenate([E_block, H_block], axis=1)
