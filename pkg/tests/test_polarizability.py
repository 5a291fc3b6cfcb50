"""
Tests for boundary-series polarizability tensors
"""

import numpy as np
import pytest

from scatterwise.core.geometry import make_canonical_mesh, mesh_measures, transform_mesh
from scatterwise.core.polarizability import (
    BChain, MaterialContrast, alpha_approx, ball_polarizability, beta_tensor, compute_b_tensor,
    electric_tensor, induced_moments, polarizability, psi_kernel,
)
from scatterwise.utils.errors import InvalidArgumentError, SingularEvaluationError


@pytest.fixture(scope="module")
def sphere_chain():
    return BChain(make_canonical_mesh('sphere', 1.0, refinement=3))


@pytest.fixture(scope="module")
def ellipsoid_chain():
    return BChain(make_canonical_mesh('ellipsoid', [1.0, 0.5, 0.5], refinement=2))


def test_ball_formula():
    """6 gamma / (3 - gamma): 1.2 for eps = 3, 3 for gamma = 1, -1.5 for gamma = -1."""
    assert np.allclose(ball_polarizability(0.5).tensor, 1.2 * np.eye(3))
    assert np.allclose(ball_polarizability(1.0).tensor, 3.0 * np.eye(3))
    assert np.allclose(ball_polarizability(-1.0).tensor, -1.5 * np.eye(3))


def test_material_contrast():
    c = MaterialContrast.from_values(3.0)
    assert c.gamma_eps == pytest.approx(0.5)
    assert c.gamma_mu == 0
    assert c.skin_depth == float('inf')
    assert not c.skin_regime(1.0)

    metal = MaterialContrast.from_values(1.0, sigma=2e4, omega=1.0)
    assert metal.skin_depth == pytest.approx(np.sqrt(2.0 / 2e4))
    assert metal.skin_regime(1.0)
    assert abs(metal.gamma_eps) <= 1.0
    assert not MaterialContrast.from_values(1.0, sigma=2e4, omega=1.0, skin=False).skin_regime(1.0)


def test_material_contrast_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        MaterialContrast.from_values(2.0, sigma=1.0)
    with pytest.raises(InvalidArgumentError):
        MaterialContrast.from_values(2.0, sigma=-1.0, omega=1.0)
    with pytest.raises(InvalidArgumentError):
        MaterialContrast.from_values("not a number")


def test_passive_contrast_bound_is_checked(monkeypatch):
    """The passive-material bound is an explicit check, not an assert."""
    monkeypatch.setattr(MaterialContrast, 'gamma_eps', property(lambda self: 1.5 + 0j))
    with pytest.raises(InvalidArgumentError):
        MaterialContrast.from_values(3.0)


def test_psi_kernel():
    assert psi_kernel([0, 0, 1], [0, 0, 0], [0, 0, 1]) == pytest.approx(-1.0)
    with pytest.raises(SingularEvaluationError):
        psi_kernel([1, 2, 3], [1, 2, 3], [0, 0, 1])


def test_b0_is_volume(sphere_chain):
    """b^(0) = V I exactly on a closed polyhedron."""
    b0 = compute_b_tensor(sphere_chain.mesh, 0, chain=sphere_chain).tensor
    assert np.allclose(b0, sphere_chain.volume * np.eye(3), atol=1e-12)


def test_b1_sphere_oracle(sphere_chain):
    """The 1/r-weighted normal-pair tensor on the unit sphere is 16 pi^2 / 9 I."""
    b1 = sphere_chain.tensor(1)
    target = 16.0 * np.pi ** 2 / 9.0
    assert np.allclose(np.diag(b1), target, rtol=0.05)
    assert np.max(np.abs(b1 - np.diag(np.diag(b1)))) < 1e-2 * target


def test_b1_improves_under_refinement():
    target = 16.0 * np.pi ** 2 / 9.0
    errors = []
    for level in (1, 2, 3):
        b1 = BChain(make_canonical_mesh('sphere', 1.0, refinement=level)).tensor(1)
        errors.append(np.max(np.abs(np.diag(b1) - target)) / target)
    assert errors[0] > errors[1] > errors[2]


@pytest.mark.slow
def test_b1_sphere_refinement_4():
    b1 = BChain(make_canonical_mesh('sphere', 1.0, refinement=4)).tensor(1)
    assert np.allclose(np.diag(b1), 16.0 * np.pi ** 2 / 9.0, rtol=0.02)


def test_chain_factor_on_sphere(sphere_chain):
    """Each extra psi factor scales the sphere's tensor by -2 pi / 3."""
    b1, b2, b3 = (np.diag(sphere_chain.tensor(m)) for m in (1, 2, 3))
    assert np.allclose(b2 / b1, -2.0 * np.pi / 3.0, rtol=0.05)
    assert np.allclose(b3 / b2, -2.0 * np.pi / 3.0, rtol=0.05)


def test_sphere_polarizability(sphere_chain):
    """eps = 3 converges to 3 (eps - 1) / (eps + 2) = 1.2."""
    alpha = polarizability(sphere_chain.mesh, 0.5, chain=sphere_chain)
    assert np.allclose(np.diag(alpha.tensor), 1.2, rtol=0.03)
    off = alpha.tensor - np.diag(np.diag(alpha.tensor))
    assert np.max(np.abs(off)) <= 1e-2 * 1.2
    assert alpha.ratio is not None and alpha.ratio < 1


@pytest.mark.slow
def test_sphere_polarizability_refinement_4():
    mesh = make_canonical_mesh('sphere', 1.0, refinement=4)
    alpha = polarizability(mesh, 0.5)
    assert np.allclose(np.diag(alpha.tensor), 1.2, rtol=0.02)
    off = alpha.tensor - np.diag(np.diag(alpha.tensor))
    assert np.max(np.abs(off)) <= 1e-2 * 1.2
    beta = polarizability(mesh, -1.0)
    assert np.allclose(np.diag(beta.tensor), -1.5, rtol=0.02)


def test_conductor_limit(sphere_chain):
    """gamma = -1 gives the perfect-conductor value -1.5 on the unit sphere."""
    beta = polarizability(sphere_chain.mesh, -1.0, chain=sphere_chain)
    assert np.allclose(np.diag(beta.tensor), -1.5, rtol=0.03)


def test_first_order_on_sphere(sphere_chain):
    """alpha^(1) = 2 gamma + 2 gamma^2 / 3 on the sphere; the first correction is 2 gamma^2 / 3."""
    result = alpha_approx(sphere_chain.mesh, 0.5, 1, chain=sphere_chain)
    assert np.allclose(np.diag(result.tensor), 1.0 + 0.5 ** 2 * 2.0 / 3.0, rtol=0.03)
    assert len(result.corrections) == 1
    assert result.corrections[0] == pytest.approx(2.0 * 0.5 ** 2 / 3.0, rel=0.05)


@pytest.mark.parametrize("chain_name", ["sphere_chain", "ellipsoid_chain"])
def test_series_ratios(chain_name, request):
    """Successive corrections shrink geometrically with a near-constant ratio."""
    chain = request.getfixturevalue(chain_name)
    result = alpha_approx(chain.mesh, 0.5, 6, chain=chain)
    c = np.array(result.corrections)
    ratios = c[1:] / c[:-1]
    assert np.all(ratios < 1)
    assert ratios[1:].max() / ratios[1:].min() < 2.0


def test_sphere_ratio_matches_gamma_over_three(sphere_chain):
    """The correction ratio stays at gamma / 3 instead of drifting towards gamma."""
    for gamma in (0.5, 0.9):
        result = alpha_approx(sphere_chain.mesh, gamma, 8, chain=sphere_chain)
        c = np.array(result.corrections)
        assert np.allclose(c[1:] / c[:-1], gamma / 3.0, rtol=0.1)


@pytest.mark.parametrize("level", [2, 3])
def test_sphere_ratio_flat_across_refinement(level):
    chain = BChain(make_canonical_mesh('sphere', 1.0, refinement=level))
    c = np.array(alpha_approx(chain.mesh, 0.5, 6, chain=chain).corrections)
    ratios = c[1:] / c[:-1]
    assert ratios.max() / ratios.min() < 1.15


def test_ellipsoid_ratio_constant():
    """2:1 prolate body: the long axis sets a constant ratio near gamma (1 - 2 L_x)."""
    chain = BChain(make_canonical_mesh('ellipsoid', [2.0, 1.0, 1.0], refinement=2))
    c = np.array(alpha_approx(chain.mesh, 0.5, 7, chain=chain).corrections)
    ratios = c[2:] / c[1:-1]
    assert np.allclose(ratios, ratios.mean(), rtol=0.05)
    assert 0.28 < ratios.mean() < 0.36


def test_balanced_zero_order(sphere_chain):
    """The balanced b^(0) is V I up to quadrature error and closes the chain sum."""
    V = sphere_chain.volume
    balanced = sphere_chain.balanced_zero()
    assert np.allclose(balanced, V * np.eye(3), atol=0.02 * V)
    b = sphere_chain.tensors(40)
    total = balanced + sum((-1.0 / (2 * np.pi)) ** m * b[m] for m in range(1, 41))
    assert np.max(np.abs(total)) < 1e-10 * V


def test_chain_iterates_have_zero_mean(sphere_chain):
    sphere_chain.tensor(5)
    areas = sphere_chain.mesh.areas
    assert np.max(np.abs(areas @ sphere_chain._chain)) < 1e-12 * areas.sum()


def test_constant_weight_chain_vanishes():
    """Replacing 1/r by 1 in the normal-pair tensor gives (oint N)(oint N)^T = 0."""
    mesh = make_canonical_mesh('ellipsoid', [1.0, 0.6, 0.4], refinement=1)
    weighted = mesh.areas[:, None] * mesh.normals
    ones = np.ones((mesh.n_panels, mesh.n_panels))
    assert np.allclose(weighted.T @ ones @ weighted, 0.0, atol=1e-12)


def test_unit_contrast_limit(sphere_chain):
    """gamma = 1 (eps -> infinity) converges to the ball value 3."""
    alpha = polarizability(sphere_chain.mesh, 1.0, chain=sphere_chain)
    assert np.allclose(np.diag(alpha.tensor), 3.0, rtol=0.05)
    assert alpha.ratio is not None and alpha.ratio < 0.5


def test_conductor_series_converges(sphere_chain):
    """At gamma = -1 the corrections still shrink, so the tolerance is met."""
    beta = polarizability(sphere_chain.mesh, -1.0, chain=sphere_chain, tol=1e-8)
    assert beta.order < 30
    assert beta.corrections[-1] < 1e-7


def test_series_rejects_large_gamma(sphere_chain):
    with pytest.raises(InvalidArgumentError):
        polarizability(sphere_chain.mesh, 1.5, chain=sphere_chain)


def test_scale_invariance():
    """alpha is dimensionless: scaling the body leaves it unchanged."""
    mesh = make_canonical_mesh('ellipsoid', [1.0, 0.6, 0.4], refinement=2)
    a1 = polarizability(mesh, 0.5).tensor
    a2 = polarizability(transform_mesh(mesh, scale=3.0), 0.5).tensor
    assert np.allclose(a1, a2, rtol=1e-8, atol=1e-10)


def test_rotation_equivariance():
    """alpha(R body) = R alpha(body) R^T."""
    mesh = make_canonical_mesh('ellipsoid', [1.0, 0.6, 0.4], refinement=2)
    c, s = np.cos(0.4), np.sin(0.4)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    a = polarizability(mesh, 0.5).tensor
    b = polarizability(transform_mesh(mesh, rotation=R), 0.5).tensor
    assert np.allclose(b, R @ a @ R.T, rtol=1e-8, atol=1e-8)


def test_ellipsoid_anisotropy():
    """The long axis of a prolate body polarizes most strongly."""
    mesh = make_canonical_mesh('ellipsoid', [2.0, 1.0, 1.0], refinement=2)
    diag = np.real(np.diag(polarizability(mesh, 0.5).tensor))
    assert diag[0] > diag[1]
    assert diag[1] == pytest.approx(diag[2], rel=0.05)


def test_beta_tensor_terms(sphere_chain):
    """beta vanishes for an insulator with mu = mu0 and adds both terms otherwise."""
    mesh = sphere_chain.mesh
    plain = MaterialContrast.from_values(3.0)
    assert np.allclose(beta_tensor(mesh, plain, chain=sphere_chain).tensor, 0.0)

    skin = MaterialContrast.from_values(3.0, skin=True)
    assert np.allclose(beta_tensor(None, skin, size=1.0).tensor, -1.5 * np.eye(3))

    magnetic = MaterialContrast.from_values(3.0, mu=3.0, skin=True)
    ball = beta_tensor(None, magnetic, size=1.0).tensor
    assert np.allclose(ball, (-1.5 + 1.2) * np.eye(3))
    meshed = beta_tensor(mesh, magnetic, chain=sphere_chain).tensor
    assert np.allclose(np.diag(meshed), -0.3, atol=0.08)


def test_ball_needs_radius():
    with pytest.raises(InvalidArgumentError):
        beta_tensor(None, MaterialContrast.from_values(3.0))


def test_electric_tensor_zero_contrast(sphere_chain):
    vacuum = MaterialContrast.from_values(1.0)
    assert np.allclose(electric_tensor(sphere_chain.mesh, vacuum, chain=sphere_chain).tensor, 0.0)


def test_induced_moments():
    alpha = 1.2 * np.eye(3)
    beta = -1.5 * np.eye(3)
    moments = induced_moments(alpha, beta, 2.0, [1, 0, 0], [0, 1, 0], eps0=2.0, mu0=0.5)
    assert np.allclose(moments['P'], [4.8, 0, 0])
    assert np.allclose(moments['M'], [0, -1.5, 0])


def test_volume_matches_measures(sphere_chain):
    assert sphere_chain.volume == pytest.approx(mesh_measures(sphere_chain.mesh)['volume'])


if __name__ == '__main__':
    pytest.main([__file__])
