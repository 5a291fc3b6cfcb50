"""
Tests for the N-particle local-field system
"""

import numpy as np
import pytest

from scatterwise.core.geometry import make_canonical_mesh, mesh_measures
from scatterwise.core.multiparticle import (
    IncidentField, InteractionOperator, ParticleInstance, dominance_bound, evaluate_field,
    field_grid, grid_points, guard_radius, interaction_matrix, lattice_positions, min_distance,
    particle_from_ball, particle_from_mesh, random_positions, regime_report, scattered_at,
    solve_direct, solve_fixed_point, stratified_positions,
)
from scatterwise.core.polarizability import MaterialContrast
from scatterwise.core.scattering import WaveContext
from scatterwise.utils.errors import (
    ConfigurationError, InvalidArgumentError, OutOfRegionError, RegimeViolationError,
)


@pytest.fixture
def ctx():
    return WaveContext(k=1.0)


@pytest.fixture
def incident():
    return IncidentField.plane_wave([0, 0, 1], [1, 0, 0])


def _particle(center, rng=None, radius=0.1):
    if rng is None:
        alpha, beta = 1.2 * np.eye(3), np.zeros((3, 3))
    else:
        alpha = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        beta = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    return ParticleInstance(center=np.asarray(center, dtype=float), alpha=alpha, beta=beta,
                            volume=4.0 / 3.0 * np.pi * radius ** 3, size=radius)


def _random_scene(seed, count=12, side=40.0):
    rng = np.random.default_rng(seed)
    positions = random_positions(count, [[0, 0, 0], [side, side, side]], min_distance=10.0,
                                 seed=seed)
    return [_particle(p, rng, radius=rng.uniform(0.05, 0.15)) for p in positions]


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def test_plane_wave(ctx):
    wave = IncidentField.plane_wave([0, 0, 2], [0, 3, 0], amplitude=2.0)
    values = wave.at(np.array([[0.0, 0.0, np.pi]]), ctx)[0]
    assert np.allclose(values[:3], [0, -2.0, 0])
    assert np.allclose(values[3:], [2.0, 0, 0])
    with pytest.raises(InvalidArgumentError):
        IncidentField.plane_wave([0, 0, 1], [0, 0, 1])


def test_lattice_dominance(ctx):
    """A dilute 5x5x4 lattice of small balls is strongly diagonally dominant."""
    contrast = MaterialContrast.from_values(3.0)
    particles = [particle_from_ball(p, 0.1, contrast)
                 for p in lattice_positions([5, 5, 4], 20.0)]
    assert len(particles) == 100
    report = dominance_bound(particles, ctx)
    assert report['dominant']
    assert report['bound'] <= 3e-2
    assert report['bound_summed'] <= report['bound'] * (1 + 1e-12)
    assert report['bound'] <= report['bound_distance'] * (1 + 1e-12)
    assert report['min_distance'] == pytest.approx(20.0)

    fields = solve_fixed_point(particles, IncidentField.plane_wave([0, 0, 1], [1, 0, 0]), ctx)
    assert fields.route == 'fixed-point'
    assert fields.rate is None or fields.rate <= report['bound'] * (1 + 1e-6)


def test_streamed_dominance_matches_dense(ctx):
    particles = _random_scene(11, count=8)
    dense = dominance_bound(particles, ctx)
    streamed = dominance_bound(particles, ctx, dense_cap=4)
    for key in ('bound', 'bound_summed', 'bound_distance'):
        assert streamed[key] == pytest.approx(dense[key], rel=1e-12)


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_fixed_point_matches_direct(seed, ctx, incident):
    particles = _random_scene(seed)
    assert dominance_bound(particles, ctx)['dominant']
    iterative = solve_fixed_point(particles, incident, ctx, tol=1e-13)
    direct = solve_direct(particles, incident, ctx)
    scale = np.abs(direct.values).max()
    assert np.max(np.abs(iterative.values - direct.values)) <= 1e-8 * scale
    assert direct.residual <= 1e-10 * scale
    assert direct.condition is not None and direct.condition < 10


@pytest.mark.parametrize("seed", range(20))
def test_random_dominant_scenes(seed, ctx, incident):
    """Up to 50 particles: the iteration and the dense solve agree."""
    count = int(np.random.default_rng(100 + seed).integers(2, 51))
    particles = _random_scene(100 + seed, count=count, side=80.0)
    assert dominance_bound(particles, ctx)['dominant']
    iterative = solve_fixed_point(particles, incident, ctx, tol=1e-13)
    direct = solve_direct(particles, incident, ctx)
    scale = np.abs(direct.values).max()
    assert np.max(np.abs(iterative.values - direct.values)) <= 1e-8 * scale


def test_real_tensors_are_accepted(ctx, incident):
    particles = [ParticleInstance(center=np.array(c, dtype=float), alpha=1.2 * np.eye(3),
                                  beta=np.zeros((3, 3)), volume=0.004, size=0.1)
                 for c in ([0, 0, 0], [20, 0, 0])]
    assert particles[0].alpha.dtype == complex
    assert particles[0].beta.dtype == complex
    assert interaction_matrix(particles, ctx).shape == (12, 12)
    assert dominance_bound(particles, ctx)['dominant']
    direct = solve_direct(particles, incident, ctx)
    iterative = solve_fixed_point(particles, incident, ctx, tol=1e-14)
    assert np.allclose(iterative.values, direct.values, rtol=1e-10, atol=1e-14)


def test_stop_rule_is_absolute(ctx, incident):
    """A strong incident field still iterates until the update itself drops below tol."""
    particles = _random_scene(5, count=6)
    tol = 1e-6
    fields = solve_fixed_point(particles, incident.scaled(1e8), ctx, tol=tol)
    assert fields.history[-1] < tol
    assert all(change >= tol for change in fields.history[:-1])


@pytest.mark.parametrize("dense_cap", [4, 100])
def test_dominance_reuses_operator(dense_cap, ctx):
    particles = _random_scene(12, count=8)
    op = InteractionOperator(particles, ctx, dense_cap)
    shared = dominance_bound(particles, ctx, operator=op)
    fresh = dominance_bound(particles, ctx, dense_cap=dense_cap)
    for key in ('bound', 'bound_summed', 'bound_distance'):
        assert shared[key] == pytest.approx(fresh[key], rel=1e-14)
    if dense_cap >= len(particles):
        assert op._blocks is not None


def test_interaction_matrix_shape(ctx):
    particles = _random_scene(7, count=3)
    A = interaction_matrix(particles, ctx)
    assert A.shape == (18, 18)
    assert np.allclose(A[:6, :6], np.eye(6))


def test_empty_scene(ctx, incident):
    fields = solve_fixed_point([], incident, ctx)
    assert fields.values.shape == (0, 6)
    assert dominance_bound([], ctx)['bound'] == 0.0
    x = [1.0, 2.0, 3.0]
    assert np.allclose(evaluate_field(x, fields, [], incident, ctx), incident.at(np.array([x]), ctx)[0])


def test_single_particle(ctx, incident):
    """One particle sees only the incident field."""
    particle = _particle([0.0, 0.0, 0.0])
    fields = solve_fixed_point([particle], incident, ctx)
    assert np.allclose(fields.values[0], incident.at(np.zeros((1, 3)), ctx)[0])
    assert dominance_bound([particle], ctx)['bound'] == 0.0
    assert guard_radius([particle]) == pytest.approx(1.0)
    far = evaluate_field([0.0, 0.0, 50.0], fields, [particle], incident, ctx)
    assert np.abs(far - incident.at(np.array([[0.0, 0.0, 50.0]]), ctx)[0]).max() > 0


def test_single_particle_decays_as_one_over_r(ctx, incident):
    particle = _particle([0.0, 0.0, 0.0])
    fields = solve_fixed_point([particle], incident, ctx)
    n = np.array([0.0, 0.6, 0.8])
    near, far = scattered_at(np.array([50.0 * n, 100.0 * n]), fields, [particle], ctx)
    assert np.linalg.norm(near) / np.linalg.norm(far) == pytest.approx(2.0, rel=1e-9)


def test_scattered_envelope_far_away(ctx, incident):
    """r |U_scat| settles to a constant once kr is large against the scene."""
    particles = [_particle([0.0, 0.0, 0.0]), _particle([10.0, 0.0, 0.0])]
    fields = solve_direct(particles, incident, ctx)
    n = np.array([0.6, 0.0, 0.8])
    radii = np.array([2e3, 4e3, 8e3, 1.6e4])
    points = np.array([5.0, 0.0, 0.0]) + radii[:, None] * n
    envelope = radii * np.linalg.norm(scattered_at(points, fields, particles, ctx), axis=1)
    assert np.all(radii * ctx.k >= 100)
    assert np.allclose(envelope, envelope[-1], rtol=1e-2)


def test_mirror_symmetric_pair(ctx):
    """Two equal particles mirrored in x = 0 see mirrored local fields."""
    particles = [_particle([-10.0, 0.0, 0.0]), _particle([10.0, 0.0, 0.0])]
    wave = IncidentField.plane_wave([0, 0, 1], [0, 1, 0])
    fields = solve_direct(particles, wave, ctx)
    # E is polar and H axial under the reflection
    mirror = np.diag([-1.0, 1.0, 1.0, 1.0, -1.0, -1.0])
    assert np.abs(fields.values[1] - mirror @ fields.values[0]).max() <= 1e-10


def test_coincident_particles_rejected(ctx, incident):
    particles = [_particle([1.0, 1.0, 1.0]), _particle([1.0, 1.0, 1.0])]
    with pytest.raises(ConfigurationError):
        solve_fixed_point(particles, incident, ctx)
    with pytest.raises(ConfigurationError):
        regime_report(particles, ctx)


def test_permutation_invariance(ctx, incident):
    particles = _random_scene(21)
    order = np.random.default_rng(0).permutation(len(particles))
    base = solve_direct(particles, incident, ctx).values
    permuted = solve_direct([particles[i] for i in order], incident, ctx).values
    assert np.allclose(permuted, base[order], rtol=1e-12, atol=1e-14)


def test_linearity(ctx, incident):
    particles = _random_scene(22)
    factor = 2.5 - 0.75j
    base = solve_fixed_point(particles, incident, ctx, tol=1e-14).values
    scaled = solve_fixed_point(particles, incident.scaled(factor), ctx, tol=1e-14).values
    assert np.allclose(scaled, factor * base, rtol=1e-10, atol=1e-14)


def test_rotation_equivariance(ctx):
    """Rotating the scene, tensors and incident wave rotates the local fields."""
    R = _rotation([1.0, -2.0, 0.5], 1.1)
    particles = _random_scene(23)
    rotated = [ParticleInstance(center=R @ p.center, alpha=R @ p.alpha @ R.T,
                                beta=R @ p.beta @ R.T, volume=p.volume, size=p.size)
               for p in particles]
    wave = IncidentField.plane_wave([0, 0, 1], [1, 0, 0])
    turned = IncidentField.plane_wave(R @ wave.direction, R @ wave.polarization)
    base = solve_direct(particles, wave, ctx).values
    after = solve_direct(rotated, turned, ctx).values
    assert np.allclose(after[:, :3], base[:, :3] @ R.T, rtol=1e-10, atol=1e-13)
    assert np.allclose(after[:, 3:], base[:, 3:] @ R.T, rtol=1e-10, atol=1e-13)


def test_non_dominant_scene(ctx, incident):
    """Closely packed large particles reroute to the direct solver, or fail in strict mode."""
    particles = [ParticleInstance(center=np.array(p, dtype=float), alpha=40.0 * np.eye(3),
                                  beta=np.zeros((3, 3)), volume=1.0, size=0.5)
                 for p in lattice_positions([3, 1, 1], 1.5)]
    assert not dominance_bound(particles, ctx)['dominant']
    fields = solve_fixed_point(particles, incident, ctx)
    assert fields.route == 'direct'
    with pytest.raises(RegimeViolationError):
        solve_fixed_point(particles, incident, ctx, strict=True)


def test_regime_report(ctx):
    particles = [_particle([0, 0, 0], radius=0.1), _particle([20, 0, 0], radius=0.1)]
    report = regime_report(particles, ctx)
    assert report['regime_ok']
    assert report['kd_min'] == pytest.approx(20.0)

    crowded = [_particle([0, 0, 0], radius=0.1), _particle([2, 0, 0], radius=0.5)]
    report = regime_report(crowded, ctx)
    assert not report['regime_ok']
    assert report['particles'][1]['violations']


def test_evaluate_field_guard(ctx, incident):
    particles = _random_scene(31, count=4)
    fields = solve_direct(particles, incident, ctx)
    with pytest.raises(OutOfRegionError) as info:
        evaluate_field(particles[2].center + [0.5, 0.0, 0.0], fields, particles, incident, ctx,
                       margin=0.1)
    assert info.value.particle == 2


def test_field_grid_masks_particles(ctx, incident):
    particles = [_particle([0.0, 0.0, 0.0]), _particle([20.0, 0.0, 0.0])]
    fields = solve_direct(particles, incident, ctx)
    grid = field_grid([[-10, -10, 0], [30, 10, 0]], [8, 4, 0], fields, particles, incident, ctx,
                      margin=0.5)
    assert grid.shape == (9, 5, 1)
    assert grid.points.shape == (45, 3)
    d = np.min(np.linalg.norm(grid.points[:, None, :] - np.array([[0, 0, 0], [20, 0, 0]])[None], axis=2),
               axis=1)
    assert np.array_equal(grid.mask, d < 0.5 * min_distance(particles))
    assert np.all(grid.values[grid.mask] == 0)
    open_points = np.flatnonzero(~grid.mask)
    j = open_points[0]
    assert np.allclose(grid.values[j],
                       evaluate_field(grid.points[j], fields, particles, incident, ctx, margin=0.5))


def test_grid_points():
    points, shape = grid_points([[0, 0, 0], [1, 2, 3]], [1, 2, 0])
    assert shape == (2, 3, 1)
    assert np.allclose(points[-1], [1, 2, 0])
    with pytest.raises(InvalidArgumentError):
        grid_points([[0, 0, 0], [1, 1, 1]], [1, -1, 1])


def test_placement_helpers():
    lattice = lattice_positions([2, 3, 1], 5.0, origin=[1, 0, 0])
    assert lattice.shape == (6, 3)
    assert np.allclose(lattice[-1], [6, 10, 0])

    a = random_positions(20, [[0, 0, 0], [10, 10, 10]], min_distance=1.0, seed=4)
    b = random_positions(20, [[0, 0, 0], [10, 10, 10]], min_distance=1.0, seed=4)
    assert np.array_equal(a, b)
    assert np.min(np.linalg.norm(a[:, None] - a[None], axis=2) + 1e9 * np.eye(20)) >= 1.0
    with pytest.raises(ConfigurationError):
        random_positions(50, [[0, 0, 0], [1, 1, 1]], min_distance=1.0, max_tries=50)

    cells = stratified_positions([2, 2, 2], [[0, 0, 0], [2, 2, 2]], seed=1, jitter=0.5)
    assert cells.shape == (8, 3)
    assert np.array_equal(np.sort(np.floor(cells), axis=0), np.sort(
        np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing='ij'), -1).reshape(-1, 3), axis=0))
    assert not np.array_equal(cells, stratified_positions([2, 2, 2], [[0, 0, 0], [2, 2, 2]], seed=2))


def test_particle_from_mesh_and_move():
    contrast = MaterialContrast.from_values(3.0)
    mesh = make_canonical_mesh('sphere', 1.0, refinement=2)
    particle = particle_from_mesh(mesh, contrast, order=4)
    assert np.allclose(np.diag(particle.alpha), 1.2, rtol=0.08)
    assert np.allclose(particle.beta, 0.0)
    moved = particle.moved([5.0, 0.0, 0.0])
    assert np.allclose(moved.center, [5.0, 0.0, 0.0])
    assert np.allclose(mesh_measures(moved.mesh)['centroid'], [5.0, 0.0, 0.0], atol=1e-12)
    assert np.array_equal(moved.alpha, particle.alpha)


if __name__ == '__main__':
    pytest.main([__file__])
