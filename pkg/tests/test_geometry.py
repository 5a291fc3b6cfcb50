"""
Tests for surface meshes and surface quadrature
"""

import numpy as np
import pytest

from scatterwise.core.geometry import (
    QuadratureSpec, SurfaceMesh, icosahedral_directions, load_mesh, locate_panel,
    make_canonical_mesh, mesh_measures, normal_derivative_matrix, self_integral_one_over_r,
    single_layer_matrix, subdivided_rule, surface_integral, transform_mesh, validate_topology,
    write_mesh,
)
from scatterwise.utils.errors import InvalidArgumentError, QuadratureError, TopologyError


@pytest.fixture(scope="module")
def sphere():
    return make_canonical_mesh('sphere', 1.0, refinement=3)


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def test_icosphere_panel_counts():
    """Each refinement splits every panel into four."""
    for level in range(3):
        mesh = make_canonical_mesh('sphere', 2.0, refinement=level)
        assert mesh.n_panels == 20 * 4 ** level
        assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 2.0)


def test_box_measures_exact():
    """Boxes are flat-faced, so area and volume are exact at any refinement."""
    mesh = make_canonical_mesh('box', [1.0, 2.0, 3.0], refinement=1)
    measures = mesh_measures(mesh)
    assert measures['volume'] == pytest.approx(6.0, rel=1e-12)
    assert measures['area'] == pytest.approx(22.0, rel=1e-12)
    assert np.allclose(measures['centroid'], 0.0, atol=1e-12)


def test_sphere_measures(sphere):
    """Inscribed icosphere volume and area approach the ball's."""
    measures = mesh_measures(sphere)
    assert measures['volume'] == pytest.approx(4.0 / 3.0 * np.pi, rel=0.02)
    assert measures['area'] == pytest.approx(4.0 * np.pi, rel=0.02)
    assert sphere.characteristic_size == pytest.approx(1.0, rel=1e-9)


def test_normals_point_outward(sphere):
    """Outward normals agree with the radial direction on a centered sphere."""
    radial = np.einsum('ij,ij->i', sphere.normals, sphere.centroids)
    assert np.all(radial > 0)


def test_open_mesh_rejected(sphere):
    with pytest.raises(TopologyError):
        SurfaceMesh(sphere.vertices, sphere.triangles[1:])


def test_inward_mesh_rejected(sphere):
    with pytest.raises(TopologyError):
        SurfaceMesh(sphere.vertices, sphere.triangles[:, [0, 2, 1]])


def test_disconnected_mesh_rejected():
    a = make_canonical_mesh('sphere', 1.0, refinement=1)
    b = transform_mesh(a, translation=[5.0, 0.0, 0.0])
    vertices = np.vstack([a.vertices, b.vertices])
    triangles = np.vstack([a.triangles, b.triangles + len(a.vertices)])
    with pytest.raises(TopologyError, match="disconnected"):
        SurfaceMesh(vertices, triangles)


def test_transform_preserves_measures():
    """Rigid motions keep area and volume; scaling multiplies the volume by s^3."""
    mesh = make_canonical_mesh('ellipsoid', [2.0, 1.0, 0.5], refinement=2)
    base = mesh_measures(mesh)
    moved = transform_mesh(mesh, rotation=_rotation([1, 2, 3], 0.7), translation=[1.0, -2.0, 0.5])
    validate_topology(moved)
    after = mesh_measures(moved)
    assert after['volume'] == pytest.approx(base['volume'], rel=1e-12)
    assert after['area'] == pytest.approx(base['area'], rel=1e-12)
    assert np.allclose(after['centroid'], [1.0, -2.0, 0.5], atol=1e-12)
    scaled = transform_mesh(mesh, scale=2.0)
    assert mesh_measures(scaled)['volume'] == pytest.approx(8.0 * base['volume'], rel=1e-12)


def test_improper_rotation_rejected(sphere):
    with pytest.raises(InvalidArgumentError):
        transform_mesh(sphere, rotation=np.diag([1.0, 1.0, -1.0]))


def test_icosahedral_directions():
    for count in (12, 42, 162):
        nodes = icosahedral_directions(count)
        assert nodes.shape == (count, 3)
        assert np.allclose(np.linalg.norm(nodes, axis=1), 1.0)
    with pytest.raises(InvalidArgumentError):
        icosahedral_directions(20)


def test_quadrature_spec_validation():
    with pytest.raises(InvalidArgumentError):
        QuadratureSpec(strategy='gauss')
    with pytest.raises(InvalidArgumentError):
        QuadratureSpec(order=0)
    bary, weights = QuadratureSpec(order=3).rule()
    assert len(weights) == 6
    assert weights.sum() == pytest.approx(1.0)


def test_subdivided_rule_integrates_linear():
    """Barycentric nodes of a subdivided rule still integrate linear functions exactly."""
    nodes, weights = subdivided_rule(QuadratureSpec(order=2), 2)
    assert weights.sum() == pytest.approx(1.0)
    assert np.allclose(weights @ nodes, [1 / 3, 1 / 3, 1 / 3])


def test_surface_integral_divergence_theorem(sphere):
    """Integral of n . x / 3 over the surface is the enclosed volume."""
    area = surface_integral(sphere, lambda x, n: np.ones(len(x)))
    volume = surface_integral(sphere, lambda x, n: np.einsum('ij,ij->i', x, n) / 3.0)
    measures = mesh_measures(sphere)
    assert area == pytest.approx(measures['area'], rel=1e-12)
    assert volume == pytest.approx(measures['volume'], rel=1e-12)


def test_surface_integral_singular_point(sphere):
    """Integral of 1/|x - s| over the unit sphere is 4 pi for x on the sphere."""
    x = sphere.centroids[17]
    value = surface_integral(sphere, lambda s, n: 1.0 / np.linalg.norm(s - x, axis=1),
                             singular_at=x)
    assert value == pytest.approx(4.0 * np.pi, rel=0.02)


def test_surface_integral_reports_bad_panels(sphere):
    with pytest.raises(QuadratureError):
        surface_integral(sphere, lambda x, n: np.full(len(x), np.nan))


def test_self_integral_equilateral():
    """1/r over an equilateral triangle from its centroid: sqrt(3) L asinh(sqrt(3))."""
    L = 0.3
    triangle = np.array([[0.0, 0.0, 0.0], [L, 0.0, 0.0], [L / 2, L * np.sqrt(3) / 2, 0.0]])
    tetra = np.vstack([triangle, [[L / 2, L / 4, L]]])
    mesh = SurfaceMesh(tetra, [[0, 2, 1], [0, 1, 3], [1, 2, 3], [2, 0, 3]])
    panel = 0
    value = self_integral_one_over_r(mesh)[panel]
    assert value == pytest.approx(np.sqrt(3) * L * np.arcsinh(np.sqrt(3)), rel=1e-12)


def test_single_layer_row_sums(sphere):
    """Row sums of the 1/r operator on the unit sphere approach 4 pi."""
    for strategy in ('duffy', 'subdivide'):
        S = single_layer_matrix(sphere, QuadratureSpec(strategy=strategy))
        assert np.allclose(S @ np.ones(sphere.n_panels), 4.0 * np.pi, rtol=0.02)


def test_normal_derivative_identities(sphere):
    """Columns obey the solid-angle identity exactly; rows approach -2 pi on the sphere."""
    K = normal_derivative_matrix(sphere)
    areas = sphere.areas
    assert np.allclose(areas @ K, -2.0 * np.pi * areas, rtol=1e-10)
    assert np.allclose(K.sum(axis=1), -2.0 * np.pi, rtol=0.03)


def test_locate_panel(sphere):
    assert locate_panel(sphere, sphere.centroids[42]) == 42
    assert locate_panel(sphere, 1.5 * sphere.centroids[42]) is None


def test_mesh_file_round_trip(tmp_path, sphere):
    path = write_mesh(sphere, tmp_path / "sphere.mesh")
    loaded = load_mesh(path)
    assert loaded.n_panels == sphere.n_panels
    assert np.array_equal(loaded.vertices, sphere.vertices)


def test_stl_import(tmp_path):
    """STL files are read through trimesh with merged vertices."""
    trimesh = pytest.importorskip("trimesh")
    mesh = make_canonical_mesh('box', [1.0, 1.0, 2.0], refinement=1)
    path = tmp_path / "box.stl"
    trimesh.Trimesh(vertices=np.array(mesh.vertices), faces=np.array(mesh.triangles),
                    process=False).export(str(path))
    loaded = load_mesh(path)
    assert mesh_measures(loaded)['volume'] == pytest.approx(2.0, rel=1e-6)


def test_malformed_mesh_file(tmp_path):
    path = tmp_path / "broken.mesh"
    path.write_text("4 4\n0 0 0\n1 0 0\n")
    with pytest.raises(InvalidArgumentError):
        load_mesh(path)


def test_closed_surface_normal_integral_vanishes():
    """oint N dS = 0 for any closed mesh, rotated or not."""
    meshes = [
        make_canonical_mesh('sphere', 1.0, refinement=2),
        make_canonical_mesh('box', [2.0, 1.0, 0.5], refinement=1),
        transform_mesh(make_canonical_mesh('ellipsoid', [1.0, 0.6, 0.4], refinement=2),
                       rotation=_rotation([1, 2, 3], 0.7), translation=[3.0, -1.0, 2.0]),
    ]
    for mesh in meshes:
        total = (mesh.areas[:, None] * mesh.normals).sum(axis=0)
        assert np.max(np.abs(total)) <= 1e-6 * mesh.areas.sum()


def test_unit_box_volume_at_refinement_0():
    mesh = make_canonical_mesh('box', [1.0, 1.0, 1.0], refinement=0)
    assert mesh.n_panels == 12
    assert mesh_measures(mesh)['volume'] == pytest.approx(1.0, rel=1e-14)


def test_round_ellipsoid_is_sphere():
    sphere = make_canonical_mesh('sphere', 1.0, refinement=3)
    ellipsoid = make_canonical_mesh('ellipsoid', [1.0, 1.0, 1.0], refinement=3)
    assert np.array_equal(ellipsoid.vertices, sphere.vertices)
    assert np.array_equal(ellipsoid.triangles, sphere.triangles)


def test_diameter_of_flat_point_set():
    """Coplanar vertices make the hull degenerate; the diameter falls back to all pairs."""
    xs, ys = np.meshgrid(np.arange(9.0), np.arange(9.0), indexing='ij')
    vertices = np.stack([xs.ravel(), ys.ravel(), np.zeros(81)], axis=1)
    mesh = SurfaceMesh(vertices, [[0, 1, 9]], validate=False)
    assert mesh.diameter == pytest.approx(8.0 * np.sqrt(2.0))


if __name__ == '__main__':
    pytest.main([__file__])
