"""
Weighted dual-marching-cubes extraction: closed-form pieces, topology and orientation,
finite-difference checks of the backward pass
"""

import numpy as np
import pytest

from isofit.errors import ContractViolation, ProvenanceError
from isofit.flexicubes import (FlexiGrid, cube_corner_vertices, dual_vertex, edge_crossing, extract_backward,
                               extract_mesh, grid_points)
from isofit.mesh import TriMesh, mesh_validate


def sphere(radius=0.35):
    return lambda p: np.linalg.norm(p, axis=1) - radius


# ---- edge_crossing / dual_vertex -------------------------------------------

def test_edge_crossing_values():
    assert edge_crossing(-1.0, 1.0, [0.0], [1.0])[0] == pytest.approx(0.5)
    assert edge_crossing(-1.0, 1.0, [0.0], [1.0], 2.0, 1.0)[0] == pytest.approx(1.0 / 3.0)
    assert edge_crossing(-2.0, 2.0, [0.0], [1.0])[0] == pytest.approx(0.5)


def test_edge_crossing_strictly_between():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sa, sb = -rng.uniform(1e-6, 2), rng.uniform(1e-6, 2)
        u = edge_crossing(sa, sb, [0.0], [1.0], rng.uniform(0.1, 5), rng.uniform(0.1, 5))[0]
        assert 0.0 < u < 1.0


def test_edge_crossing_same_sign_rejected():
    with pytest.raises(ContractViolation):
        edge_crossing(1.0, 2.0, [0.0], [1.0])


def _unit_cube():
    return np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.float64)


def test_dual_vertex_planar_sdf():
    x = _unit_cube()
    v = dual_vertex(x[:, 2] - 0.5, x)
    assert v[2] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(v[:2], [0.5, 0.5])


def test_dual_vertex_equal_beta_is_centroid():
    x = _unit_cube()
    s = np.linalg.norm(x - 0.2, axis=1) - 0.6
    crossings = [edge_crossing(s[a], s[b], x[a], x[b])
                 for a, b in [(0, 1), (0, 2), (0, 4), (1, 3), (2, 3), (4, 5), (4, 6), (1, 5), (2, 6),
                              (3, 7), (5, 7), (6, 7)]
                 if s[a] * s[b] < 0]
    np.testing.assert_allclose(dual_vertex(s, x, beta=np.full(12, 3.0)), np.mean(crossings, axis=0))


def test_dual_vertex_without_crossing():
    assert dual_vertex(np.ones(8), _unit_cube()) is None


# ---- extract_mesh -----------------------------------------------------------

def test_sphere_extraction_is_closed_and_accurate():
    grid = FlexiGrid.from_function(sphere(), 32)
    mesh = extract_mesh(grid)
    report = mesh_validate(mesh)
    assert report.watertight and not report.empty
    assert report.euler_characteristic == 2
    assert report.degenerate_triangles == 0 and report.duplicate_triangles == 0
    assert np.abs(sphere()(mesh.vertices)).max() < 1.5 * grid.cell
    # normals point toward positive sdf
    assert (np.einsum("fd,fd->f", mesh.face_normals(), mesh.face_centroids()) > 0).all()


def test_positive_field_gives_empty_mesh():
    mesh = extract_mesh(FlexiGrid.from_function(lambda p: np.ones(len(p)), 8))
    assert mesh.is_empty and len(mesh.vertices) == 0


def test_midpoints_are_quad_centroids_at_half_gamma():
    mesh = extract_mesh(FlexiGrid.from_function(sphere(0.3), 12))
    prov = mesh.provenance
    centroids = mesh.vertices[prov.quads].mean(axis=1)
    np.testing.assert_allclose(mesh.vertices[prov.n_dual:], centroids, atol=1e-15)


def test_gamma_owner_is_lowest_cube_id():
    mesh = extract_mesh(FlexiGrid.from_function(sphere(0.3), 10))
    prov = mesh.provenance
    cube_of = prov.vertex_cell[prov.quads]
    np.testing.assert_array_equal(prov.quad_gamma_cube, cube_of.min(axis=1))


def test_default_weights_match_explicit_dense_ones():
    R = 10
    sparse = FlexiGrid.from_function(sphere(0.3), R)
    dense = FlexiGrid.create(sparse.sdf, R, alpha=np.ones((R ** 3, 8)), beta=np.ones((R ** 3, 12)),
                             gamma=np.full(R ** 3, 0.5))
    a, b = extract_mesh(sparse), extract_mesh(dense)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)


def test_extraction_is_deterministic():
    grid = FlexiGrid.from_function(sphere(), 16)
    a, b = extract_mesh(grid), extract_mesh(grid)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)


def test_exact_zero_is_nudged_positive():
    R = 4
    pts = grid_points(R)
    # plane through a layer of grid vertices
    mesh = extract_mesh(FlexiGrid.create(pts[:, 2], R))
    assert not mesh.is_empty
    assert (mesh.vertices[:, 2] <= 1e-7).all()


def test_invalid_offset_names_vertex():
    R = 4
    grid = FlexiGrid.from_function(sphere(0.3), R)
    offsets = np.zeros_like(grid.offsets)
    offsets[17, 1] = 0.6 * grid.cell
    with pytest.raises(ContractViolation, match="vertex 17"):
        FlexiGrid.create(grid.sdf, R, offsets=offsets)


def test_invalid_gamma_names_cube():
    R = 3
    gamma = np.full(R ** 3, 0.5)
    gamma[5] = 1.0
    with pytest.raises(ContractViolation, match="cube 5"):
        FlexiGrid.create(np.ones((R + 1) ** 3), R, alpha=np.ones((R ** 3, 8)), beta=np.ones((R ** 3, 12)),
                         gamma=gamma)


# ---- extract_backward -------------------------------------------------------

def _random_grid(seed, R=8):
    rng = np.random.default_rng(seed)
    base = FlexiGrid.from_function(sphere(0.3), R)
    n_cubes = R ** 3
    return FlexiGrid.create(
        base.sdf + rng.normal(scale=0.01, size=base.sdf.shape), R,
        offsets=rng.uniform(-0.1, 0.1, size=base.offsets.shape) * base.cell,
        alpha=rng.uniform(0.5, 2.0, size=(n_cubes, 8)),
        beta=rng.uniform(0.5, 2.0, size=(n_cubes, 12)),
        gamma=rng.uniform(0.2, 0.8, size=n_cubes),
    )


def _with(grid, name, index, delta):
    arrays = {k: getattr(grid, k).copy() for k in ("sdf", "offsets", "alpha", "beta", "gamma")}
    arrays[name][index] += delta
    sdf = arrays.pop("sdf")
    return FlexiGrid.create(sdf, grid.resolution, grid.bbox, **arrays)


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    grid = _random_grid(seed)
    mesh = extract_mesh(grid)
    rng = np.random.default_rng(100 + seed)
    G = rng.normal(size=mesh.vertices.shape)
    grads = extract_backward(grid, mesh, G)
    h = 1e-5

    def loss(g):
        m = extract_mesh(g)
        assert m.vertices.shape == mesh.vertices.shape
        return float((G * m.vertices).sum())

    prov = mesh.provenance
    cubes = prov.vertex_cell[prov.vertex_cell >= 0]
    corners = np.unique(cube_corner_vertices(cubes, grid.resolution))
    corners = corners[np.abs(grid.sdf[corners]) > 2e-2]
    picks = {
        "sdf": [(v,) for v in rng.choice(corners, 4, replace=False)],
        "offsets": [(v, rng.integers(3)) for v in rng.choice(corners, 4, replace=False)],
        "alpha": [(c, rng.integers(8)) for c in rng.choice(cubes, 4, replace=False)],
        "beta": [(c, rng.integers(12)) for c in rng.choice(cubes, 4, replace=False)],
        "gamma": [(c,) for c in rng.choice(prov.quad_gamma_cube, 4, replace=False)],
    }
    for name, indices in picks.items():
        for index in indices:
            fd = (loss(_with(grid, name, index, h)) - loss(_with(grid, name, index, -h))) / (2 * h)
            ad = getattr(grads, name)[index]
            assert abs(ad - fd) / max(1.0, abs(fd)) < 1e-4, (name, index, ad, fd)


def test_backward_zero_upstream_gives_zero():
    grid = _random_grid(0)
    mesh = extract_mesh(grid)
    grads = extract_backward(grid, mesh, np.zeros_like(mesh.vertices))
    for name in ("sdf", "offsets", "alpha", "beta", "gamma"):
        assert not getattr(grads, name).any()


def test_beta_gradient_vanishes_when_crossings_share_the_pulled_coordinate():
    R = 4
    grid = FlexiGrid.create(grid_points(R)[:, 2] - 0.03, R, alpha=np.ones((R ** 3, 8)),
                            beta=np.ones((R ** 3, 12)), gamma=np.full(R ** 3, 0.5))
    mesh = extract_mesh(grid)
    G = np.zeros_like(mesh.vertices)
    G[:, 2] = 1.0
    grads = extract_backward(grid, mesh, G)
    assert np.abs(grads.beta).max() < 1e-12
    assert np.abs(grads.gamma).max() < 1e-12


def test_sparse_grid_gradients_follow_sparse_layout():
    base = FlexiGrid.from_function(sphere(0.3), 8)
    mesh = extract_mesh(base)
    grads = extract_backward(base, mesh, np.ones_like(mesh.vertices))
    assert grads.alpha.shape == (0, 8) and grads.gamma.shape == (0,)
    assert grads.sdf.shape == base.sdf.shape


def test_backward_rejects_foreign_mesh():
    a = FlexiGrid.from_function(sphere(0.3), 8)
    b = FlexiGrid.from_function(sphere(0.2), 8)
    mesh = extract_mesh(a)
    with pytest.raises(ProvenanceError):
        extract_backward(b, mesh, np.zeros_like(mesh.vertices))
    with pytest.raises(ProvenanceError):
        extract_backward(a, TriMesh(mesh.vertices, mesh.triangles), np.zeros_like(mesh.vertices))
