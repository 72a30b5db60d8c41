"""
SDF / cube-weight / texture networks, ellipsoid warm-up and checkpoints
"""

import numpy as np
import pytest

from isofit.autodiff import grad_check
from isofit.checkpoint import load_checkpoint, save_checkpoint
from isofit.config import HashGridSettings, NetworkSettings, TextureSettings
from isofit.errors import ConfigError, ContractViolation, InputError
from isofit.flexicubes import cube_centers, grid_points, surface_cubes
from isofit.networks import (SdfNetwork, TextureField, cube_weights_eval, evaluate_cube_weights, evaluate_sdf,
                             grid_from_network, init_ellipsoid, sdf_eval, texture_eval)
from isofit.sampling import probe_points
from isofit.shapes import Ellipsoid
from isofit.transform import is_trending_down

TINY = NetworkSettings(hash_grid=HashGridSettings(levels=3, n_min=4, growth=2.0, table_size=2 ** 8, features=2),
                       hidden=8)


def _unit(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def tiny_net():
    return SdfNetwork.create(TINY, seed=3, resolution=16)


def test_offsets_bounded_by_cell(tiny_net):
    rng = np.random.default_rng(0)
    tiny_net.params["vertex.w3"][:, 1:] = rng.normal(scale=50.0, size=(8, 3))
    tiny_net.set_params(tiny_net.params)
    _, delta = evaluate_sdf(tiny_net, rng.uniform(-0.5, 0.5, size=(1000, 3)))
    assert np.abs(delta).max() <= TINY.offset_bound * tiny_net.cell


def test_sdf_eval_is_deterministic(tiny_net):
    p = np.array([0.1, -0.2, 0.3])
    s1, d1 = sdf_eval(tiny_net, p)
    s2, d2 = sdf_eval(tiny_net, p)
    assert s1 == s2
    np.testing.assert_array_equal(d1, d2)


def test_cube_weights_at_zero_raw_output(tiny_net):
    alpha, beta, gamma = cube_weights_eval(tiny_net, np.zeros(3))
    np.testing.assert_allclose(alpha, np.log(2.0) + 1e-3)
    np.testing.assert_allclose(beta, np.log(2.0) + 1e-3)
    assert gamma == pytest.approx(0.5)


def test_cube_weights_positive_and_gamma_monotone(tiny_net):
    rng = np.random.default_rng(1)
    tiny_net.params["cube.w3"][:] = rng.normal(scale=5.0, size=tiny_net.params["cube.w3"].shape)
    tiny_net.set_params(tiny_net.params)
    alpha, beta, gamma = cube_weights_eval(tiny_net, rng.uniform(-0.5, 0.5, size=(1000, 3)))
    assert (alpha > 0).all() and (beta > 0).all()
    assert ((gamma > 0) & (gamma < 1)).all()

    tiny_net.params["cube.w3"][:] = 0.0
    center = np.zeros(3)
    previous = 0.0
    for bias in (-10.0, 0.0, 10.0, 40.0):
        tiny_net.params["cube.b3"][20] = bias
        tiny_net.set_params(tiny_net.params)
        g = cube_weights_eval(tiny_net, center)[2]
        assert g >= previous
        previous = g
    assert previous == pytest.approx(1.0)


@pytest.mark.parametrize("name", ["table.0", "table.2", "vertex.w0", "vertex.w2", "vertex.b3"])
def test_sdf_pipeline_passes_grad_check(tiny_net, name):
    pts = np.random.default_rng(2).uniform(-0.5, 0.5, size=(16, 3))
    rng = np.random.default_rng(3)
    tiny_net.params["table.0"] = rng.normal(scale=0.1, size=tiny_net.params["table.0"].shape)
    tiny_net.params["vertex.w3"] = rng.normal(scale=0.5, size=tiny_net.params["vertex.w3"].shape)
    tiny_net.set_params(tiny_net.params)
    weights = rng.normal(size=(16, 3))

    def loss(tape, x):
        nodes = tiny_net.bind(tape, trainable=False)
        nodes[name] = x
        s, delta = tiny_net.vertex_on_tape(tape, nodes, pts)
        return tape.add(tape.mean(tape.square(s)), tape.dot(delta, weights))

    size = tiny_net.params[name].size
    assert grad_check(loss, tiny_net.params[name], h=1e-3, coords=range(0, size, max(1, size // 40))) < 1e-3


def test_texture_output_bounded_and_deterministic():
    tex = TextureField.create(TextureSettings(hidden=16, hash_grid=TINY.hash_grid), seed=0)
    rng = np.random.default_rng(4)
    p = rng.uniform(-0.5, 0.5, size=(1000, 3))
    n, v = _unit(rng.normal(size=(1000, 3))), _unit(rng.normal(size=(1000, 3)))
    rgb = texture_eval(tex, p, n, v)
    assert rgb.shape == (1000, 3)
    assert ((rgb >= 0) & (rgb <= 1)).all()
    np.testing.assert_array_equal(rgb, texture_eval(tex, p, n, v))


def test_texture_rejects_non_unit_normal():
    tex = TextureField.create(TextureSettings(hidden=16, hash_grid=TINY.hash_grid), seed=0)
    with pytest.raises(ContractViolation, match="normal"):
        texture_eval(tex, np.zeros(3), np.array([0.0, 0.0, 1.001]), np.array([0.0, 0.0, 1.0]))


def test_warmup_zero_iterations_leaves_network_unchanged(tiny_net):
    before = {k: v.copy() for k, v in tiny_net.params.items()}
    result = init_ellipsoid(tiny_net, iters=0)
    assert result.losses == []
    for k, v in before.items():
        np.testing.assert_array_equal(tiny_net.params[k], v)


def test_warmup_rejects_axes_outside_domain(tiny_net):
    with pytest.raises(ConfigError):
        init_ellipsoid(tiny_net, semi_axes=(0.6, 0.2, 0.2), iters=1)


def test_checkpoint_round_trip(tmp_path, tiny_net):
    tiny_net.params["cube.w3"][:] = 0.25
    tiny_net.set_params(tiny_net.params)
    path = save_checkpoint(tiny_net, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path)
    assert isinstance(loaded, SdfNetwork)
    assert loaded.resolution == 16 and list(loaded.params) == list(tiny_net.params)
    pts = np.random.default_rng(5).uniform(-0.5, 0.5, size=(50, 3))
    np.testing.assert_array_equal(evaluate_sdf(loaded, pts)[0], evaluate_sdf(tiny_net, pts)[0])


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(InputError):
        load_checkpoint(bad)


# ---- Long runs --------------------------------------------------------------

@pytest.mark.slow
def test_warmup_reaches_sphere_within_tolerance():
    net = SdfNetwork.create(seed=0)
    result = init_ellipsoid(net, (0.35, 0.35, 0.35), iters=500, seed=0)
    assert result.converged and result.final_loss < 0.01
    assert abs(sdf_eval(net, np.zeros(3))[0] + 0.35) < 0.02
    assert is_trending_down(result.losses, window=50, tolerance=0.05)


@pytest.mark.slow
def test_warmup_ellipsoid_sign_agreement():
    net = SdfNetwork.create(seed=1)
    axes = (0.4, 0.3, 0.2)
    init_ellipsoid(net, axes, iters=500, seed=1)
    pts = probe_points(4096, net.bbox, seed=0)
    inside = ((pts / np.asarray(axes)) ** 2).sum(axis=1) < 1.0
    s, _ = evaluate_sdf(net, pts)
    assert np.mean((s < 0) == inside) >= 0.99
    assert np.mean(np.sign(Ellipsoid(axes).sdf(pts)) == np.sign(s)) >= 0.99


def test_grid_from_network_carries_weights_for_surface_cubes_only(tiny_net):
    R = 8
    grid = grid_from_network(tiny_net, R)
    cell = 1.0 / R
    s, delta = evaluate_sdf(tiny_net, grid_points(R), cell=cell)
    np.testing.assert_allclose(grid.offsets, delta)
    np.testing.assert_allclose(grid.sdf, s, atol=1e-8)
    cubes = np.sort(surface_cubes(s, R))
    np.testing.assert_array_equal(np.sort(grid.cube_ids), cubes)
    alpha, beta, gamma = evaluate_cube_weights(tiny_net, cube_centers(cubes, R))
    a, b, g = grid.weights_for(cubes)
    np.testing.assert_allclose(a, alpha)
    np.testing.assert_allclose(b, beta)
    np.testing.assert_allclose(g, gamma)
