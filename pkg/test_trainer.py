"""
Fitting loops: schedules, direct-SDF stages, surface mode through the extraction, texture fitting
"""

import numpy as np
import pandas as pd
import pytest

from isofit.ablation import run_ablation
from isofit.config import AdamSettings, HashGridSettings, NetworkSettings, StageSettings, TextureSettings
from isofit.errors import ConfigError, ContractViolation
from isofit.flexicubes import FlexiGrid, extract_mesh
from isofit.mesh import TriMesh
from isofit.networks import SdfNetwork, TextureField, init_ellipsoid
from isofit.shapes import AxisGradientColor, Box, ConstantColor, Sphere, Torus
from isofit.trainer import (FitSchedule, SurfaceModeTrainer, fit_geometry, fit_surface_mode, fit_texture,
                            surface_loss, surface_vertex_loss, texture_rmse)
from isofit.transform import window_means

TINY_GRID = HashGridSettings(levels=3, n_min=4, growth=2.0, table_size=2 ** 8, features=2)
TINY = NetworkSettings(hash_grid=TINY_GRID, hidden=8)


@pytest.fixture(scope="module")
def sphere_mesh():
    return extract_mesh(FlexiGrid.from_function(Sphere(0.3).sdf, 16))


@pytest.mark.parametrize("stages, fragment", [
    ([], "at least one"),
    ([StageSettings(32, 10), StageSettings(16, 10)], "non-decreasing"),
    ([StageSettings(512, 10)], "max_resolution"),
    ([StageSettings(16, -1)], "invalid stage"),
])
def test_schedule_validation(stages, fragment):
    with pytest.raises(ConfigError, match=fragment):
        FitSchedule(stages).validate(256)


def test_zero_iterations_keep_warm_start_chamfer():
    net = SdfNetwork.create(TINY, seed=0, resolution=16)
    schedule = FitSchedule([StageSettings(16, 0)])
    result = fit_geometry(net, Sphere(0.3), schedule, seed=0, chamfer_samples=2000)
    assert result.log.empty
    assert list(result.log.columns) == ["iter", "stage", "loss_total", "loss_sdf", "loss_eik", "chamfer"]
    np.testing.assert_equal(result.final_chamfer, result.initial_chamfer)


def test_fit_geometry_is_reproducible():
    def run():
        net = SdfNetwork.create(TINY, seed=2, resolution=8)
        schedule = FitSchedule([StageSettings(8, 4), StageSettings(12, 3)])
        return fit_geometry(net, Sphere(0.3), schedule, seed=5, samples=256, eik_samples=64,
                            chamfer_every=2, chamfer_samples=500)

    a, b = run(), run()
    pd.testing.assert_frame_equal(a.log, b.log)
    assert a.log["iter"].tolist() == list(range(1, 8))
    assert a.log["stage"].tolist() == [1] * 4 + [2] * 3
    for name in a.net.params:
        np.testing.assert_array_equal(a.net.params[name], b.net.params[name])


def test_surface_loss_gradient_matches_finite_differences(sphere_mesh):
    target = Sphere(0.28)
    loss, grad = surface_loss(target, sphere_mesh)
    assert loss == pytest.approx(np.mean(np.abs(target.sdf(sphere_mesh.vertices))))
    h = 1e-6
    for i, k in [(0, 0), (5, 1), (17, 2)]:
        plus, minus = sphere_mesh.vertices.copy(), sphere_mesh.vertices.copy()
        plus[i, k] += h
        minus[i, k] -= h
        fd = (surface_loss(target, TriMesh(plus, sphere_mesh.triangles))[0]
              - surface_loss(target, TriMesh(minus, sphere_mesh.triangles))[0]) / (2 * h)
        assert grad[i, k] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_texture_zero_iterations_is_identity(sphere_mesh):
    tex = TextureField.create(TextureSettings(hidden=8, hash_grid=TINY_GRID), seed=0)
    before = {k: v.copy() for k, v in tex.params.items()}
    result = fit_texture(tex, sphere_mesh, ConstantColor(), iters=0)
    assert result.losses == []
    for k, v in before.items():
        np.testing.assert_array_equal(tex.params[k], v)


def test_texture_fits_constant_gray(sphere_mesh):
    tex = TextureField.create(TextureSettings(hidden=16, hash_grid=TINY_GRID), seed=1)
    initial = texture_rmse(tex, sphere_mesh, ConstantColor((0.5, 0.5, 0.5)))
    result = fit_texture(tex, sphere_mesh, ConstantColor((0.5, 0.5, 0.5)), iters=500, samples=512,
                         adam=AdamSettings(lr_tables=1e-2, lr_mlp=1e-2))
    assert result.rmse < 0.02
    assert result.rmse < initial
    assert result.losses[-1] < result.losses[0]


def test_texture_needs_a_mesh():
    tex = TextureField.create(TextureSettings(hidden=8, hash_grid=TINY_GRID), seed=0)
    with pytest.raises(ContractViolation):
        fit_texture(tex, TriMesh(), ConstantColor(), iters=1)


# ---- Long runs --------------------------------------------------------------

@pytest.mark.slow
def test_torus_coarse_to_fine():
    net = SdfNetwork.create(seed=1)
    init_ellipsoid(net, (0.35, 0.2, 0.35), iters=500, seed=1)
    schedule = FitSchedule([StageSettings(32, 1000, near_fraction=0.15), StageSettings(64, 1000)])
    result = fit_geometry(net, Torus(0.25, 0.1), schedule, seed=1, chamfer_samples=20_000)
    assert result.final_chamfer < 3.0 / 64.0
    assert result.stage_chamfer[1] <= 1.05 * result.stage_chamfer[0]


@pytest.mark.slow
def test_sphere_coarse_stage_loss_drops_tenfold():
    net = SdfNetwork.create(seed=2)
    init_ellipsoid(net, (0.4, 0.25, 0.3), iters=200, seed=2)
    result = fit_geometry(net, Sphere(0.35), FitSchedule([StageSettings(64, 1000)]), seed=2,
                          chamfer_samples=5000)
    means = window_means(result.log["loss_total"], 50)
    assert means.iloc[-1] < 0.1 * means.iloc[0]


@pytest.mark.slow
def test_surface_mode_reduces_vertex_loss():
    net = SdfNetwork.create(seed=3, resolution=64)
    init_ellipsoid(net, (0.4, 0.3, 0.25), iters=500, seed=3)
    target = Sphere(0.3)
    before = surface_vertex_loss(net, target, 64)
    fit_surface_mode(net, target, FitSchedule([StageSettings(64, 1000)]), seed=3, chamfer_samples=5000)
    assert surface_vertex_loss(net, target, 64) <= 0.1 * before


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_surface_mode_first_step_descends(seed):
    net = SdfNetwork.create(TINY, seed=seed, resolution=32)
    init_ellipsoid(net, (0.35, 0.3, 0.25), iters=200, seed=seed)
    target = Sphere(0.3)
    trainer = SurfaceModeTrainer(net, target, 32, adam=AdamSettings(lr_tables=1e-4, lr_mlp=1e-4))
    before = trainer.step(1)["loss_total"]
    assert surface_vertex_loss(net, target, 32) < before


@pytest.mark.slow
def test_encoded_network_beats_direct_grid():
    report = run_ablation()
    assert report.verdict, report.as_frame().to_string()


@pytest.mark.slow
def test_texture_fits_axis_gradient():
    mesh = extract_mesh(FlexiGrid.from_function(Box((0.25, 0.2, 0.15)).sdf, 32))
    tex = TextureField.create(TextureSettings(hidden=64), seed=4)
    result = fit_texture(tex, mesh, AxisGradientColor(), iters=2000, samples=2048, seed=4)
    assert result.rmse < 0.05
