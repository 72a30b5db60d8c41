"""
Software rasterizer: coverage, z-buffer, normals, image metrics and image files
"""

import warnings

import numpy as np
import pytest
from PIL import Image

from isofit.config import HashGridSettings, TextureSettings
from isofit.errors import ContractViolation, InputError
from isofit.flexicubes import FlexiGrid, extract_mesh
from isofit.mesh import TriMesh
from isofit.networks import TextureField
from isofit.raster import (Camera, depth_to_gray, mask_iou, psnr, read_image, read_normal_map, render,
                           write_normal_map, write_pgm, write_ppm, write_render)

FRONT = dict(position=(0.0, 0.0, 2.0), look_at=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), half_extent=1.0)


def _square(x0, x1, y0, y1, z=0.0):
    return TriMesh([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]], [[0, 1, 2], [0, 2, 3]])


@pytest.fixture(scope="module")
def unit_sphere():
    return extract_mesh(FlexiGrid.from_function(lambda p: np.linalg.norm(p, axis=1) - 1.0, 64, (-1.2, 1.2)))


def test_empty_mesh_renders_nothing():
    target = render(TriMesh(), Camera(width=8, height=6))
    assert target.mask.shape == (6, 8) and not target.mask.any()
    assert np.isinf(target.depth).all() and not target.normal.any()
    assert target.coverage == 0.0


def test_half_frame_square():
    target = render(_square(-1.0, 0.0, -1.0, 1.0), Camera(width=64, height=64, **FRONT))
    assert target.coverage == 0.5
    assert target.mask[:, :32].all() and not target.mask[:, 32:].any()
    np.testing.assert_allclose(target.depth[target.mask], 2.0)
    np.testing.assert_allclose(target.normal[target.mask], [[0.0, 0.0, 1.0]] * 2048, atol=1e-12)


def test_image_rows_run_top_to_bottom():
    target = render(_square(-1.0, 1.0, 0.0, 1.0), Camera(width=16, height=16, **FRONT))
    assert target.mask[:8].all() and not target.mask[8:].any()


def test_nearest_surface_wins():
    mesh = _square(-1.0, 1.0, -1.0, 1.0, z=0.0)
    near = _square(-0.5, 0.5, -0.5, 0.5, z=0.5)
    both = TriMesh(np.concatenate([mesh.vertices, near.vertices]),
                   np.concatenate([mesh.triangles, near.triangles + 4]))
    target = render(both, Camera(width=32, height=32, **FRONT))
    assert target.depth[16, 16] == pytest.approx(1.5)
    assert target.depth[1, 1] == pytest.approx(2.0)


def test_sphere_coverage_matches_disc_area(unit_sphere):
    target = render(unit_sphere, Camera(width=64, height=64, **FRONT))
    assert abs(target.coverage - np.pi / 4.0) < 0.02 * np.pi / 4.0


def test_coverage_is_resolution_consistent(unit_sphere):
    small = render(unit_sphere, Camera(width=64, height=64, **FRONT)).coverage
    large = render(unit_sphere, Camera(width=128, height=128, **FRONT)).coverage
    assert abs(large - small) / small < 0.01


def test_sphere_normals_match_analytic(unit_sphere):
    H = W = 64
    target = render(unit_sphere, Camera(width=W, height=H, **FRONT))
    rows, cols = np.nonzero(target.mask)
    x = (cols + 0.5) / W * 2.0 - 1.0
    y = 1.0 - (rows + 0.5) / H * 2.0
    z = np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
    expected = np.stack([x, y, z], axis=1)
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    cos = np.clip((target.normal[rows, cols] * expected).sum(axis=1), -1.0, 1.0)
    assert np.mean(np.degrees(np.arccos(cos)) < 5.0) >= 0.95


def test_pinhole_sphere(unit_sphere):
    camera = Camera(mode="pinhole", position=(0.0, 0.0, 3.0), fov_deg=40.0, width=64, height=64)
    target = render(unit_sphere, camera)
    ratio = np.tan(np.arcsin(1.0 / 3.0)) / np.tan(np.radians(20.0))
    assert abs(target.coverage - np.pi * ratio ** 2 / 4.0) < 0.03
    assert target.depth[32, 32] == pytest.approx(2.0, abs=0.02)


def test_pinhole_skips_triangles_behind_camera():
    camera = Camera(mode="pinhole", position=(0.0, 0.0, 0.0), look_at=(0.0, 0.0, -1.0), width=16, height=16)
    behind = _square(-1.0, 1.0, -1.0, 1.0, z=1.0)
    assert not render(behind, camera).mask.any()


def test_textured_render_fills_rgb_on_covered_pixels():
    tex = TextureField.create(TextureSettings(hidden=8, hash_grid=HashGridSettings(
        levels=2, n_min=4, growth=2.0, table_size=2 ** 8, features=2)), seed=0)
    target = render(_square(-0.5, 0.0, -0.5, 0.5), Camera(width=16, height=16, **FRONT), tex)
    assert target.rgb.shape == (16, 16, 3)
    assert not target.rgb[~target.mask].any()
    assert ((target.rgb[target.mask] > 0) & (target.rgb[target.mask] < 1)).all()


@pytest.mark.parametrize("kwargs", [
    {"mode": "fisheye"},
    {"width": 0},
    {"position": (0.0, 0.0, 0.0)},
    {"up": (0.0, 0.0, 1.0)},
])
def test_camera_validation(kwargs):
    with pytest.raises(ContractViolation):
        Camera(**{**FRONT, **kwargs})


# ---- metrics ----------------------------------------------------------------

def test_psnr_known_values():
    a = np.zeros((8, 8))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-3)
    assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-3)
    assert psnr(a, a) == 99.0


def test_psnr_symmetric_and_shape_checked():
    rng = np.random.default_rng(0)
    a, b = rng.random((4, 5, 3)), rng.random((4, 5, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ContractViolation):
        psnr(a, b[:, :4])


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    assert mask_iou(a, a) == 1.0
    b = a.copy()
    a[:, :2], b[:, 1:3] = True, True
    assert mask_iou(a, b) == pytest.approx(1.0 / 3.0)


def test_depth_to_gray():
    gray = depth_to_gray(np.array([[1.0, 2.0], [np.inf, 1.5]]))
    assert gray.tolist() == [[255, 1], [0, 128]]
    assert depth_to_gray(np.full((2, 2), 3.0)).tolist() == [[255, 255], [255, 255]]


# ---- files ------------------------------------------------------------------

def test_normal_map_round_trip(tmp_path):
    normal = np.random.default_rng(1).normal(size=(3, 5, 3))
    path = write_normal_map(normal, tmp_path / "n.mtfn")
    assert path.stat().st_size == 16 + 8 * 45
    np.testing.assert_array_equal(read_normal_map(path), normal)


def test_normal_map_rejects_foreign_file(tmp_path):
    bad = tmp_path / "n.mtfn"
    bad.write_bytes(b"P5\n1 1\n255\n\x00" + bytes(20))
    with pytest.raises(InputError):
        read_normal_map(bad)


def test_write_render_files(tmp_path):
    target = render(_square(-1.0, 0.0, -1.0, 1.0), Camera(width=8, height=4, **FRONT))
    paths = write_render(target, tmp_path, "view00")
    assert [p.name for p in paths] == ["view00_mask.pgm", "view00_depth.pgm", "view00_normal.mtfn"]
    mask = read_image(paths[0])
    assert mask.shape == (4, 8)
    np.testing.assert_array_equal(mask, target.mask.astype(np.float64))
    assert paths[0].read_bytes().startswith(b"P5")


def test_read_image_errors(tmp_path):
    with pytest.raises(InputError, match="not found"):
        read_image(tmp_path / "none.pgm")
    junk = tmp_path / "junk.pgm"
    junk.write_bytes(b"not an image")
    with pytest.raises(InputError):
        read_image(junk)


def test_image_writers_pick_mode_from_array_shape(tmp_path):
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4).T   # non-contiguous view
    rgb = np.random.default_rng(0).random((4, 3, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("error", DeprecationWarning)
        pgm = write_pgm(gray, tmp_path / "a.pgm")
        ppm = write_ppm(rgb, tmp_path / "a.ppm")
    assert pgm.read_bytes()[:2] == b"P5" and ppm.read_bytes()[:2] == b"P6"
    with Image.open(pgm) as im:
        assert im.mode == "L" and im.size == (3, 4)
    with Image.open(ppm) as im:
        assert im.mode == "RGB" and im.size == (3, 4)
    np.testing.assert_allclose(read_image(pgm), gray / 255.0)
    np.testing.assert_allclose(read_image(ppm), np.round(rgb * 255.0) / 255.0)
