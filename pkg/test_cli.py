"""
Command-line runs end to end: artifacts, determinism and exit codes
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from isofit import cli as cli_module
from isofit.checkpoint import save_checkpoint
from isofit.cli import EXIT_ABORT, EXIT_INPUT, EXIT_OK, cli, run_command
from isofit.config import HashGridSettings, NetworkSettings
from isofit.errors import NumericalAbort
from isofit.networks import SdfNetwork, init_ellipsoid

CONFIGS = Path(__file__).parent / "configs"
SPHERE_OBJ = CONFIGS / "data" / "sphere.obj"


def _write(path, raw):
    path.write_text(json.dumps(raw))
    return path


def _invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def _metrics(path):
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    return dict(zip(df["metric"], df["value"]))


def test_help_lists_commands():
    result = _invoke("--help")
    assert result.exit_code == 0
    for name in ("fit-shape", "invert", "render", "eval", "extract-mesh"):
        assert name in result.output


def test_negative_resolution_exits_2(tmp_path):
    cfg = _write(tmp_path / "bad.json", {"seed": 0, "target": {"type": "sphere", "radius": 0.3},
                                         "schedule": [{"resolution": -8, "iters": 1}]})
    assert _invoke("fit-shape", cfg, "--out", tmp_path / "out").exit_code == EXIT_INPUT


def test_missing_config_exits_2(tmp_path):
    assert run_command("eval", str(tmp_path / "none.json")) == EXIT_INPUT


def test_missing_mesh_exits_2(tmp_path):
    cfg = _write(tmp_path / "render.json", {"seed": 0, "mesh": "nope.obj", "cameras": [{}]})
    assert run_command("render", str(cfg), out=str(tmp_path / "out")) == EXIT_INPUT


def test_iters_is_not_a_render_flag():
    result = _invoke("render", CONFIGS / "render_sphere.json", "--iters", 3)
    assert result.exit_code == 2


def test_numerical_abort_exits_3(tmp_path, monkeypatch):
    def boom(cfg, chart=False):
        raise NumericalAbort("non-finite loss", iteration=12)

    monkeypatch.setitem(cli_module.COMMANDS, "eval", boom)
    assert run_command("eval", str(CONFIGS / "eval_sphere.json"), out=str(tmp_path)) == EXIT_ABORT


# ---- invert -----------------------------------------------------------------

def test_invert_is_deterministic(tmp_path):
    for name in ("a", "b"):
        result = _invoke("invert", CONFIGS / "invert_quadratic.json", "--out", tmp_path / name, "--iters", 20)
        assert result.exit_code == EXIT_OK, result.output
    for artifact in ("embedding.txt", "trace.csv"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()
    lines = (tmp_path / "a" / "embedding.txt").read_text().splitlines()
    assert len(lines) == 3 and all(len(ln.split()) == 64 for ln in lines)


def test_invert_budget_one_writes_one_trace_row(tmp_path):
    assert run_command("invert", str(CONFIGS / "invert_quadratic.json"), out=str(tmp_path), iters=1) == EXIT_OK
    trace = pd.read_csv(tmp_path / "trace.csv")
    assert list(trace.columns) == ["generation", "best_loss", "sigma"]
    assert trace["generation"].tolist() == [1]


def test_invert_full_budget_trace(tmp_path):
    assert run_command("invert", str(CONFIGS / "invert_quadratic.json"), out=str(tmp_path)) == EXIT_OK
    trace = pd.read_csv(tmp_path / "trace.csv")
    assert len(trace) == 200
    assert (trace["best_loss"].diff().dropna() <= 0).all()


def test_invert_chart(tmp_path):
    assert run_command("invert", str(CONFIGS / "invert_quadratic.json"), chart=True, out=str(tmp_path),
                       iters=5) == EXIT_OK
    assert (tmp_path / "trace.html").read_text().lstrip().lower().startswith("<!doctype html")


# ---- render / eval ----------------------------------------------------------

def test_render_bundled_camera(tmp_path):
    assert run_command("render", str(CONFIGS / "render_sphere.json"), out=str(tmp_path)) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "view00_depth.pgm", "view00_mask.pgm", "view00_normal.mtfn"]


def test_render_two_cameras(tmp_path):
    cfg = _write(tmp_path / "render.json", {
        "seed": 0, "mesh": str(SPHERE_OBJ),
        "cameras": [{"position": [0, 0, 2], "half_extent": 0.5, "width": 32, "height": 32},
                    {"mode": "pinhole", "position": [2, 0, 0], "width": 40, "height": 30}],
    })
    out = tmp_path / "out"
    assert run_command("render", str(cfg), out=str(out)) == EXIT_OK
    assert len(list(out.iterdir())) == 6


def test_eval_identical_images_and_mesh_checks(tmp_path):
    images = tmp_path / "images"
    assert run_command("render", str(CONFIGS / "render_sphere.json"), out=str(images)) == EXIT_OK
    mask = str(images / "view00_mask.pgm")
    cfg = _write(tmp_path / "eval.json", {"seed": 0, "mesh": str(SPHERE_OBJ), "image_pairs": [[mask, mask]]})
    assert run_command("eval", str(cfg), out=str(tmp_path / "out")) == EXIT_OK
    rows = _metrics(tmp_path / "out" / "metrics.csv")
    assert float(rows["psnr:view00_mask.pgm:view00_mask.pgm"]) == 99.0
    assert float(rows["mask_iou:view00_mask.pgm:view00_mask.pgm"]) == 1.0
    assert rows["watertight"] == "true"
    assert rows["euler_characteristic"] == "2"


def test_eval_bundled_reference_mesh(tmp_path):
    assert run_command("eval", str(CONFIGS / "eval_sphere.json"), out=str(tmp_path)) == EXIT_OK
    rows = _metrics(tmp_path / "metrics.csv")
    assert float(rows["chamfer_l1"]) < 2 * float(rows["sample_spacing"])


def test_eval_target_uses_configured_box(tmp_path):
    # radius 0.8 only fits inside a [-1, 1] box
    cfg = _write(tmp_path / "eval.json", {"seed": 0, "mesh": str(SPHERE_OBJ), "chamfer_samples": 5000,
                                          "target": {"type": "sphere", "radius": 0.8}, "bbox": [-1.0, 1.0]})
    assert run_command("eval", str(cfg), out=str(tmp_path / "out")) == EXIT_OK
    rows = _metrics(tmp_path / "out" / "metrics.csv")
    # both directions sit about 0.45 apart
    assert 0.88 < float(rows["chamfer_l1"]) < 0.93
    assert 0.44 < float(rows["hausdorff95"]) < 0.48

    narrow = _write(tmp_path / "narrow.json", {"seed": 0, "mesh": str(SPHERE_OBJ),
                                              "target": {"type": "sphere", "radius": 0.8}})
    assert run_command("eval", str(narrow), out=str(tmp_path / "out2")) == EXIT_INPUT


def test_eval_with_nothing_to_do_exits_2(tmp_path):
    cfg = _write(tmp_path / "eval.json", {"seed": 0})
    assert run_command("eval", str(cfg), out=str(tmp_path / "out")) == EXIT_INPUT


# ---- extract-mesh / fit-shape -----------------------------------------------

def test_extract_mesh_from_checkpoint(tmp_path):
    net = SdfNetwork.create(NetworkSettings(hash_grid=HashGridSettings(levels=3, n_min=4, growth=2.0,
                                                                       table_size=2 ** 8), hidden=8),
                            seed=0, resolution=16)
    init_ellipsoid(net, iters=30, samples=512)
    save_checkpoint(net, tmp_path / "model.ckpt")
    cfg = _write(tmp_path / "extract.json", {"seed": 0, "checkpoint": "model.ckpt", "resolution": 16})
    assert run_command("extract-mesh", str(cfg), out=str(tmp_path / "out")) == EXIT_OK
    assert (tmp_path / "out" / "mesh.obj").exists()


def test_extract_mesh_missing_checkpoint_exits_2(tmp_path):
    cfg = _write(tmp_path / "extract.json", {"seed": 0, "checkpoint": "missing.ckpt"})
    assert run_command("extract-mesh", str(cfg), out=str(tmp_path / "out")) == EXIT_INPUT


SMALL_FIT = {
    "seed": 4,
    "target": {"type": "sphere", "radius": 0.3},
    "warmup": {"iters": 200},
    "schedule": [{"resolution": 16, "iters": 30}],
    "samples": 1024,
    "eik_samples": 256,
    "chamfer_every": 10,
    "chamfer_samples": 2000,
}


@pytest.mark.slow
def test_fit_shape_is_deterministic(tmp_path):
    cfg = _write(tmp_path / "fit.json", SMALL_FIT)
    for name in ("a", "b"):
        assert run_command("fit-shape", str(cfg), chart=True, out=str(tmp_path / name)) == EXIT_OK
    for artifact in ("mesh.obj", "loss.csv", "metrics.csv", "model.ckpt"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()
    log = pd.read_csv(tmp_path / "a" / "loss.csv")
    assert list(log.columns) == ["iter", "stage", "loss_total", "loss_sdf", "loss_eik", "chamfer"]
    assert log["chamfer"].notna().sum() == 3
    assert (tmp_path / "a" / "loss.html").exists()


@pytest.mark.slow
def test_fit_shape_with_texture(tmp_path):
    raw = {**SMALL_FIT, "target": {"type": "box", "half_extents": [0.25, 0.2, 0.15],
                                   "color": {"type": "constant", "value": [0.2, 0.6, 0.4]}},
           "texture": {"iters": 50, "hidden": 16, "samples": 512}}
    cfg = _write(tmp_path / "fit.json", raw)
    assert run_command("fit-shape", str(cfg), out=str(tmp_path / "out")) == EXIT_OK
    rows = _metrics(tmp_path / "out" / "metrics.csv")
    assert np.isfinite(float(rows["texture_rmse"]))
    assert (tmp_path / "out" / "texture.ckpt").exists()
