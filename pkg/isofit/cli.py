# isofit/cli.py
"""
Command-line surface: one JSON config per run, flags override top-level keys.

Exit codes: 0 success, 2 configuration / input error, 3 numerical abort.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import click
import numpy as np

from .charts import loss_curve, save_chart, trace_curve
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TextureSettings, load_run_config
from .errors import (ConfigError, ContractViolation, InputError, NumericalAbort, OracleFailure,
                     ProvenanceError)
from .flexicubes import extract_mesh
from .inversion import (PSEUDO_SLOTS, assemble_prompt, init_token, optimize_embedding, pca_fit,
                        read_query, read_vocabulary, write_embedding)
from .mesh import TriMesh, mesh_validate
from .meshio import read_obj, write_obj
from .metrics import chamfer, sample_spacing
from .networks import SdfNetwork, TextureField, grid_from_network, init_ellipsoid, probe_error
from .oracles import builtin_oracles, pool
from .raster import Camera, mask_iou, psnr, read_image, render, write_render
from .shapes import shape_from_spec
from .trainer import FitSchedule, fit_geometry, fit_surface_mode, fit_texture
from .transform import metrics_frame, stage_summary, trace_frame, write_csv
from .ui import show_error, show_info, show_success, show_warning

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 2, 3

Artifacts = Dict[str, Path]


# ---- Small helpers ----------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mesh_rows(mesh: TriMesh) -> List[tuple]:
    report = mesh_validate(mesh)
    if report.nonmanifold_edges:
        logger.warning("mesh has %d non-manifold edges", report.nonmanifold_edges)
        show_warning(f"mesh has {report.nonmanifold_edges} non-manifold edges")
    return report.as_rows()


def _pair_name(a: str, b: str) -> str:
    return f"{Path(a).name}:{Path(b).name}"


# ---- Commands ---------------------------------------------------------------

def cmd_fit_shape(cfg: RunConfig, chart: bool = False) -> Artifacts:
    """Warm-up, fit (geometry or surface mode), extraction, metrics, optional texture."""
    s = cfg.settings
    bbox = tuple(s.network.bbox)
    target = shape_from_spec(s.target, bbox)
    schedule = FitSchedule(s.schedule)
    schedule.validate(s.max_resolution)
    out = _out_dir(cfg)

    net = SdfNetwork.create(s.network, seed=cfg.seed, resolution=s.schedule[0].resolution)
    rows: List[tuple] = []
    if s.warmup.enabled and s.warmup.iters > 0:
        warm = init_ellipsoid(net, s.warmup.semi_axes, iters=s.warmup.iters, seed=cfg.seed,
                              adam=s.warmup.adam, samples=s.samples)
        rows.append(("warmup_loss", warm.final_loss))

    fit = fit_surface_mode if s.mode == "surface" else fit_geometry
    extra = {} if s.mode == "surface" else {"samples": s.samples, "eik_samples": s.eik_samples}
    result = fit(net, target, schedule, cfg.seed, adam=s.adam, chamfer_every=s.chamfer_every,
                 chamfer_samples=s.chamfer_samples, max_resolution=s.max_resolution,
                 progress=s.progress, **extra)

    resolution = s.extract_resolution or s.schedule[-1].resolution
    mesh = extract_mesh(grid_from_network(net, resolution))
    if mesh.is_empty:
        raise NumericalAbort("final extraction is empty", iteration=schedule.total_iters)
    cell = (bbox[1] - bbox[0]) / resolution
    cd, hd = chamfer(mesh, target, n_samples=s.chamfer_samples, seed=cfg.seed, bbox=bbox)
    rows += [("chamfer_l1", cd), ("hausdorff95", hd), ("cell", cell), ("chamfer_cells", cd / cell),
             ("initial_chamfer", result.initial_chamfer)]
    rows += [(f"stage_{i}_chamfer", c) for i, c in enumerate(result.stage_chamfer, start=1)]
    rows.append(("probe_error", probe_error(net, target)))
    rows += _mesh_rows(mesh)

    artifacts = {
        "mesh": write_obj(mesh, out / "mesh.obj"),
        "checkpoint": save_checkpoint(net, out / "model.ckpt"),
        "loss": write_csv(result.log, out / "loss.csv"),
    }
    if target.color is not None:
        tex_settings = s.texture or TextureSettings()
        tex = TextureField.create(tex_settings, bbox, seed=cfg.seed)
        tex_fit = fit_texture(tex, mesh, target.color, iters=tex_settings.iters, seed=cfg.seed,
                              samples=tex_settings.samples, adam=tex_settings.adam, progress=s.progress)
        rows.append(("texture_rmse", tex_fit.rmse))
        artifacts["texture"] = save_checkpoint(tex, out / "texture.ckpt")
    artifacts["metrics"] = write_csv(metrics_frame(rows), out / "metrics.csv")
    if chart:
        artifacts["chart"] = save_chart(loss_curve(result.log), out / "loss.html")

    for _, st in stage_summary(result.log).iterrows():
        logger.info("stage %d: loss %.4g -> %.4g", st["stage"], st["first_loss"], st["last_loss"])
    show_info(f"chamfer-L1 {cd:.5g} ({cd / cell:.2f} cells), {len(mesh.triangles)} triangles")
    return artifacts


def hidden_target(cfg: RunConfig, base, e0, subspace) -> np.ndarray:
    """Pooled embedding of a prompt whose optimized slots sit at e0 + W_p q for a seeded q."""
    s = cfg.settings
    rng = np.random.default_rng([cfg.seed, 29])
    moved = {name: e0[name] + subspace.lift(rng.normal(size=subspace.dim) * s.oracle.hidden_scale)
             for name in PSEUDO_SLOTS if name in s.optimize_slots}
    return pool(base.with_slots(moved), s.oracle.pool)


def cmd_invert(cfg: RunConfig, chart: bool = False) -> Artifacts:
    s = cfg.settings
    vocab = read_vocabulary(cfg.path(s.vocabulary))
    subspace = pca_fit(vocab.embeddings, s.subspace_dim)
    e0 = {
        "style": init_token(read_query(cfg.path(s.queries["style"]), vocab.dim), vocab, "style",
                            s.temperature, s.top_k, cfg.seed),
        "object": init_token(read_query(cfg.path(s.queries["object"]), vocab.dim), vocab, "object",
                             s.temperature, s.top_k, cfg.seed),
        "etc": init_token(None, vocab, "etc", seed=cfg.seed),
    }
    base = assemble_prompt(e0["style"], e0["object"], e0["etc"], vocab)
    if s.oracle.target == "hidden":
        target = hidden_target(cfg, base, e0, subspace)
    else:
        width = vocab.dim * (len(PSEUDO_SLOTS) if s.oracle.pool == "concat" else 1)
        target = read_query(cfg.path(s.oracle.target), width)
    oracle = builtin_oracles(s.oracle.name, target, s.oracle.pool, s.oracle.noise_std)

    result = optimize_embedding(oracle, e0, subspace, base, generations=s.generations, seed=cfg.seed,
                                sigma0=s.sigma0, noise_key=s.noise_key, optimize_slots=s.optimize_slots,
                                sequential=s.sequential, workers=s.workers)
    out = _out_dir(cfg)
    trace = trace_frame(result.trace_best, result.trace_sigma)
    artifacts = {
        "embedding": write_embedding(result.slots, out / "embedding.txt"),
        "trace": write_csv(trace, out / "trace.csv"),
    }
    if chart:
        artifacts["chart"] = save_chart(trace_curve(trace), out / "trace.html")
    show_info(f"loss {result.initial_loss:.5g} -> {result.best_loss:.5g} in {len(trace)} generations")
    return artifacts


def cmd_render(cfg: RunConfig, chart: bool = False) -> Artifacts:
    s = cfg.settings
    mesh = read_obj(cfg.path(s.mesh))
    tex = None
    if s.texture is not None:
        tex = load_checkpoint(cfg.path(s.texture))
        if not isinstance(tex, TextureField):
            raise InputError(f"{s.texture}: not a texture checkpoint")
    out = _out_dir(cfg)
    artifacts: Artifacts = {}
    for i, cam_settings in enumerate(s.cameras):
        target = render(mesh, Camera.from_settings(cam_settings), tex)
        for path in write_render(target, out, f"view{i:02d}"):
            artifacts[path.stem] = path
    show_info(f"rendered {len(s.cameras)} view(s), {len(artifacts)} files")
    return artifacts


def cmd_eval(cfg: RunConfig, chart: bool = False) -> Artifacts:
    s = cfg.settings
    rows: List[tuple] = []
    if s.mesh is not None:
        mesh = read_obj(cfg.path(s.mesh))
        if s.validate:
            rows += _mesh_rows(mesh)
        reference = None
        if s.target is not None:
            reference = shape_from_spec(s.target, tuple(s.bbox))
        elif s.reference_mesh is not None:
            reference = read_obj(cfg.path(s.reference_mesh))
        if reference is not None:
            cd, hd = chamfer(mesh, reference, n_samples=s.chamfer_samples, seed=cfg.seed, bbox=tuple(s.bbox))
            rows += [("chamfer_l1", cd), ("hausdorff95", hd),
                     ("sample_spacing", sample_spacing(mesh, s.chamfer_samples))]
    elif s.target is not None or s.reference_mesh is not None:
        raise ConfigError("chamfer needs a mesh")

    for a, b in s.image_pairs:
        img_a, img_b = read_image(cfg.path(a)), read_image(cfg.path(b))
        name = _pair_name(a, b)
        rows.append((f"psnr:{name}", psnr(img_a, img_b)))
        if img_a.ndim == 2 and img_b.ndim == 2:
            rows.append((f"mask_iou:{name}", mask_iou(img_a > 0.5, img_b > 0.5)))
    if not rows:
        raise ConfigError("nothing to evaluate: give a mesh and/or image_pairs")
    path = write_csv(metrics_frame(rows), _out_dir(cfg) / "metrics.csv")
    show_info(f"{len(rows)} metrics")
    return {"metrics": path}


def cmd_extract_mesh(cfg: RunConfig, chart: bool = False) -> Artifacts:
    s = cfg.settings
    net = load_checkpoint(cfg.path(s.checkpoint))
    if not isinstance(net, SdfNetwork):
        raise InputError(f"{s.checkpoint}: not an SDF network checkpoint")
    mesh = extract_mesh(grid_from_network(net, s.resolution))
    _mesh_rows(mesh)
    show_info(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles at R={s.resolution}")
    return {"mesh": write_obj(mesh, _out_dir(cfg) / "mesh.obj")}


COMMANDS: Dict[str, Callable[..., Artifacts]] = {
    "fit-shape": cmd_fit_shape,
    "invert": cmd_invert,
    "render": cmd_render,
    "eval": cmd_eval,
    "extract-mesh": cmd_extract_mesh,
}


def run_command(command: str, config: str, chart: bool = False, **overrides) -> int:
    """Load, run and report; returns the exit code."""
    try:
        cfg = load_run_config(config, command, **overrides)
        artifacts = COMMANDS[command](cfg, chart=chart)
    except (NumericalAbort, OracleFailure) as e:
        logger.error("%s aborted: %s", command, e)
        show_error(str(e))
        return EXIT_ABORT
    except (ConfigError, InputError, ContractViolation, ProvenanceError) as e:
        show_error(str(e))
        return EXIT_INPUT
    for name, path in artifacts.items():
        logger.info("%s: %s", name, path)
    show_success(f"{command} wrote {len(artifacts)} artifacts to {cfg.out}")
    return EXIT_OK


# ============================================================================
# CLICK SURFACE
# ============================================================================

def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _run_options(with_iters: bool):
    def decorate(f):
        f = click.option("--chart", is_flag=True, help="Also write an HTML chart.")(f)
        if with_iters:
            f = click.option("--iters", type=int, default=None, help="Iterations per stage / generations.")(f)
        f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(f)
        f = click.option("--seed", type=int, default=None, help="Override the config seed.")(f)
        return click.argument("config", type=click.Path(dir_okay=False))(f)
    return decorate


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging.")
def cli(verbose: bool) -> None:
    """Differentiable isosurface fitting and prompt-embedding inversion."""
    _configure_logging(verbose)


def _register(command: str, with_iters: bool, help_text: str) -> None:
    @cli.command(name=command, help=help_text)
    @_run_options(with_iters)
    @click.pass_context
    def _cmd(ctx, config: str, seed: Optional[int], out: Optional[str], chart: bool, iters: Optional[int] = None):
        overrides = {"seed": seed, "out": out}
        if with_iters:
            overrides["iters"] = iters
        ctx.exit(run_command(command, config, chart=chart, **overrides))


_register("fit-shape", True, "Fit an SDF network to a target shape and extract its mesh.")
_register("invert", True, "Search pseudo-token embeddings with CMA-ES in a PCA subspace.")
_register("render", False, "Rasterize a mesh from the configured cameras.")
_register("eval", False, "Chamfer, mesh checks and image metrics.")
_register("extract-mesh", False, "Extract a mesh from a network checkpoint without training.")


def main() -> None:
    cli(prog_name="isofit")
