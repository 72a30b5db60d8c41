# isofit/trainer.py
"""
Fitting loops: coarse-to-fine direct-SDF fitting, surface-mode fitting through
the differentiable extraction, and texture fitting on an extracted mesh.

Every per-iteration batch is drawn from batch_rng(seed, stage, iteration), so
runs are reproducible independent of how often the loops are interrupted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .autodiff import Node, Tape, backward
from .config import AdamSettings, StageSettings
from .errors import ConfigError, ContractViolation, NumericalAbort
from .flexicubes import cube_centers, cube_corner_vertices, extract_backward, extract_mesh
from .mesh import TriMesh
from .metrics import chamfer_points, target_surface_points
from .networks import SdfNetwork, TextureField, adam_for, grid_from_network, texture_eval
from .sampling import batch_rng, sample_batch
from .shapes import ColorFn, TargetShape
from .transform import loss_log_frame

logger = logging.getLogger(__name__)

TEXTURE_STAGE = 100


@dataclass(frozen=True)
class FitSchedule:
    stages: Sequence[StageSettings]

    def validate(self, max_resolution: int = 256) -> None:
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        res = [s.resolution for s in self.stages]
        if any(b < a for a, b in zip(res, res[1:])):
            raise ConfigError(f"stage resolutions must be non-decreasing, got {res}")
        for s in self.stages:
            if s.resolution > max_resolution:
                raise ConfigError(f"stage resolution {s.resolution} exceeds max_resolution {max_resolution}")
            if s.resolution < 2 or s.iters < 0:
                raise ConfigError(f"invalid stage {s}")

    @property
    def total_iters(self) -> int:
        return sum(s.iters for s in self.stages)


@dataclass
class FitResult:
    net: SdfNetwork
    log: pd.DataFrame
    stage_chamfer: List[float] = field(default_factory=list)
    initial_chamfer: float = float("nan")

    @property
    def final_chamfer(self) -> float:
        return self.stage_chamfer[-1] if self.stage_chamfer else self.initial_chamfer


class ChamferProbe:
    """Chamfer of the network's extraction against fixed target surface samples."""

    def __init__(self, target: TargetShape, n_samples: int, seed: int, bbox):
        self.n_samples = n_samples
        self.seed = seed
        self.target_points = target_surface_points(target, n_samples, seed, bbox)

    def __call__(self, net: SdfNetwork, resolution: int) -> float:
        mesh = extract_mesh(grid_from_network(net, resolution))
        if mesh.is_empty:
            logger.warning("extraction at R=%d is empty; chamfer undefined", resolution)
            return float("nan")
        pts, _, _ = mesh.sample_surface(self.n_samples, np.random.default_rng([self.seed, 3]))
        return chamfer_points(pts, self.target_points)[0]


def _progress(total: int, enabled: bool, desc: str):
    return tqdm(total=total, disable=not enabled, desc=desc, leave=False)


# ---- Direct SDF fitting -----------------------------------------------------

class GeometryTrainer:
    """One stage of direct supervision: L1 sdf error plus a finite-difference eikonal term."""

    def __init__(self, net: SdfNetwork, target: TargetShape, stage: StageSettings, stage_index: int,
                 seed: int, samples: int = 4096, eik_samples: int = 1024, state=None,
                 adam: AdamSettings = AdamSettings()):
        self.net = net
        self.target = target
        self.stage = stage
        self.stage_index = stage_index
        self.seed = seed
        self.samples = samples
        self.eik_samples = eik_samples
        self.state = adam_for(net.params, adam) if state is None else state

    def loss_on_tape(self, tape: Tape, nodes, pts: np.ndarray, sdf_star: np.ndarray):
        net, cell = self.net, self.net.cell
        s, _ = net.vertex_on_tape(tape, nodes, pts)
        l_sdf = tape.mean(tape.abs(tape.sub(s, tape.const(sdf_star))))
        l_eik = tape.const(0.0)
        q = pts[: self.eik_samples]
        if len(q) and self.stage.w_eik > 0:
            h = 0.5 * cell
            sq = None
            for axis in range(3):
                e = np.zeros(3)
                e[axis] = h
                plus, _ = net.vertex_on_tape(tape, nodes, q + e)
                minus, _ = net.vertex_on_tape(tape, nodes, q - e)
                g = tape.scale(tape.sub(plus, minus), 1.0 / (2.0 * h))
                sq = tape.square(g) if sq is None else tape.add(sq, tape.square(g))
            norm = tape.sqrt(tape.add(sq, tape.const(1e-12)))
            l_eik = tape.mean(tape.square(tape.sub(norm, tape.const(1.0))))
        total = tape.add(tape.scale(l_sdf, self.stage.w_sdf), tape.scale(l_eik, self.stage.w_eik))
        return total, l_sdf, l_eik

    def step(self, iteration: int) -> dict:
        pts, sdf_star = sample_batch(self.target, self.samples, self.stage.near_fraction, self.net.bbox,
                                     batch_rng(self.seed, self.stage_index, iteration))
        tape = Tape()
        nodes = self.net.bind(tape)
        total, l_sdf, l_eik = self.loss_on_tape(tape, nodes, pts, sdf_star)
        value = float(total.value)
        if not np.isfinite(value):
            raise NumericalAbort("non-finite loss", iteration=iteration)
        self.state = self.net.apply_adam(self.net.named_grads(backward(tape, total), nodes), self.state)
        return {"loss_total": value, "loss_sdf": float(l_sdf.value), "loss_eik": float(l_eik.value)}


def fit_geometry(net: SdfNetwork, target: TargetShape, schedule: FitSchedule, seed: int,
                 samples: int = 4096, eik_samples: int = 1024, adam: AdamSettings = AdamSettings(),
                 chamfer_every: int = 250, chamfer_samples: int = 100_000, max_resolution: int = 256,
                 progress: bool = False) -> FitResult:
    schedule.validate(max_resolution)
    probe = ChamferProbe(target, chamfer_samples, seed, net.bbox)
    initial = probe(net, schedule.stages[0].resolution)
    rows, stage_chamfer = [], []
    state, global_iter = None, 0
    for index, stage in enumerate(schedule.stages, start=1):
        net.resolution = stage.resolution
        trainer = GeometryTrainer(net, target, stage, index, seed, samples, eik_samples, state, adam)
        logger.info("stage %d: R=%d, %d iterations", index, stage.resolution, stage.iters)
        with _progress(stage.iters, progress, f"stage {index}") as bar:
            for it in range(stage.iters):
                global_iter += 1
                try:
                    row = trainer.step(it)
                except NumericalAbort as e:
                    raise NumericalAbort(f"stage {index}: non-finite loss", iteration=global_iter) from e
                row.update(iter=global_iter, stage=index, chamfer=None)
                if global_iter % chamfer_every == 0:
                    row["chamfer"] = probe(net, stage.resolution)
                    logger.info("iter %d loss %.6g chamfer %.6g", global_iter, row["loss_total"], row["chamfer"])
                rows.append(row)
                bar.update(1)
        state = trainer.state
        stage_chamfer.append(probe(net, stage.resolution))
        logger.info("stage %d done: chamfer %.6g", index, stage_chamfer[-1])
    return FitResult(net=net, log=loss_log_frame(rows), stage_chamfer=stage_chamfer, initial_chamfer=initial)


# ---- Surface mode -----------------------------------------------------------

def surface_loss(target: TargetShape, mesh: TriMesh):
    """mean |sdf*(v)| over mesh vertices and its gradient w.r.t. the vertices."""
    v = mesh.vertices
    d = target.sdf(v)
    grad = np.sign(d)[:, None] * target.gradient(v) / len(v)
    return float(np.mean(np.abs(d))), grad


class SurfaceModeTrainer:
    """
    Extract, score vertices against the target, pull the vertex gradient back
    through extract_backward, then through the network at the grid nodes that
    the extraction actually touched.
    """

    def __init__(self, net: SdfNetwork, target: TargetShape, resolution: int, state=None,
                 adam: AdamSettings = AdamSettings()):
        self.net = net
        self.target = target
        self.resolution = resolution
        self.state = adam_for(net.params, adam) if state is None else state

    def current(self):
        grid = grid_from_network(self.net, self.resolution)
        return grid, extract_mesh(grid)

    def step(self, iteration: int) -> dict:
        grid, mesh = self.current()
        if mesh.is_empty:
            raise NumericalAbort("extraction became empty", iteration=iteration)
        loss, g_vertices = surface_loss(self.target, mesh)
        if not np.isfinite(loss):
            raise NumericalAbort("non-finite surface loss", iteration=iteration)
        fg = extract_backward(grid, mesh, g_vertices)

        R, net = self.resolution, self.net
        active = np.unique(cube_corner_vertices(grid.cube_ids, R))
        pos = grid.base_positions()[active]
        tape = Tape()
        nodes = net.bind(tape)
        s, delta = net.vertex_on_tape(tape, nodes, pos, cell=grid.cell)
        alpha, beta, gamma = net.cube_on_tape(tape, nodes, cube_centers(grid.cube_ids, R, net.bbox))
        terms: List[Node] = [
            tape.dot(s, fg.sdf[active]), tape.dot(delta, fg.offsets[active]),
            tape.dot(alpha, fg.alpha), tape.dot(beta, fg.beta), tape.dot(gamma, fg.gamma),
        ]
        scalar = terms[0]
        for t in terms[1:]:
            scalar = tape.add(scalar, t)
        self.state = net.apply_adam(net.named_grads(backward(tape, scalar), nodes), self.state)
        return {"loss_total": loss, "loss_sdf": loss, "loss_eik": 0.0, "n_vertices": len(mesh.vertices)}


def fit_surface_mode(net: SdfNetwork, target: TargetShape, schedule: FitSchedule, seed: int,
                     adam: AdamSettings = AdamSettings(), chamfer_every: int = 250,
                     chamfer_samples: int = 100_000, max_resolution: int = 256,
                     progress: bool = False) -> FitResult:
    """Minimize mean |sdf*(v)| over extracted vertices, stage by stage."""
    schedule.validate(max_resolution)
    probe = ChamferProbe(target, chamfer_samples, seed, net.bbox)
    initial = probe(net, schedule.stages[0].resolution)
    rows, stage_chamfer = [], []
    state, global_iter = None, 0
    for index, stage in enumerate(schedule.stages, start=1):
        net.resolution = stage.resolution
        trainer = SurfaceModeTrainer(net, target, stage.resolution, state, adam)
        logger.info("surface stage %d: R=%d, %d iterations", index, stage.resolution, stage.iters)
        with _progress(stage.iters, progress, f"surface {index}") as bar:
            for it in range(stage.iters):
                global_iter += 1
                try:
                    row = trainer.step(global_iter)
                except NumericalAbort:
                    logger.error("surface-mode training aborted at stage %d", index)
                    raise
                row.pop("n_vertices")
                row.update(iter=global_iter, stage=index, chamfer=None)
                if global_iter % chamfer_every == 0:
                    row["chamfer"] = probe(net, stage.resolution)
                rows.append(row)
                bar.update(1)
        state = trainer.state
        stage_chamfer.append(probe(net, stage.resolution))
    return FitResult(net=net, log=loss_log_frame(rows), stage_chamfer=stage_chamfer, initial_chamfer=initial)


def surface_vertex_loss(net: SdfNetwork, target: TargetShape, resolution: int) -> float:
    mesh = extract_mesh(grid_from_network(net, resolution))
    if mesh.is_empty:
        return float("nan")
    return surface_loss(target, mesh)[0]


# ---- Texture ----------------------------------------------------------------

@dataclass
class TextureFitResult:
    tex: TextureField
    losses: List[float]
    rmse: float


def surface_frames(mesh: TriMesh, faces: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Unit normals at barycentric samples (interpolated vertex normals, face normal fallback)."""
    vn = mesh.vertex_normals()[mesh.triangles[faces]]           # (n, 3, 3)
    n = np.einsum("nc,ncd->nd", bary, vn)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    fallback = mesh.face_normals()[faces]
    n = np.where(length > 1e-12, n / np.where(length > 1e-12, length, 1.0), fallback)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def texture_rmse(tex: TextureField, mesh: TriMesh, color: ColorFn, n: int = 4096, seed: int = 0) -> float:
    pts, faces, bary = mesh.sample_surface(n, np.random.default_rng([seed, 11]))
    normals = surface_frames(mesh, faces, bary)
    rgb = texture_eval(tex, pts, normals, normals)
    return float(np.sqrt(np.mean((rgb - color(pts)) ** 2)))


def fit_texture(tex: TextureField, mesh: TriMesh, color: ColorFn, iters: int = 500, seed: int = 0,
                samples: int = 4096, adam: AdamSettings = AdamSettings(),
                progress: bool = False) -> TextureFitResult:
    """Mean squared RGB error on surface samples, view direction = outward normal."""
    if mesh.is_empty:
        raise ContractViolation("cannot fit a texture to an empty mesh")
    losses: List[float] = []
    state = adam_for(tex.params, adam)
    with _progress(iters, progress, "texture") as bar:
        for it in range(iters):
            pts, faces, bary = mesh.sample_surface(samples, batch_rng(seed, TEXTURE_STAGE, it))
            normals = surface_frames(mesh, faces, bary)
            tape = Tape()
            nodes = tex.bind(tape)
            rgb = tex.rgb_on_tape(tape, nodes, pts, normals, normals)
            loss = tape.mean(tape.square(tape.sub(rgb, tape.const(color(pts)))))
            if not np.isfinite(loss.value):
                raise NumericalAbort("non-finite texture loss", iteration=it)
            losses.append(float(loss.value))
            state = tex.apply_adam(tex.named_grads(backward(tape, loss), nodes), state)
            bar.update(1)
    rmse = texture_rmse(tex, mesh, color, seed=seed)
    logger.info("texture fit: rmse %.4g after %d iterations", rmse, iters)
    return TextureFitResult(tex=tex, losses=losses, rmse=rmse)
