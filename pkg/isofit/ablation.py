# isofit/ablation.py
"""
Encoded network vs direct-parameter grid.

Both start from the same ellipsoid warm start and are trained in surface mode
with the same Adam settings; each run records the first iteration at which
the chamfer distance to the target drops below `threshold_cells` cells.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .autodiff import AdamState, adam_step
from .config import AdamSettings, NetworkSettings
from .errors import NumericalAbort
from .flexicubes import FlexiGrid, cube_centers, extract_backward, extract_mesh
from .metrics import chamfer_points, target_surface_points
from .networks import SdfNetwork, evaluate_cube_weights, grid_from_network, init_ellipsoid
from .shapes import Sphere, TargetShape
from .trainer import SurfaceModeTrainer, surface_loss

logger = logging.getLogger(__name__)


class DirectGridTrainer:
    """Surface-mode training of raw grid arrays; projected back into the valid range after each step."""

    NAMES = ("sdf", "offsets", "alpha", "beta", "gamma")

    def __init__(self, grid: FlexiGrid, target: TargetShape, adam: AdamSettings = AdamSettings()):
        self.grid = grid
        self.target = target
        # the grid arrays play the role of feature tables
        self.state = AdamState.create(self._params(), adam.lr_tables, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps)

    def _params(self):
        return {name: getattr(self.grid, name) for name in self.NAMES}

    def step(self, iteration: int) -> dict:
        mesh = extract_mesh(self.grid)
        if mesh.is_empty:
            raise NumericalAbort("direct grid extraction became empty", iteration=iteration)
        loss, g_vertices = surface_loss(self.target, mesh)
        fg = extract_backward(self.grid, mesh, g_vertices)
        grads = {name: getattr(fg, name) for name in self.NAMES}
        new, self.state = adam_step(self._params(), grads, self.state)
        bound = 0.45 * self.grid.cell
        self.grid = FlexiGrid.create(
            new["sdf"], self.grid.resolution, self.grid.bbox,
            offsets=np.clip(new["offsets"], -bound, bound),
            alpha=np.maximum(new["alpha"], 1e-3), beta=np.maximum(new["beta"], 1e-3),
            gamma=np.clip(new["gamma"], 1e-3, 1.0 - 1e-3),
        )
        return {"loss_total": loss}

    def mesh(self):
        return extract_mesh(self.grid)


def dense_grid_from_network(net: SdfNetwork, resolution: int) -> FlexiGrid:
    """Like grid_from_network but with weights at every cube, so all of them are trainable."""
    sparse = grid_from_network(net, resolution)
    alpha, beta, gamma = evaluate_cube_weights(net, cube_centers(np.arange(resolution ** 3), resolution, net.bbox))
    return FlexiGrid.create(sparse.sdf, resolution, net.bbox, offsets=sparse.offsets,
                            alpha=alpha, beta=beta, gamma=gamma)


def iterations_to_threshold(trainer, mesh_fn, target_points: np.ndarray, threshold: float, budget: int,
                            check_every: int, n_samples: int, seed: int) -> Optional[int]:
    """First checked iteration whose chamfer is below threshold, None if the budget runs out."""
    def below() -> bool:
        mesh = mesh_fn()
        if mesh.is_empty:
            return False
        pts, _, _ = mesh.sample_surface(n_samples, np.random.default_rng([seed, 3]))
        return chamfer_points(pts, target_points)[0] < threshold

    if below():
        return 0
    for it in range(1, budget + 1):
        trainer.step(it)
        if it % check_every == 0 and below():
            return it
    return None


@dataclass
class AblationRun:
    seed: int
    net_iters: Optional[int]
    grid_iters: Optional[int]

    def encoded_wins(self, budget: int, ratio: float = 0.5) -> bool:
        if self.net_iters is None:
            return False
        baseline = budget + 1 if self.grid_iters is None else self.grid_iters
        return self.net_iters <= ratio * baseline


@dataclass
class AblationReport:
    runs: List[AblationRun]
    budget: int
    threshold: float

    @property
    def verdict(self) -> bool:
        wins = sum(r.encoded_wins(self.budget) for r in self.runs)
        return wins * 2 > len(self.runs)

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "seed": [r.seed for r in self.runs],
            "net_iters": pd.array([r.net_iters for r in self.runs], dtype="Int64"),
            "grid_iters": pd.array([r.grid_iters for r in self.runs], dtype="Int64"),
            "encoded_wins": [r.encoded_wins(self.budget) for r in self.runs],
        })


def run_ablation(radius: float = 0.3, resolution: int = 32, budget: int = 1000, seeds: Sequence[int] = (0, 1, 2),
                 warmup_iters: int = 500, check_every: int = 10, threshold_cells: float = 2.0,
                 n_samples: int = 5000, network: NetworkSettings = NetworkSettings(),
                 adam: AdamSettings = AdamSettings()) -> AblationReport:
    target = Sphere(radius)
    threshold = threshold_cells * (network.bbox[1] - network.bbox[0]) / resolution
    runs = []
    for seed in seeds:
        target_points = target_surface_points(target, n_samples, seed, network.bbox)
        net = SdfNetwork.create(network, seed=seed, resolution=resolution)
        init_ellipsoid(net, iters=warmup_iters, seed=seed)
        grid = dense_grid_from_network(net, resolution)

        net_trainer = SurfaceModeTrainer(net, target, resolution, adam=adam)
        net_iters = iterations_to_threshold(net_trainer, lambda: net_trainer.current()[1], target_points,
                                            threshold, budget, check_every, n_samples, seed)
        grid_trainer = DirectGridTrainer(grid, target, adam)
        grid_iters = iterations_to_threshold(grid_trainer, grid_trainer.mesh, target_points,
                                             threshold, budget, check_every, n_samples, seed)
        logger.info("ablation seed %d: encoded %s, direct %s iterations", seed, net_iters, grid_iters)
        runs.append(AblationRun(seed, net_iters, grid_iters))
    return AblationReport(runs=runs, budget=budget, threshold=threshold)
