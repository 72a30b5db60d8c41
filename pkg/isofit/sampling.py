# isofit/sampling.py
"""Training point samples: stratified over the domain box plus a near-surface band."""
from __future__ import annotations

from typing import Tuple

import numpy as np

from .shapes import TargetShape


def batch_rng(seed: int, stage: int, iteration: int) -> np.random.Generator:
    """Independent stream per (seed, stage, iteration); batches never depend on call order."""
    return np.random.default_rng([int(seed), int(stage), int(iteration)])


def stratified_points(n: int, bbox: Tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """One jittered sample in each of n distinct cells of an m^3 lattice."""
    lo, hi = bbox
    m = int(np.ceil(round(n ** (1.0 / 3.0), 9)))
    cells = rng.permutation(m ** 3)[:n]
    ijk = np.stack(np.unravel_index(cells, (m, m, m)), axis=1).astype(np.float64)
    unit = (ijk + rng.random((n, 3))) / m
    return lo + (hi - lo) * unit


def near_surface_points(shape: TargetShape, n: int, bbox: Tuple[float, float],
                        rng: np.random.Generator, band: float = 0.05,
                        newton_steps: int = 4) -> np.ndarray:
    """Points with |sdf| < band: uniform seeds pulled onto the zero set, then pushed off along the gradient."""
    lo, hi = bbox
    p = rng.uniform(lo, hi, size=(n, 3))
    for _ in range(newton_steps):
        g = shape.gradient(p)
        gg = np.maximum((g * g).sum(axis=1), 1e-12)
        p = np.clip(p - (shape.sdf(p) / gg)[:, None] * g, lo, hi)
    g = shape.gradient(p)
    normal = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    offset = rng.uniform(-band, band, size=n)
    return np.clip(p + offset[:, None] * normal, lo, hi)


def sample_batch(shape: TargetShape, n: int, near_fraction: float, bbox: Tuple[float, float],
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(points (n, 3), target sdf (n,)): stratified share first, then near-surface share."""
    n_near = int(round(n * near_fraction))
    points = stratified_points(n - n_near, bbox, rng)
    if n_near:
        points = np.concatenate([points, near_surface_points(shape, n_near, bbox, rng)])
    return points, shape.sdf(points)


def probe_points(n: int = 4096, bbox: Tuple[float, float] = (-0.5, 0.5), seed: int = 0) -> np.ndarray:
    """Fixed probe set used to report warm-up accuracy."""
    lo, hi = bbox
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 3))
