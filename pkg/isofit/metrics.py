# isofit/metrics.py
"""Geometric evaluation: chamfer-L1 and 95th-percentile hausdorff between surfaces."""
from __future__ import annotations

from typing import Tuple, Union

import numpy as np
from sklearn.neighbors import KDTree

from .errors import ContractViolation
from .flexicubes import FlexiGrid, extract_mesh
from .mesh import TriMesh
from .shapes import TargetShape


def chamfer_points(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """
    chamfer-L1 = mean_a d(a, B) + mean_b d(b, A);
    hausdorff-95 = larger of the two directional 95th percentiles.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ContractViolation("chamfer needs two non-empty point sets")
    d_ab = KDTree(b).query(a, k=1)[0][:, 0]
    d_ba = KDTree(a).query(b, k=1)[0][:, 0]
    chamfer = float(d_ab.mean() + d_ba.mean())
    hausdorff = float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    return chamfer, hausdorff


def target_surface_points(target: TargetShape, n: int, seed: int, bbox=(-0.5, 0.5),
                          resolution: int = 96, newton_steps: int = 3) -> np.ndarray:
    """Area-weighted samples of an extracted proxy surface, projected onto the zero set."""
    proxy = extract_mesh(FlexiGrid.from_function(target.sdf, resolution, bbox))
    if proxy.is_empty:
        raise ContractViolation("target surface is empty at the sampling resolution")
    pts, _, _ = proxy.sample_surface(n, np.random.default_rng([seed, 7]))
    for _ in range(newton_steps):
        g = target.gradient(pts)
        pts = pts - (target.sdf(pts) / np.maximum((g * g).sum(axis=1), 1e-12))[:, None] * g
    return pts


def chamfer(mesh: TriMesh, target: Union[TargetShape, TriMesh, np.ndarray], n_samples: int = 20_000,
            seed: int = 0, bbox=(-0.5, 0.5)) -> Tuple[float, float]:
    """(chamfer-L1, hausdorff-95) between mesh samples and target surface samples."""
    if mesh.is_empty:
        raise ContractViolation("cannot measure chamfer of an empty mesh")
    mesh_pts, _, _ = mesh.sample_surface(n_samples, np.random.default_rng([seed, 3]))
    if isinstance(target, TargetShape):
        target_pts = target_surface_points(target, n_samples, seed, bbox)
    elif isinstance(target, TriMesh):
        target_pts, _, _ = target.sample_surface(n_samples, np.random.default_rng([seed, 5]))
    else:
        target_pts = np.asarray(target, dtype=np.float64)
    return chamfer_points(mesh_pts, target_pts)


def sample_spacing(mesh: TriMesh, n_samples: int) -> float:
    """Typical distance between neighbouring samples: sqrt(area / n)."""
    return float(np.sqrt(mesh.face_areas().sum() / n_samples))
