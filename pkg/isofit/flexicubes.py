# isofit/flexicubes.py
"""
Differentiable dual-marching-cubes extraction with per-cube weights.

Grid layout (R cubes per axis, R+1 vertices per axis):
  vertex (i, j, k) -> (i * (R+1) + j) * (R+1) + k
  cube   (i, j, k) -> (i * R + j) * R + k        (min corner)
  corner c of a cube sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)

Each surface cube gets one dual vertex: the beta-weighted mean of its edge
crossings, each crossing an alpha-weighted interpolation of the deformed
corners. Every interior sign-change edge yields a quad of the 4 dual vertices
around it, fanned into 4 triangles around a gamma-weighted midpoint.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ContractViolation, ProvenanceError
from .mesh import MeshProvenance, TriMesh

logger = logging.getLogger(__name__)

S_EPS = 1e-8

CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

# local edges 0-3 run along x, 4-7 along y, 8-11 along z
CUBE_EDGES = np.array([
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
], dtype=np.int64)

# cubes around a grid edge starting at vertex (i, j, k), as offsets of the cube's
# min corner, in cyclic order with right-handed normal along +axis
QUAD_CUBES = {
    0: np.array([(0, -1, -1), (0, 0, -1), (0, 0, 0), (0, -1, 0)]),
    1: np.array([(-1, 0, -1), (-1, 0, 0), (0, 0, 0), (0, 0, -1)]),
    2: np.array([(-1, -1, 0), (0, -1, 0), (0, 0, 0), (-1, 0, 0)]),
}


@dataclass
class FlexiGrid:
    """
    Per-vertex sdf / offsets and per-cube weights.

    Cube weights are dense (cube_ids None, arrays sized R^3) or sparse (arrays
    aligned with the sorted cube_ids; unlisted cubes use alpha = beta = 1,
    gamma = 0.5). An empty cube_ids array means default weights everywhere.
    """
    resolution: int
    bbox: Tuple[float, float]
    sdf: np.ndarray
    offsets: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    cube_ids: Optional[np.ndarray] = None

    @classmethod
    def create(cls, sdf, resolution: int, bbox=(-0.5, 0.5), offsets=None, alpha=None, beta=None,
               gamma=None, cube_ids=None) -> "FlexiGrid":
        n_vertices = (resolution + 1) ** 3
        if cube_ids is None and alpha is None and beta is None and gamma is None:
            cube_ids = np.zeros(0, dtype=np.int64)
        size = resolution ** 3 if cube_ids is None else len(cube_ids)
        grid = cls(
            resolution=int(resolution),
            bbox=(float(bbox[0]), float(bbox[1])),
            sdf=np.asarray(sdf, dtype=np.float64).reshape(-1),
            offsets=np.zeros((n_vertices, 3)) if offsets is None else np.asarray(offsets, dtype=np.float64),
            alpha=np.ones((size, 8)) if alpha is None else np.asarray(alpha, dtype=np.float64),
            beta=np.ones((size, 12)) if beta is None else np.asarray(beta, dtype=np.float64),
            gamma=np.full(size, 0.5) if gamma is None else np.asarray(gamma, dtype=np.float64),
            cube_ids=None if cube_ids is None else np.asarray(cube_ids, dtype=np.int64),
        )
        grid.validate()
        return grid

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], resolution: int,
                      bbox=(-0.5, 0.5)) -> "FlexiGrid":
        """Sample an sdf at the grid vertices; default weights, zero offsets."""
        base = grid_points(resolution, bbox)
        return cls.create(fn(base), resolution, bbox)

    @property
    def cell(self) -> float:
        return (self.bbox[1] - self.bbox[0]) / self.resolution

    @property
    def n_vertices(self) -> int:
        return (self.resolution + 1) ** 3

    @property
    def dense(self) -> bool:
        return self.cube_ids is None

    def validate(self) -> None:
        R, n_v = self.resolution, self.n_vertices
        if R < 1:
            raise ContractViolation(f"resolution must be positive, got {R}")
        if self.sdf.shape != (n_v,):
            raise ContractViolation(f"sdf must have {n_v} entries, got {self.sdf.shape}")
        if self.offsets.shape != (n_v, 3):
            raise ContractViolation(f"offsets must be ({n_v}, 3), got {self.offsets.shape}")
        size = R ** 3 if self.dense else len(self.cube_ids)
        for name, arr, shape in (("alpha", self.alpha, (size, 8)), ("beta", self.beta, (size, 12)),
                                 ("gamma", self.gamma, (size,))):
            if arr.shape != shape:
                raise ContractViolation(f"{name} must be {shape}, got {arr.shape}")
        if not self.dense and len(self.cube_ids) and (
                np.any(np.diff(self.cube_ids) <= 0) or self.cube_ids[0] < 0 or self.cube_ids[-1] >= R ** 3):
            raise ContractViolation("cube_ids must be sorted, unique and in range")

        _first_bad("sdf", ~np.isfinite(self.sdf), "vertex")
        _first_bad("offset", ~np.isfinite(self.offsets).all(axis=1)
                   | (np.abs(self.offsets).max(axis=1) >= 0.5 * self.cell), "vertex")
        owner = np.arange(size) if self.dense else self.cube_ids
        _first_bad("alpha", ~(self.alpha > 0).all(axis=1) | ~np.isfinite(self.alpha).all(axis=1), "cube", owner)
        _first_bad("beta", ~(self.beta > 0).all(axis=1) | ~np.isfinite(self.beta).all(axis=1), "cube", owner)
        _first_bad("gamma", ~((self.gamma > 0) & (self.gamma < 1)), "cube", owner)

    def nudged_sdf(self) -> np.ndarray:
        s = self.sdf.copy()
        s[np.abs(s) < S_EPS] = S_EPS
        return s

    def base_positions(self) -> np.ndarray:
        return grid_points(self.resolution, self.bbox)

    def deformed_positions(self) -> np.ndarray:
        return self.base_positions() + self.offsets

    def weight_slots(self, cubes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Row of each cube in the weight arrays, and whether it has one."""
        cubes = np.asarray(cubes, dtype=np.int64)
        if self.dense:
            return cubes, np.ones(len(cubes), dtype=bool)
        pos = np.searchsorted(self.cube_ids, cubes)
        clipped = np.minimum(pos, max(len(self.cube_ids) - 1, 0))
        found = (pos < len(self.cube_ids)) & (self.cube_ids[clipped] == cubes if len(self.cube_ids) else False)
        return clipped, found

    def weights_for(self, cubes: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        slots, found = self.weight_slots(cubes)
        alpha, beta, gamma = np.ones((len(slots), 8)), np.ones((len(slots), 12)), np.full(len(slots), 0.5)
        alpha[found], beta[found], gamma[found] = self.alpha[slots[found]], self.beta[slots[found]], self.gamma[slots[found]]
        return alpha, beta, gamma


@dataclass
class FlexiGradients:
    """Gradients in the layout of the grid they were taken against."""
    sdf: np.ndarray
    offsets: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray


def _first_bad(what: str, bad: np.ndarray, kind: str, owner: Optional[np.ndarray] = None) -> None:
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        label = idx if owner is None else int(owner[idx])
        raise ContractViolation(f"invalid {what} at {kind} {label}")


def grid_points(resolution: int, bbox=(-0.5, 0.5)) -> np.ndarray:
    """Undeformed vertex positions, (R+1)^3 x 3 in vertex-id order."""
    t = np.linspace(bbox[0], bbox[1], resolution + 1)
    return np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)


def cube_centers(cubes: np.ndarray, resolution: int, bbox=(-0.5, 0.5)) -> np.ndarray:
    ijk = np.stack(np.unravel_index(np.asarray(cubes, dtype=np.int64), (resolution,) * 3), axis=1)
    return bbox[0] + (ijk + 0.5) * (bbox[1] - bbox[0]) / resolution


def cube_corner_vertices(cubes: np.ndarray, resolution: int) -> np.ndarray:
    """(K, 8) vertex ids of each cube's corners."""
    n = resolution + 1
    ijk = np.stack(np.unravel_index(np.asarray(cubes, dtype=np.int64), (resolution,) * 3), axis=1)
    c = ijk[:, None, :] + CORNER_OFFSETS[None, :, :]
    return (c[..., 0] * n + c[..., 1]) * n + c[..., 2]


def surface_cubes(sdf: np.ndarray, resolution: int) -> np.ndarray:
    """Sorted ids of cubes whose corners do not all share a sign (after nudging)."""
    n, R = resolution + 1, resolution
    s = np.asarray(sdf, dtype=np.float64).reshape(n, n, n)
    inside = (np.where(np.abs(s) < S_EPS, S_EPS, s) < 0).astype(np.int8)
    count = sum(inside[dx:dx + R, dy:dy + R, dz:dz + R] for dx, dy, dz in CORNER_OFFSETS)
    return np.flatnonzero((count > 0) & (count < 8))


def sign_hash(sdf: np.ndarray) -> str:
    inside = np.asarray(sdf) < 0
    return hashlib.blake2b(np.packbits(inside).tobytes(), digest_size=16).hexdigest()


# ---- Scalar building blocks -------------------------------------------------

def edge_crossing(s_a: float, s_b: float, x_a, x_b, alpha_a: float = 1.0, alpha_b: float = 1.0):
    """Alpha-weighted zero crossing between two deformed corners of opposite sign."""
    if not s_a * s_b < 0:
        raise ContractViolation(f"edge endpoints must have opposite signs, got {s_a} and {s_b}")
    if not (alpha_a > 0 and alpha_b > 0):
        raise ContractViolation("alpha weights must be positive")
    wa, wb = alpha_a * abs(s_b), alpha_b * abs(s_a)
    return (wa * np.asarray(x_a, dtype=np.float64) + wb * np.asarray(x_b, dtype=np.float64)) / (wa + wb)


def dual_vertex(corner_sdf, corner_pos, alpha=None, beta=None) -> Optional[np.ndarray]:
    """
    Dual vertex of one cube from its 8 corner values / positions.
    Returns None when the cube has no sign change.
    """
    s = np.asarray(corner_sdf, dtype=np.float64)
    s = np.where(np.abs(s) < S_EPS, S_EPS, s)
    x = np.asarray(corner_pos, dtype=np.float64)
    alpha = np.ones(8) if alpha is None else np.asarray(alpha, dtype=np.float64)
    beta = np.ones(12) if beta is None else np.asarray(beta, dtype=np.float64)
    num, den = np.zeros(3), 0.0
    for e, (a, b) in enumerate(CUBE_EDGES):
        if s[a] * s[b] < 0:
            num += beta[e] * edge_crossing(s[a], s[b], x[a], x[b], alpha[a], alpha[b])
            den += beta[e]
    return None if den == 0.0 else num / den


# ---- Vectorized extraction --------------------------------------------------

@dataclass
class _CubeState:
    """Per-surface-cube intermediates shared by forward and backward passes."""
    cubes: np.ndarray      # (K,)
    corners: np.ndarray    # (K, 8) vertex ids
    s: np.ndarray          # (K, 8)
    x: np.ndarray          # (K, 8, 3) deformed
    alpha: np.ndarray      # (K, 8)
    beta: np.ndarray       # (K, 12)
    mask: np.ndarray       # (K, 12) crossing edges
    wa: np.ndarray         # (K, 12)
    wb: np.ndarray
    u: np.ndarray          # (K, 12, 3)
    bsum: np.ndarray       # (K,)
    v: np.ndarray          # (K, 3)


def _cube_state(grid: FlexiGrid, s_flat: np.ndarray, x_flat: np.ndarray, cubes: np.ndarray) -> _CubeState:
    corners = cube_corner_vertices(cubes, grid.resolution)
    s = s_flat[corners]
    x = x_flat[corners]
    alpha, beta, _ = grid.weights_for(cubes)
    ca, cb = CUBE_EDGES[:, 0], CUBE_EDGES[:, 1]
    mask = (s[:, ca] * s[:, cb]) < 0
    wa = alpha[:, ca] * np.abs(s[:, cb])
    wb = alpha[:, cb] * np.abs(s[:, ca])
    w = wa + wb
    u = (wa[..., None] * x[:, ca] + wb[..., None] * x[:, cb]) / w[..., None]
    bm = np.where(mask, beta, 0.0)
    bsum = bm.sum(axis=1)
    # a cube with any sign change crosses at least 3 of its edges
    assert len(cubes) == 0 or mask.sum(axis=1).min() >= 3, "surface cube with fewer than 3 crossings"
    v = np.einsum("ke,ked->kd", bm, u) / bsum[:, None]
    return _CubeState(cubes, corners, s, x, alpha, beta, mask, wa, wb, u, bsum, v)


def _quads(grid: FlexiGrid, s_flat: np.ndarray, cubes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Oriented quads (dual-vertex indices) around interior sign-change edges, in (axis, edge) order."""
    R = grid.resolution
    n = R + 1
    inside = (s_flat < 0).reshape(n, n, n)
    quads, owners = [], []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis], hi[axis] = slice(0, R), slice(1, n)
        change = inside[tuple(lo)] != inside[tuple(hi)]
        # the other two axes must have a cube on both sides
        for other in range(3):
            if other != axis:
                idx = [slice(None)] * 3
                idx[other] = [0, R]
                change[tuple(idx)] = False
        i, j, k = np.nonzero(change)
        if len(i) == 0:
            continue
        start_inside = inside[i, j, k]
        ring = QUAD_CUBES[axis]
        cube_ijk = np.stack([i, j, k], axis=1)[:, None, :] + ring[None, :, :]     # (E, 4, 3)
        ring_ids = (cube_ijk[..., 0] * R + cube_ijk[..., 1]) * R + cube_ijk[..., 2]
        owners.append(ring_ids.min(axis=1))
        dual = np.searchsorted(cubes, ring_ids)
        # start vertex outside -> reverse so the normal points toward positive sdf
        dual = np.where(start_inside[:, None], dual, dual[:, [0, 3, 2, 1]])
        quads.append(dual)
    if not quads:
        return np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(quads).astype(np.int64), np.concatenate(owners).astype(np.int64)


def extract_mesh(grid: FlexiGrid) -> TriMesh:
    grid.validate()
    s_flat = grid.nudged_sdf()
    cubes = surface_cubes(s_flat, grid.resolution)
    state = _cube_state(grid, s_flat, grid.deformed_positions(), cubes)
    quads, owners = _quads(grid, s_flat, cubes)

    _, _, gamma = grid.weights_for(owners)
    v = state.v
    n_dual = len(v)
    if len(quads):
        g = gamma[:, None]
        mid = 0.5 * (g * (v[quads[:, 0]] + v[quads[:, 2]]) + (1.0 - g) * (v[quads[:, 1]] + v[quads[:, 3]]))
    else:
        mid = np.zeros((0, 3))
    m = n_dual + np.arange(len(quads))
    a, b, c, d = quads.T
    triangles = np.stack([
        np.stack([a, b, m], axis=1), np.stack([b, c, m], axis=1),
        np.stack([c, d, m], axis=1), np.stack([d, a, m], axis=1),
    ], axis=1).reshape(-1, 3)

    provenance = MeshProvenance(
        resolution=grid.resolution,
        sign_hash=sign_hash(s_flat),
        vertex_cell=np.concatenate([cubes, np.full(len(quads), -1, dtype=np.int64)]),
        quads=quads,
        quad_gamma_cube=owners,
    )
    logger.debug("extracted %d dual vertices, %d quads at R=%d", n_dual, len(quads), grid.resolution)
    return TriMesh(np.concatenate([v, mid]), triangles, provenance)


def extract_backward(grid: FlexiGrid, mesh: TriMesh, grad_vertices: np.ndarray) -> FlexiGradients:
    """
    Vector-Jacobian product of extract_mesh at fixed topology.
    grad_vertices is dL/d(mesh vertex), shape (N, 3).
    """
    prov = mesh.provenance
    s_flat = grid.nudged_sdf()
    if prov is None or prov.resolution != grid.resolution or prov.sign_hash != sign_hash(s_flat):
        raise ProvenanceError("mesh was not extracted from this grid")
    G = np.asarray(grad_vertices, dtype=np.float64)
    if G.shape != mesh.vertices.shape:
        raise ContractViolation(f"vertex gradient must be {mesh.vertices.shape}, got {G.shape}")

    cubes = prov.vertex_cell[prov.vertex_cell >= 0]
    n_dual = len(cubes)
    state = _cube_state(grid, s_flat, grid.deformed_positions(), cubes)
    quads, owners = prov.quads, prov.quad_gamma_cube

    # midpoints -> dual vertices and gamma
    Gd = G[:n_dual].copy()
    d_gamma_q = np.zeros(len(quads))
    if len(quads):
        Gm = G[n_dual:]
        _, _, gamma = grid.weights_for(owners)
        v = state.v
        for col, coef in ((0, gamma), (2, gamma), (1, 1.0 - gamma), (3, 1.0 - gamma)):
            np.add.at(Gd, quads[:, col], 0.5 * coef[:, None] * Gm)
        diff = (v[quads[:, 0]] + v[quads[:, 2]]) - (v[quads[:, 1]] + v[quads[:, 3]])
        d_gamma_q = 0.5 * (Gm * diff).sum(axis=1)

    # dual vertex -> beta and crossings
    mask = state.mask
    coef = np.where(mask, state.beta, 0.0) / state.bsum[:, None]                    # (K, 12)
    d_beta = np.where(mask, np.einsum("kd,ked->ke", Gd, state.u - state.v[:, None, :]), 0.0) / state.bsum[:, None]
    Gu = coef[..., None] * Gd[:, None, :]                                             # (K, 12, 3)

    # crossings -> alpha, sdf, deformed corners
    ca, cb = CUBE_EDGES[:, 0], CUBE_EDGES[:, 1]
    W = state.wa + state.wb
    xa, xb = state.x[:, ca], state.x[:, cb]
    gwa = (Gu * (xa - state.u)).sum(axis=2) / W
    gwb = (Gu * (xb - state.u)).sum(axis=2) / W
    sa, sb = state.s[:, ca], state.s[:, cb]
    aa, ab = state.alpha[:, ca], state.alpha[:, cb]

    d_alpha = np.zeros_like(state.alpha)
    np.add.at(d_alpha.T, ca, (gwa * np.abs(sb)).T)
    np.add.at(d_alpha.T, cb, (gwb * np.abs(sa)).T)

    d_s_corner = np.zeros_like(state.s)
    np.add.at(d_s_corner.T, cb, (gwa * aa * np.sign(sb)).T)
    np.add.at(d_s_corner.T, ca, (gwb * ab * np.sign(sa)).T)

    d_x_corner = np.zeros_like(state.x)
    np.add.at(d_x_corner.transpose(1, 0, 2), ca, ((state.wa / W)[..., None] * Gu).transpose(1, 0, 2))
    np.add.at(d_x_corner.transpose(1, 0, 2), cb, ((state.wb / W)[..., None] * Gu).transpose(1, 0, 2))

    d_sdf = np.zeros(grid.n_vertices)
    np.add.at(d_sdf, state.corners.reshape(-1), d_s_corner.reshape(-1))
    d_offsets = np.zeros((grid.n_vertices, 3))
    np.add.at(d_offsets, state.corners.reshape(-1), d_x_corner.reshape(-1, 3))

    # scatter per-cube weight gradients into the grid's layout
    size = len(grid.alpha)
    g_alpha, g_beta, g_gamma = np.zeros((size, 8)), np.zeros((size, 12)), np.zeros(size)
    slots, found = grid.weight_slots(cubes)
    g_alpha[slots[found]] += d_alpha[found]
    g_beta[slots[found]] += d_beta[found]
    if len(quads):
        q_slots, q_found = grid.weight_slots(owners)
        np.add.at(g_gamma, q_slots[q_found], d_gamma_q[q_found])

    return FlexiGradients(sdf=d_sdf, offsets=d_offsets, alpha=g_alpha, beta=g_beta, gamma=g_gamma)
