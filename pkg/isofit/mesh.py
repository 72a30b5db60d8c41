# isofit/mesh.py
"""Triangle meshes, their provenance back to the extraction grid, and topology checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class MeshProvenance:
    """
    How an extracted mesh maps back to its grid.

    vertex_cell[i] is the cube id of dual vertex i, or -1 for a quad midpoint.
    Quad q contributes midpoint vertex n_dual + q and its four triangles.
    """
    resolution: int
    sign_hash: str
    vertex_cell: np.ndarray         # (N,)
    quads: np.ndarray               # (Q, 4) dual-vertex indices, cyclic, oriented
    quad_gamma_cube: np.ndarray     # (Q,) cube id whose gamma splits the quad

    @property
    def n_dual(self) -> int:
        return int((self.vertex_cell >= 0).sum())


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    provenance: Optional[MeshProvenance] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def _corners(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        a, b, c = self._corners()
        n = np.cross(b - a, c - a)
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def face_centroids(self) -> np.ndarray:
        a, b, c = self._corners()
        return (a + b + c) / 3.0

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of adjacent face normals; zero for isolated vertices."""
        n = self.face_normals(unit=False)
        acc = np.zeros_like(self.vertices)
        for corner in range(3):
            np.add.at(acc, self.triangles[:, corner], n)
        length = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.where(length > 0, acc / np.where(length > 0, length, 1.0), 0.0)

    def sample_surface(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Area-weighted uniform samples.
        Returns (points (n, 3), face ids (n,), barycentric weights (n, 3)).
        """
        if self.is_empty:
            raise ContractViolation("cannot sample an empty mesh")
        areas = self.face_areas()
        faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        root = np.sqrt(r1)
        bary = np.stack([1.0 - root, root * (1.0 - r2), root * r2], axis=1)
        corners = self.vertices[self.triangles[faces]]          # (n, 3, 3)
        return np.einsum("nc,ncd->nd", bary, corners), faces, bary

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles.copy())


@dataclass(frozen=True)
class MeshReport:
    n_vertices: int
    n_triangles: int
    empty: bool
    watertight: bool
    boundary_edges: int
    nonmanifold_edges: int
    euler_characteristic: int
    duplicate_triangles: int
    degenerate_triangles: int
    min_quality: float

    def as_rows(self):
        """(metric, value) pairs for metrics.csv."""
        return [
            ("vertices", self.n_vertices),
            ("triangles", self.n_triangles),
            ("empty", str(self.empty).lower()),
            ("watertight", str(self.watertight).lower()),
            ("boundary_edges", self.boundary_edges),
            ("nonmanifold_edges", self.nonmanifold_edges),
            ("euler_characteristic", self.euler_characteristic),
            ("duplicate_triangles", self.duplicate_triangles),
            ("degenerate_triangles", self.degenerate_triangles),
            ("min_quality", self.min_quality),
        ]


def triangle_quality(mesh: TriMesh) -> np.ndarray:
    """4*sqrt(3)*area / sum of squared edge lengths: 1 for equilateral, 0 for degenerate."""
    a, b, c = mesh._corners()
    sq = ((b - a) ** 2).sum(1) + ((c - b) ** 2).sum(1) + ((a - c) ** 2).sum(1)
    return np.where(sq > 0, 4.0 * np.sqrt(3.0) * mesh.face_areas() / np.where(sq > 0, sq, 1.0), 0.0)


def mesh_validate(mesh: TriMesh) -> MeshReport:
    t = mesh.triangles
    if len(t) == 0:
        return MeshReport(n_vertices=len(mesh.vertices), n_triangles=0, empty=True, watertight=True,
                          boundary_edges=0, nonmanifold_edges=0, euler_characteristic=0,
                          duplicate_triangles=0, degenerate_triangles=0, min_quality=0.0)

    degenerate = int(((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])).sum())
    duplicate = len(t) - len(np.unique(np.sort(t, axis=1), axis=0))

    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    unique_edges, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = int((counts == 1).sum())
    nonmanifold = int((counts > 2).sum())

    n_used = len(np.unique(t))
    return MeshReport(
        n_vertices=len(mesh.vertices),
        n_triangles=len(t),
        empty=False,
        watertight=boundary == 0 and nonmanifold == 0,
        boundary_edges=boundary,
        nonmanifold_edges=nonmanifold,
        euler_characteristic=int(n_used - len(unique_edges) + len(t)),
        duplicate_triangles=int(duplicate),
        degenerate_triangles=degenerate,
        min_quality=float(triangle_quality(mesh).min()),
    )
