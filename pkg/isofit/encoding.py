# isofit/encoding.py
"""
Multi-resolution hash-grid positional encoding.

Level l has resolution N_l = floor(N_min * b**l). Levels whose (N_l + 1)**3
lattice corners fit in T rows are stored densely, the rest are hashed with
h(i, j, k) = (i*p1 xor j*p2 xor k*p3) mod T.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import Node, Tape
from .config import HashGridSettings
from .errors import ContractViolation

PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

# corner c of a cell sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


@dataclass
class HashGridEncoding:
    levels: int = 8
    n_min: int = 16
    growth: float = 1.3819
    table_size: int = 2 ** 14
    features: int = 2
    tables: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, settings: HashGridSettings = HashGridSettings(), seed: int = 0,
               init_range: float = 1e-4) -> "HashGridEncoding":
        enc = cls(levels=settings.levels, n_min=settings.n_min, growth=settings.growth,
                  table_size=settings.table_size, features=settings.features)
        rng = np.random.default_rng(seed)
        enc.tables = [rng.uniform(-init_range, init_range, size=(enc.table_rows(l), enc.features))
                      for l in range(enc.levels)]
        return enc

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def resolution(self, level: int) -> int:
        return int(np.floor(self.n_min * self.growth ** level))

    def is_dense(self, level: int) -> bool:
        # dense when every lattice corner of the level gets its own row
        return (self.resolution(level) + 1) ** 3 <= self.table_size

    def table_rows(self, level: int) -> int:
        return (self.resolution(level) + 1) ** 3 if self.is_dense(level) else self.table_size

    def corner_index(self, level: int, corners: np.ndarray) -> np.ndarray:
        """Table rows for integer lattice corners (..., 3)."""
        n = self.resolution(level)
        if self.is_dense(level):
            return (corners[..., 0] * (n + 1) + corners[..., 1]) * (n + 1) + corners[..., 2]
        c = corners.astype(np.uint64)
        h = (c[..., 0] * PRIMES[0]) ^ (c[..., 1] * PRIMES[1]) ^ (c[..., 2] * PRIMES[2])
        return (h % np.uint64(self.table_size)).astype(np.int64)

    def lookup(self, points: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """
        Per level: table rows (B, 8) of the enclosing cell's corners and their
        trilinear weights (B, 8). Points are clamped to the unit cube.
        """
        p = _check_points(points)
        out = []
        for level in range(self.levels):
            n = self.resolution(level)
            x = p * n
            base = np.minimum(np.floor(x).astype(np.int64), n - 1)
            frac = x - base
            corners = base[:, None, :] + CORNER_OFFSETS[None, :, :]
            w = np.where(CORNER_OFFSETS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
            out.append((self.corner_index(level, corners), w))
        return out

    def lipschitz_bound(self) -> float:
        """Bound on |encode(p) - encode(q)| / |p - q| within one finest-level cell."""
        # trilinear interpolation moves at most N * (max - min corner value) * sqrt(3) per unit step
        total = 0.0
        for level, table in enumerate(self.tables):
            spread = float(table.max() - table.min()) if table.size else 0.0
            total += (self.resolution(level) * spread * np.sqrt(3.0)) ** 2 * self.features
        return float(np.sqrt(total))


def _check_points(points: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if p.shape[-1] != 3:
        raise ContractViolation(f"points must have 3 coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        bad = int(np.argwhere(~np.isfinite(p))[0][0])
        raise ContractViolation(f"non-finite coordinate in point {bad}")
    return np.clip(p, 0.0, 1.0)


def encode(points: np.ndarray, enc: HashGridEncoding) -> np.ndarray:
    """
    Input:
      points (B, 3) or (3,) in [0, 1]^3
    Output:
      features (B, L*F), levels concatenated coarse to fine
    """
    single = np.asarray(points).ndim == 1
    parts = [np.einsum("bc,bcf->bf", w, enc.tables[level][idx])
             for level, (idx, w) in enumerate(enc.lookup(points))]
    feats = np.concatenate(parts, axis=1)
    return feats[0] if single else feats


def encode_on_tape(tape: Tape, tables: List[Node], enc: HashGridEncoding, points: np.ndarray) -> Node:
    """Same as encode(), recorded on `tape` so gradients reach the table nodes."""
    parts = []
    for level, (idx, w) in enumerate(enc.lookup(points)):
        corners = tape.gather(tables[level], idx)                  # (B, 8, F)
        weighted = tape.mul(corners, tape.const(w[:, :, None]))
        parts.append(tape.sum(weighted, axis=1))                   # (B, F)
    return tape.concat(parts, axis=-1)
