# isofit/networks.py
"""
SDF decoder and texture field on top of the hash-grid encoding.

Both networks keep their trainable arrays in one ordered `params` dict; the
hash tables are named "table.<level>" so Adam can give them their own rate.
Forward passes are always recorded on a Tape: evaluation without gradients
simply uses constant leaves.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import AdamState, Node, Tape, adam_step, backward
from .config import AdamSettings, NetworkSettings, TextureSettings
from .encoding import HashGridEncoding, encode_on_tape
from .errors import ConfigError, ContractViolation, NumericalAbort
from .flexicubes import FlexiGrid, cube_centers, grid_points, surface_cubes
from .sampling import batch_rng, probe_points, sample_batch
from .shapes import Ellipsoid

logger = logging.getLogger(__name__)

CUBE_OUTPUTS = 8 + 12 + 1
WEIGHT_FLOOR = 1e-3
EVAL_CHUNK = 32768
WARMUP_STAGE = 0   # fit stages are numbered from 1


# ---- MLP helpers ------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_skip_mlp(rng: np.random.Generator, prefix: str, n_in: int, hidden: int, n_out: int) -> Dict[str, np.ndarray]:
    """in -> h -> h -> (h + in, skip) -> h -> out."""
    sizes = [(n_in, hidden), (hidden, hidden), (hidden + n_in, hidden), (hidden, n_out)]
    params = {}
    for i, (a, b) in enumerate(sizes):
        params[f"{prefix}.w{i}"] = _glorot(rng, a, b)
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def skip_mlp_on_tape(tape: Tape, nodes: Dict[str, Node], prefix: str, x: Node) -> Node:
    def dense(h, i):
        return tape.add(tape.matmul(h, nodes[f"{prefix}.w{i}"]), nodes[f"{prefix}.b{i}"])

    h = tape.softplus(dense(x, 0))
    h = tape.softplus(dense(h, 1))
    h = tape.softplus(dense(tape.concat([h, x], axis=-1), 2))
    return dense(h, 3)


def adam_for(params: Dict[str, np.ndarray], settings: AdamSettings) -> AdamState:
    return AdamState.create(params, settings.lr_for, beta1=settings.beta1, beta2=settings.beta2, eps=settings.eps)


class _ParamMixin:
    params: Dict[str, np.ndarray]
    encoding: HashGridEncoding

    def bind(self, tape: Tape, trainable: bool = True) -> Dict[str, Node]:
        """One leaf per parameter, in declaration order."""
        leaf = tape.param if trainable else tape.const
        return {name: leaf(value, name=name) for name, value in self.params.items()}

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        if list(params) != list(self.params):
            raise ContractViolation("parameter names do not match the network")
        self.params = dict(params)
        self.encoding.tables = [self.params[f"table.{l}"] for l in range(self.encoding.levels)]

    def named_grads(self, grads: Dict[Node, np.ndarray], nodes: Dict[str, Node]) -> Dict[str, np.ndarray]:
        return {name: grads[node] for name, node in nodes.items()}

    def apply_adam(self, grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
        new_params, state = adam_step(self.params, grads, state)
        self.set_params(new_params)
        return state

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def _table_params(enc: HashGridEncoding) -> Dict[str, np.ndarray]:
    return {f"table.{l}": t for l, t in enumerate(enc.tables)}


# ---- SDF network ------------------------------------------------------------

@dataclass
class SdfNetwork(_ParamMixin):
    settings: NetworkSettings
    encoding: HashGridEncoding
    params: Dict[str, np.ndarray]
    resolution: int = 64   # grid whose cell bounds the offsets

    @classmethod
    def create(cls, settings: NetworkSettings = NetworkSettings(), seed: int = 0,
               resolution: int = 64) -> "SdfNetwork":
        enc = HashGridEncoding.create(settings.hash_grid, seed=seed)
        rng = np.random.default_rng([seed, 1])
        n_in = enc.output_dim + 3
        params = _table_params(enc)
        params.update(init_skip_mlp(rng, "vertex", n_in, settings.hidden, 4))
        params.update(init_skip_mlp(rng, "cube", n_in, settings.hidden, CUBE_OUTPUTS))
        # offsets and cube weights start at their neutral values
        params["vertex.w3"][:, 1:] = 0.0
        params["cube.w3"][:] = 0.0
        net = cls(settings=settings, encoding=enc, params=params, resolution=resolution)
        net.set_params(params)
        return net

    @property
    def bbox(self) -> Tuple[float, float]:
        return tuple(self.settings.bbox)

    @property
    def cell(self) -> float:
        return (self.bbox[1] - self.bbox[0]) / self.resolution

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.bbox
        return (np.atleast_2d(np.asarray(points, dtype=np.float64)) - lo) / (hi - lo)

    def _features(self, tape: Tape, nodes: Dict[str, Node], points: np.ndarray) -> Node:
        unit = self.to_unit(points)
        tables = [nodes[f"table.{l}"] for l in range(self.encoding.levels)]
        enc = encode_on_tape(tape, tables, self.encoding, unit)
        return tape.concat([enc, tape.const(2.0 * unit - 1.0)], axis=-1)

    def vertex_on_tape(self, tape: Tape, nodes: Dict[str, Node], points: np.ndarray,
                       cell: Optional[float] = None) -> Tuple[Node, Node]:
        """(s (B,), delta (B, 3)) with |delta|_inf < offset_bound * cell."""
        raw = skip_mlp_on_tape(tape, nodes, "vertex", self._features(tape, nodes, points))
        s = tape.sum(tape.cols(raw, 0, 1), axis=1)
        bound = self.settings.offset_bound * (self.cell if cell is None else cell)
        delta = tape.scale(tape.tanh(tape.cols(raw, 1, 4)), bound)
        return s, delta

    def cube_on_tape(self, tape: Tape, nodes: Dict[str, Node], centers: np.ndarray) -> Tuple[Node, Node, Node]:
        """(alpha (B, 8), beta (B, 12), gamma (B,))."""
        raw = skip_mlp_on_tape(tape, nodes, "cube", self._features(tape, nodes, centers))
        floor = tape.const(WEIGHT_FLOOR)
        alpha = tape.add(tape.softplus(tape.cols(raw, 0, 8)), floor)
        beta = tape.add(tape.softplus(tape.cols(raw, 8, 20)), floor)
        gamma = tape.sum(tape.sigmoid(tape.cols(raw, 20, 21)), axis=1)
        return alpha, beta, gamma

    def copy(self) -> "SdfNetwork":
        params = {k: v.copy() for k, v in self.params.items()}
        enc = HashGridEncoding(self.encoding.levels, self.encoding.n_min, self.encoding.growth,
                               self.encoding.table_size, self.encoding.features)
        net = SdfNetwork(self.settings, enc, params, self.resolution)
        net.set_params(params)
        return net


def evaluate_sdf(net: SdfNetwork, points: np.ndarray, cell: Optional[float] = None,
                 chunk: int = EVAL_CHUNK) -> Tuple[np.ndarray, np.ndarray]:
    """Tape-free (constant-leaf) evaluation in chunks: (s (B,), delta (B, 3))."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    s_out, d_out = np.empty(len(points)), np.empty((len(points), 3))
    for start in range(0, len(points), chunk):
        tape = Tape()
        s, d = net.vertex_on_tape(tape, net.bind(tape, trainable=False), points[start:start + chunk], cell)
        s_out[start:start + chunk], d_out[start:start + chunk] = s.value, d.value
    return s_out, d_out


def evaluate_cube_weights(net: SdfNetwork, centers: np.ndarray,
                          chunk: int = EVAL_CHUNK) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    a_out, b_out, g_out = np.empty((len(centers), 8)), np.empty((len(centers), 12)), np.empty(len(centers))
    for start in range(0, len(centers), chunk):
        tape = Tape()
        a, b, g = net.cube_on_tape(tape, net.bind(tape, trainable=False), centers[start:start + chunk])
        sl = slice(start, start + chunk)
        a_out[sl], b_out[sl], g_out[sl] = a.value, b.value, g.value
    return a_out, b_out, g_out


def sdf_eval(net: SdfNetwork, p) -> Tuple:
    """s and delta at one point (3,) or a batch (B, 3)."""
    single = np.asarray(p).ndim == 1
    s, d = evaluate_sdf(net, p)
    return (float(s[0]), d[0]) if single else (s, d)


def cube_weights_eval(net: SdfNetwork, cube_center) -> Tuple:
    single = np.asarray(cube_center).ndim == 1
    a, b, g = evaluate_cube_weights(net, cube_center)
    return (a[0], b[0], float(g[0])) if single else (a, b, g)


def grid_from_network(net: SdfNetwork, resolution: Optional[int] = None) -> FlexiGrid:
    """s and delta at every vertex; alpha, beta, gamma only at surface cubes."""
    R = net.resolution if resolution is None else int(resolution)
    cell = (net.bbox[1] - net.bbox[0]) / R
    s, delta = evaluate_sdf(net, grid_points(R, net.bbox), cell=cell)
    cubes = surface_cubes(s, R)
    alpha, beta, gamma = evaluate_cube_weights(net, cube_centers(cubes, R, net.bbox))
    return FlexiGrid.create(s, R, net.bbox, offsets=delta, alpha=alpha, beta=beta, gamma=gamma, cube_ids=cubes)


# ---- Texture field ----------------------------------------------------------

@dataclass
class TextureField(_ParamMixin):
    encoding: HashGridEncoding
    params: Dict[str, np.ndarray]
    hidden: int = 256
    bbox: Tuple[float, float] = (-0.5, 0.5)

    @classmethod
    def create(cls, settings: TextureSettings = TextureSettings(), bbox=(-0.5, 0.5), seed: int = 0) -> "TextureField":
        enc = HashGridEncoding.create(settings.hash_grid, seed=seed + 101)
        rng = np.random.default_rng([seed, 2])
        sizes = [(enc.output_dim + 6, settings.hidden), (settings.hidden, settings.hidden), (settings.hidden, 3)]
        params = _table_params(enc)
        for i, (a, b) in enumerate(sizes):
            params[f"head.w{i}"] = _glorot(rng, a, b)
            params[f"head.b{i}"] = np.zeros(b)
        tex = cls(encoding=enc, params=params, hidden=settings.hidden, bbox=tuple(bbox))
        tex.set_params(params)
        return tex

    def rgb_on_tape(self, tape: Tape, nodes: Dict[str, Node], positions: np.ndarray,
                    normals: np.ndarray, views: np.ndarray) -> Node:
        lo, hi = self.bbox
        unit = (np.atleast_2d(positions) - lo) / (hi - lo)
        tables = [nodes[f"table.{l}"] for l in range(self.encoding.levels)]
        x = tape.concat([encode_on_tape(tape, tables, self.encoding, unit),
                         tape.const(np.atleast_2d(normals)), tape.const(np.atleast_2d(views))], axis=-1)
        for i in range(3):
            x = tape.add(tape.matmul(x, nodes[f"head.w{i}"]), nodes[f"head.b{i}"])
            if i < 2:
                x = tape.relu(x)
        return tape.sigmoid(x)


def _check_unit(name: str, vectors: np.ndarray) -> None:
    off = np.abs(np.linalg.norm(vectors, axis=1) - 1.0)
    if np.any(off > 1e-6) or not np.all(np.isfinite(off)):
        raise ContractViolation(f"{name} must be unit length (row {int(np.argmax(off))} is off by {off.max():.3g})")


def texture_eval(tex: TextureField, position, normal, view_dir, chunk: int = EVAL_CHUNK) -> np.ndarray:
    single = np.asarray(position).ndim == 1
    p = np.atleast_2d(np.asarray(position, dtype=np.float64))
    n = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    v = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    _check_unit("normal", n)
    _check_unit("view direction", v)
    out = np.empty((len(p), 3))
    for start in range(0, len(p), chunk):
        tape = Tape()
        sl = slice(start, start + chunk)
        out[sl] = tex.rgb_on_tape(tape, tex.bind(tape, trainable=False), p[sl], n[sl], v[sl]).value
    return out[0] if single else out


# ---- Ellipsoid warm-up ------------------------------------------------------

@dataclass
class WarmupResult:
    net: SdfNetwork
    final_loss: float
    losses: List[float] = field(default_factory=list)
    converged: bool = True


def probe_error(net: SdfNetwork, target, n: int = 4096) -> float:
    """Mean |s - sdf*| over the fixed probe set."""
    pts = probe_points(n, net.bbox, seed=0)
    s, _ = evaluate_sdf(net, pts)
    return float(np.mean(np.abs(s - target.sdf(pts))))


def init_ellipsoid(net: SdfNetwork, semi_axes=(0.35, 0.35, 0.35), iters: int = 500, seed: int = 0,
                   adam: AdamSettings = AdamSettings(lr_tables=1e-2, lr_mlp=5e-3), samples: int = 4096,
                   near_fraction: float = 0.25, offset_weight: float = 1.0,
                   tolerance: float = 0.01) -> WarmupResult:
    """
    Fit s to the ellipsoid distance bound and pull offsets toward zero.
    Trains `net` in place. Missing the tolerance is logged, not raised.
    """
    axes = np.asarray(semi_axes, dtype=np.float64)
    lo, hi = net.bbox
    if axes.shape != (3,) or np.any(axes <= 0) or np.any(axes >= 0.5 * (hi - lo)):
        raise ConfigError(f"ellipsoid semi-axes must be positive and fit in the domain, got {semi_axes}")
    target = Ellipsoid(tuple(axes))
    losses: List[float] = []
    if iters > 0:
        state = adam_for(net.params, adam)
        for it in range(iters):
            pts, sdf_star = sample_batch(target, samples, near_fraction, net.bbox, batch_rng(seed, WARMUP_STAGE, it))
            tape = Tape()
            nodes = net.bind(tape)
            s, delta = net.vertex_on_tape(tape, nodes, pts)
            fit = tape.mean(tape.abs(tape.sub(s, tape.const(sdf_star))))
            reg = tape.mean(tape.square(tape.scale(delta, 1.0 / net.cell)))
            loss = tape.add(fit, tape.scale(reg, offset_weight))
            if not np.isfinite(loss.value):
                raise NumericalAbort("non-finite warm-up loss", iteration=it)
            losses.append(float(loss.value))
            state = net.apply_adam(net.named_grads(backward(tape, loss), nodes), state)

    final = probe_error(net, target)
    converged = final < tolerance
    if not converged:
        logger.warning("ellipsoid warm-up did not converge: probe error %.4g after %d iterations", final, iters)
    else:
        logger.info("ellipsoid warm-up done: probe error %.4g after %d iterations", final, iters)
    return WarmupResult(net=net, final_loss=final, losses=losses, converged=converged)
