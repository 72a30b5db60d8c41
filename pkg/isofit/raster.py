# isofit/raster.py
"""
Deterministic software rasterizer for evaluation images (mask, depth, normal, rgb).

Pixels are sampled at their centers. Every covered pixel of every triangle
becomes a fragment; the z-buffer keeps the nearest fragment per pixel, and
on equal depth the lower triangle index. No back-face culling.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .config import CameraSettings
from .errors import ContractViolation, InputError
from .mesh import TriMesh

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
NORMAL_MAGIC = b"MTFN\x00\x00\x00\x00"
NEAR = 1e-6
LARGE_TRIANGLE = 64   # bbox pixels above which a triangle is rasterized on its own


@dataclass(frozen=True)
class Camera:
    mode: str = "orthographic"
    position: Tuple[float, float, float] = (0.0, 0.0, 3.0)
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    width: int = 128
    height: int = 128
    fov_deg: float = 40.0
    half_extent: float = 1.0

    def __post_init__(self):
        if self.mode not in ("orthographic", "pinhole"):
            raise ContractViolation(f"unknown camera mode {self.mode!r}")
        if self.width < 1 or self.height < 1:
            raise ContractViolation("image dimensions must be positive")
        forward = np.subtract(self.look_at, self.position)
        if np.linalg.norm(forward) == 0:
            raise ContractViolation("camera position and look-at coincide")
        if np.linalg.norm(np.cross(forward / np.linalg.norm(forward), self.up)) < 1e-9:
            raise ContractViolation("camera up vector is parallel to the view direction")

    @classmethod
    def from_settings(cls, s: CameraSettings) -> "Camera":
        return cls(s.mode, tuple(s.position), tuple(s.look_at), tuple(s.up), s.width, s.height,
                   s.fov_deg, s.half_extent)

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors."""
        f = np.subtract(self.look_at, self.position).astype(np.float64)
        f /= np.linalg.norm(f)
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        return r, np.cross(r, f), f

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World -> (x right, y up, depth along the view axis)."""
        r, u, f = self.basis()
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        return np.stack([rel @ r, rel @ u, rel @ f], axis=-1)

    def to_pixels(self, cam: np.ndarray) -> np.ndarray:
        """Camera coordinates -> continuous pixel coordinates (x to the right, y down)."""
        W, H = self.width, self.height
        if self.mode == "orthographic":
            hy = self.half_extent
            hx = hy * W / H
            x, y = cam[:, 0] / hx, cam[:, 1] / hy
        else:
            t = np.tan(np.radians(self.fov_deg) / 2.0)
            z = np.maximum(cam[:, 2], NEAR)
            x, y = cam[:, 0] / (z * t * W / H), cam[:, 1] / (z * t)
        return np.stack([(x + 1.0) * 0.5 * W, (1.0 - y) * 0.5 * H], axis=-1)

    def view_directions(self, points: np.ndarray) -> np.ndarray:
        """Unit vectors from surface points toward the camera."""
        if self.mode == "orthographic":
            return np.tile(-self.basis()[2], (len(points), 1))
        d = np.asarray(self.position) - points
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class RenderTarget:
    mask: np.ndarray             # (H, W) bool
    depth: np.ndarray            # (H, W), +inf where empty
    normal: np.ndarray           # (H, W, 3) camera space, zero where empty
    rgb: Optional[np.ndarray] = None

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


# ---- Rasterization ----------------------------------------------------------

def _fragments_for(tri_ids: np.ndarray, xy: np.ndarray, bx0: np.ndarray, by0: np.ndarray,
                   dx: np.ndarray, dy: np.ndarray, W: int, H: int):
    """Test candidate pixel (bx0 + dx, by0 + dy) against each triangle; return covered fragments."""
    px, py = bx0 + dx, by0 + dy
    ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    tri_ids, px, py = tri_ids[ok], px[ok], py[ok]
    a, b, c = xy[tri_ids, 0], xy[tri_ids, 1], xy[tri_ids, 2]
    cx, cy = px + 0.5, py + 0.5
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    w0 = (b[:, 0] - cx) * (c[:, 1] - cy) - (b[:, 1] - cy) * (c[:, 0] - cx)
    w1 = (c[:, 0] - cx) * (a[:, 1] - cy) - (c[:, 1] - cy) * (a[:, 0] - cx)
    w2 = (a[:, 0] - cx) * (b[:, 1] - cy) - (a[:, 1] - cy) * (b[:, 0] - cx)
    safe = np.where(area == 0, 1.0, area)
    bary = np.stack([w0 / safe, w1 / safe, w2 / safe], axis=1)
    inside = (area != 0) & np.all(bary >= 0, axis=1)
    return tri_ids[inside], py[inside] * W + px[inside], bary[inside]


def _rasterize(xy: np.ndarray, W: int, H: int):
    """All covered (triangle, pixel, screen barycentric) fragments."""
    lo = np.floor(xy.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(xy.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], W - 1)
    hi[:, 1] = np.minimum(hi[:, 1], H - 1)
    span = hi - lo + 1
    visible = np.flatnonzero((span[:, 0] > 0) & (span[:, 1] > 0))
    big = visible[span[visible].prod(axis=1) > LARGE_TRIANGLE]
    small = visible[span[visible].prod(axis=1) <= LARGE_TRIANGLE]

    tris, pixels, barys = [], [], []
    if len(small):
        max_w, max_h = span[small].max(axis=0)
        for dy in range(int(max_h)):
            for dx in range(int(max_w)):
                sel = small[(span[small, 0] > dx) & (span[small, 1] > dy)]
                if len(sel) == 0:
                    continue
                t, p, b = _fragments_for(sel, xy, lo[sel, 0], lo[sel, 1], dx, dy, W, H)
                tris.append(t), pixels.append(p), barys.append(b)
    for t_id in big:
        gy, gx = np.mgrid[0:span[t_id, 1], 0:span[t_id, 0]]
        ids = np.full(gx.size, t_id)
        t, p, b = _fragments_for(ids, xy, lo[t_id, 0], lo[t_id, 1], gx.ravel(), gy.ravel(), W, H)
        tris.append(t), pixels.append(p), barys.append(b)
    if not tris:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    return np.concatenate(tris), np.concatenate(pixels), np.concatenate(barys)


def render(mesh: TriMesh, camera: Camera, tex=None) -> RenderTarget:
    W, H = camera.width, camera.height
    mask = np.zeros((H, W), dtype=bool)
    depth = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))
    rgb = np.zeros((H, W, 3)) if tex is not None else None
    if mesh.is_empty:
        return RenderTarget(mask, depth, normal, rgb)

    cam = camera.to_camera(mesh.vertices)
    tri = mesh.triangles
    keep = np.ones(len(tri), dtype=bool) if camera.mode == "orthographic" else (cam[tri, 2] > NEAR).all(axis=1)
    tri_keep = np.flatnonzero(keep)
    xy = camera.to_pixels(cam)[tri[tri_keep]]                         # (T, 3, 2)
    local, pix, bary = _rasterize(xy, W, H)
    if len(local) == 0:
        return RenderTarget(mask, depth, normal, rgb)
    t_ids = tri_keep[local]
    z = cam[tri[t_ids], 2]                                              # (F, 3)
    if camera.mode == "pinhole":
        # perspective-correct weights: 1/z interpolates linearly in screen space
        persp = bary / z
        frag_depth = 1.0 / persp.sum(axis=1)
        bary = persp * frag_depth[:, None]
    else:
        frag_depth = (bary * z).sum(axis=1)

    order = np.lexsort((t_ids, frag_depth, pix))
    first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]]
    pix, t_ids, bary, frag_depth = pix[first], t_ids[first], bary[first], frag_depth[first]

    rows, cols = np.divmod(pix, W)
    mask[rows, cols] = True
    depth[rows, cols] = frag_depth

    vn = mesh.vertex_normals()[tri[t_ids]]
    n = np.einsum("fc,fcd->fd", bary, vn)
    fallback = mesh.face_normals()[t_ids]
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(length > 1e-12, n / np.where(length > 1e-12, length, 1.0), fallback)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    r, u, f = camera.basis()
    normal[rows, cols] = np.stack([n @ r, n @ u, -(n @ f)], axis=1)

    if tex is not None:
        from .networks import texture_eval
        points = np.einsum("fc,fcd->fd", bary, mesh.vertices[tri[t_ids]])
        rgb[rows, cols] = texture_eval(tex, points, n, camera.view_directions(points))
    return RenderTarget(mask, depth, normal, rgb)


# ---- Metrics ----------------------------------------------------------------

def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def mask_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a, b = np.asarray(mask_a, dtype=bool), np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ContractViolation(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


# ---- Image files ------------------------------------------------------------

def depth_to_gray(depth: np.ndarray) -> np.ndarray:
    """Finite depths to 255 (nearest) .. 1 (farthest); empty pixels 0."""
    finite = np.isfinite(depth)
    out = np.zeros(depth.shape, dtype=np.uint8)
    if finite.any():
        d = depth[finite]
        span = d.max() - d.min()
        scaled = np.zeros_like(d) if span == 0 else (d - d.min()) / span
        out[finite] = np.round(255.0 - 254.0 * scaled).astype(np.uint8)
    return out


def write_pgm(gray: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8)).save(path, format="PPM")
    return path


def write_ppm(rgb: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PPM")
    return path


def read_image(path: Union[str, Path]) -> np.ndarray:
    """PGM / PPM as float values in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img, dtype=np.float64) / 255.0
    except OSError as e:
        raise InputError(f"{path}: unreadable image ({e})") from e


def write_normal_map(normal: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    H, W, _ = normal.shape
    path.write_bytes(NORMAL_MAGIC + struct.pack("<II", W, H) + np.ascontiguousarray(normal, dtype="<f8").tobytes())
    return path


def read_normal_map(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"normal map not found: {path}")
    data = path.read_bytes()
    if data[:8] != NORMAL_MAGIC or len(data) < 16:
        raise InputError(f"{path}: not a normal map")
    W, H = struct.unpack_from("<II", data, 8)
    if len(data) != 16 + 8 * W * H * 3:
        raise InputError(f"{path}: size does not match {W}x{H}")
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(H, W, 3)


def write_render(target: RenderTarget, out_dir: Union[str, Path], prefix: str) -> List[Path]:
    """mask / depth PGM, raw normal map and, with a texture, an RGB PPM."""
    out_dir = Path(out_dir)
    paths = [
        write_pgm(target.mask.astype(np.uint8) * 255, out_dir / f"{prefix}_mask.pgm"),
        write_pgm(depth_to_gray(target.depth), out_dir / f"{prefix}_depth.pgm"),
        write_normal_map(target.normal, out_dir / f"{prefix}_normal.mtfn"),
    ]
    if target.rgb is not None:
        paths.append(write_ppm(target.rgb, out_dir / f"{prefix}_rgb.ppm"))
    logger.info("wrote %d images for %s", len(paths), prefix)
    return paths
