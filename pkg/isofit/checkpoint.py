# isofit/checkpoint.py
"""
Network checkpoints.

Layout (little-endian):
  "MTFK", version u32, kind u32 (1 sdf, 2 texture),
  levels, table_size, features, n_min u32, growth f64,
  bbox lo/hi f64, offset_bound f64, resolution u32, hidden u32,
  array count u32, then per array: ndim u32 + dims u32 each,
  then every parameter buffer as float64 in declaration order.
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .config import HashGridSettings, NetworkSettings, TextureSettings
from .errors import InputError
from .networks import SdfNetwork, TextureField

logger = logging.getLogger(__name__)

MAGIC = b"MTFK"
VERSION = 1
KIND_SDF, KIND_TEXTURE = 1, 2
_HEADER = struct.Struct("<4sII IIII d dd d II I")

Network = Union[SdfNetwork, TextureField]


def save_checkpoint(net: Network, path: Union[str, Path]) -> Path:
    path = Path(path)
    enc = net.encoding
    if isinstance(net, SdfNetwork):
        kind, bbox, bound, resolution, hidden = KIND_SDF, net.bbox, net.settings.offset_bound, net.resolution, net.settings.hidden
    else:
        kind, bbox, bound, resolution, hidden = KIND_TEXTURE, net.bbox, 0.0, 0, net.hidden
    arrays = list(net.params.values())
    chunks = [_HEADER.pack(MAGIC, VERSION, kind, enc.levels, enc.table_size, enc.features, enc.n_min,
                           enc.growth, bbox[0], bbox[1], bound, resolution, hidden, len(arrays))]
    for a in arrays:
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
    for a in arrays:
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info("wrote checkpoint %s (%d parameters)", path, net.n_params)
    return path


def load_checkpoint(path: Union[str, Path]) -> Network:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise InputError(f"{path}: truncated checkpoint header")
    (magic, version, kind, levels, table_size, features, n_min, growth,
     lo, hi, bound, resolution, hidden, count) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise InputError(f"{path}: not a version {VERSION} checkpoint")
    grid = HashGridSettings(levels=levels, n_min=n_min, growth=growth, table_size=table_size, features=features)
    if kind == KIND_SDF:
        net: Network = SdfNetwork.create(NetworkSettings(hash_grid=grid, hidden=hidden, offset_bound=bound,
                                                         bbox=(lo, hi)), resolution=resolution)
    elif kind == KIND_TEXTURE:
        net = TextureField.create(TextureSettings(hidden=hidden, hash_grid=grid), bbox=(lo, hi))
    else:
        raise InputError(f"{path}: unknown network kind {kind}")

    offset = _HEADER.size
    shapes = []
    try:
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, offset)
            shapes.append(struct.unpack_from(f"<{ndim}I", data, offset + 4))
            offset += 4 + 4 * ndim
        expected = [tuple(a.shape) for a in net.params.values()]
        if [tuple(s) for s in shapes] != expected:
            raise InputError(f"{path}: layer sizes do not match the header")
        params = {}
        for name, shape in zip(net.params, shapes):
            size = int(np.prod(shape))
            params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
            offset += 8 * size
    except (struct.error, ValueError) as e:
        raise InputError(f"{path}: truncated checkpoint ({e})") from e
    if offset != len(data):
        raise InputError(f"{path}: {len(data) - offset} trailing bytes")
    net.set_params(params)
    return net
