# isofit/meshio.py
from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np

from .errors import InputError
from .mesh import TriMesh

logger = logging.getLogger(__name__)


def format_obj(mesh: TriMesh, normals: bool = False) -> str:
    """OBJ text: "v" lines with 17 significant digits, optional "vn", 1-based "f", LF endings."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    if normals:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertex_normals()]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.triangles + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.triangles + 1]
    return "\n".join(lines) + "\n" if lines else ""


def write_obj(mesh: TriMesh, path: Union[str, Path], normals: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(format_obj(mesh, normals))
    logger.info("wrote %s (%d vertices, %d triangles)", path, len(mesh.vertices), len(mesh.triangles))
    return path


def _index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        i = int(head)
    except ValueError:
        raise InputError(f"line {lineno}: bad face index {token!r}") from None
    i = i - 1 if i > 0 else n_vertices + i
    if not 0 <= i < n_vertices:
        raise InputError(f"line {lineno}: face index {token!r} out of range")
    return i


def parse_obj(text: str) -> TriMesh:
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, rest = parts[0], parts[1:]
        if tag == "v":
            try:
                vertices.append([float(v) for v in rest[:3]])
            except ValueError:
                raise InputError(f"line {lineno}: bad vertex {raw!r}") from None
            if len(vertices[-1]) != 3:
                raise InputError(f"line {lineno}: vertex needs 3 coordinates")
        elif tag == "f":
            if len(rest) < 3:
                raise InputError(f"line {lineno}: face needs at least 3 vertices")
            idx = [_index(t, len(vertices), lineno) for t in rest]
            # polygons are fanned from their first vertex
            faces += [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]
        elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
            continue
        else:
            raise InputError(f"line {lineno}: unsupported OBJ record {tag!r}")
    return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_obj(path: Union[str, Path]) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise InputError(f"mesh file not found: {path}")
    try:
        text = path.read_text()
    except UnicodeDecodeError as e:
        raise InputError(f"{path}: not a text OBJ file") from e
    try:
        return parse_obj(text)
    except InputError as e:
        raise InputError(f"{path}: {e}") from e
