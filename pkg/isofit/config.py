# isofit/config.py
"""
Run configuration: one JSON file per run, validated against a per-command
schema (unknown keys rejected), then frozen into dataclasses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from jsonschema import Draft202012Validator

from .errors import ConfigError, InputError

SLOT_NAMES = ("style", "object", "etc")


@dataclass(frozen=True)
class HashGridSettings:
    levels: int = 8
    n_min: int = 16
    growth: float = 1.3819
    table_size: int = 2 ** 14
    features: int = 2


@dataclass(frozen=True)
class NetworkSettings:
    hash_grid: HashGridSettings = HashGridSettings()
    hidden: int = 64
    offset_bound: float = 0.45
    bbox: Tuple[float, float] = (-0.5, 0.5)


@dataclass(frozen=True)
class AdamSettings:
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_for(self, name: str) -> float:
        # hash-grid feature tables are named "table.<level>"
        return self.lr_tables if name.startswith("table.") else self.lr_mlp


@dataclass(frozen=True)
class StageSettings:
    resolution: int
    iters: int
    w_sdf: float = 1.0
    w_eik: float = 0.1
    near_fraction: float = 0.25


@dataclass(frozen=True)
class WarmupSettings:
    semi_axes: Tuple[float, float, float] = (0.35, 0.35, 0.35)
    iters: int = 500
    enabled: bool = True
    adam: AdamSettings = AdamSettings(lr_tables=1e-2, lr_mlp=5e-3)


@dataclass(frozen=True)
class TextureSettings:
    iters: int = 500
    hidden: int = 256
    samples: int = 4096
    hash_grid: HashGridSettings = HashGridSettings()
    adam: AdamSettings = AdamSettings()


DEFAULT_SCHEDULE = (
    StageSettings(resolution=64, iters=5000, near_fraction=0.15),
    StageSettings(resolution=128, iters=5000, near_fraction=0.25),
)


@dataclass(frozen=True)
class FitSettings:
    target: Mapping[str, Any]
    network: NetworkSettings = NetworkSettings()
    warmup: WarmupSettings = WarmupSettings()
    schedule: Tuple[StageSettings, ...] = DEFAULT_SCHEDULE
    mode: str = "geometry"
    adam: AdamSettings = AdamSettings()
    samples: int = 4096
    eik_samples: int = 1024
    chamfer_every: int = 250
    chamfer_samples: int = 100_000
    max_resolution: int = 256
    extract_resolution: Optional[int] = None
    texture: Optional[TextureSettings] = None
    progress: bool = False


@dataclass(frozen=True)
class OracleSettings:
    name: str = "quadratic"
    target: Any = "hidden"  # "hidden" or a path to one line of D floats
    hidden_scale: float = 1.0
    noise_std: float = 0.01
    pool: str = "mean"


@dataclass(frozen=True)
class InversionSettings:
    vocabulary: str
    queries: Mapping[str, str]
    subspace_dim: int = 8
    temperature: float = 0.1
    top_k: int = 16
    generations: int = 200
    sigma0: float = 0.5
    optimize_slots: Tuple[str, ...] = SLOT_NAMES
    sequential: bool = False
    workers: int = 1
    noise_key: int = 0
    oracle: OracleSettings = OracleSettings()


@dataclass(frozen=True)
class CameraSettings:
    mode: str = "orthographic"
    position: Tuple[float, float, float] = (0.0, 0.0, 3.0)
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    width: int = 128
    height: int = 128
    fov_deg: float = 40.0
    half_extent: float = 1.0


@dataclass(frozen=True)
class RenderSettings:
    mesh: str
    cameras: Tuple[CameraSettings, ...]
    texture: Optional[str] = None


@dataclass(frozen=True)
class EvalSettings:
    mesh: Optional[str] = None
    target: Optional[Mapping[str, Any]] = None
    reference_mesh: Optional[str] = None
    chamfer_samples: int = 20_000
    validate: bool = True
    image_pairs: Tuple[Tuple[str, str], ...] = ()
    bbox: Tuple[float, float] = (-0.5, 0.5)


@dataclass(frozen=True)
class ExtractSettings:
    checkpoint: str
    resolution: int = 128


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    out: str
    settings: Any = field(default=None)
    base_dir: str = "."   # relative input paths resolve against the config file's folder

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


# ============================================================================
# SCHEMAS
# ============================================================================

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_POS = {"type": "number", "exclusiveMinimum": 0}

_HASH_GRID = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "levels": {"type": "integer", "minimum": 1},
        "n_min": {"type": "integer", "minimum": 1},
        "growth": {"type": "number", "minimum": 1},
        "table_size": {"type": "integer", "minimum": 8},
        "features": {"type": "integer", "minimum": 1},
    },
}

_ADAM = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr_tables": _POS, "lr_mlp": _POS,
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": _POS,
    },
}

_COLOR = {
    "type": "object",
    "required": ["type"],
    "properties": {"type": {"enum": ["constant", "axis-gradient", "normal"]}},
}

# Shapes nest (composites), so only the discriminator is checked here;
# shapes.shape_from_spec validates the rest.
_SHAPE = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["sphere", "ellipsoid", "torus", "box", "capsule",
                          "union", "intersection", "difference"]},
        "color": _COLOR,
    },
}

_STAGE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["resolution", "iters"],
    "properties": {
        "resolution": {"type": "integer", "minimum": 2},
        "iters": {"type": "integer", "minimum": 0},
        "w_sdf": {"type": "number", "minimum": 0},
        "w_eik": {"type": "number", "minimum": 0},
        "near_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

_COMMON = {
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string"},
}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "target"],
    "properties": {
        **_COMMON,
        "target": _SHAPE,
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hash_grid": _HASH_GRID,
                "hidden": {"type": "integer", "minimum": 1},
                "offset_bound": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "warmup": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "semi_axes": {**_VEC3, "items": _POS},
                "iters": {"type": "integer", "minimum": 0},
                "enabled": {"type": "boolean"},
                "adam": _ADAM,
            },
        },
        "schedule": {"type": "array", "items": _STAGE, "minItems": 1},
        "mode": {"enum": ["geometry", "surface"]},
        "adam": _ADAM,
        "samples": {"type": "integer", "minimum": 8},
        "eik_samples": {"type": "integer", "minimum": 0},
        "chamfer_every": {"type": "integer", "minimum": 1},
        "chamfer_samples": {"type": "integer", "minimum": 16},
        "max_resolution": {"type": "integer", "minimum": 2},
        "extract_resolution": {"type": "integer", "minimum": 2},
        "texture": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iters": {"type": "integer", "minimum": 0},
                "hidden": {"type": "integer", "minimum": 1},
                "samples": {"type": "integer", "minimum": 8},
                "hash_grid": _HASH_GRID,
                "adam": _ADAM,
            },
        },
        "progress": {"type": "boolean"},
    },
}

INVERT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "vocabulary", "queries"],
    "properties": {
        **_COMMON,
        "vocabulary": {"type": "string"},
        "queries": {
            "type": "object",
            "additionalProperties": False,
            "required": ["style", "object"],
            "properties": {"style": {"type": "string"}, "object": {"type": "string"}},
        },
        "subspace_dim": {"type": "integer", "minimum": 1},
        "temperature": _POS,
        "top_k": {"type": "integer", "minimum": 1},
        "generations": {"type": "integer", "minimum": 1},
        "sigma0": _POS,
        "optimize_slots": {
            "type": "array", "items": {"enum": list(SLOT_NAMES)},
            "minItems": 1, "uniqueItems": True,
        },
        "sequential": {"type": "boolean"},
        "workers": {"type": "integer", "minimum": 1},
        "noise_key": {"type": "integer"},
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["quadratic", "cosine", "noisy-proxy"]},
                "target": {"type": "string"},
                "hidden_scale": _POS,
                "noise_std": {"type": "number", "minimum": 0},
                "pool": {"enum": ["mean", "concat"]},
            },
        },
    },
}

_CAMERA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["orthographic", "pinhole"]},
        "position": _VEC3, "look_at": _VEC3, "up": _VEC3,
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
        "half_extent": _POS,
    },
}

RENDER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "mesh", "cameras"],
    "properties": {
        **_COMMON,
        "mesh": {"type": "string"},
        "cameras": {"type": "array", "items": _CAMERA, "minItems": 1},
        "texture": {"type": "string"},
    },
}

EVAL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        **_COMMON,
        "mesh": {"type": "string"},
        "target": _SHAPE,
        "reference_mesh": {"type": "string"},
        "chamfer_samples": {"type": "integer", "minimum": 16},
        "validate": {"type": "boolean"},
        "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "image_pairs": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        },
    },
}

EXTRACT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "checkpoint"],
    "properties": {
        **_COMMON,
        "checkpoint": {"type": "string"},
        "resolution": {"type": "integer", "minimum": 2},
    },
}

SCHEMAS = {
    "fit-shape": FIT_SCHEMA,
    "invert": INVERT_SCHEMA,
    "render": RENDER_SCHEMA,
    "eval": EVAL_SCHEMA,
    "extract-mesh": EXTRACT_SCHEMA,
}


# ---- Small helpers ----------------------------------------------------------

def _pick(cls, raw: Mapping[str, Any], **nested):
    """Build dataclass `cls` from the keys of `raw` it declares."""
    kwargs = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__ and k not in nested}
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    kwargs.update({k: v for k, v in nested.items() if v is not None})
    return cls(**kwargs)


def _hash_grid(raw: Optional[Mapping]) -> Optional[HashGridSettings]:
    return None if raw is None else _pick(HashGridSettings, raw)


def _adam(raw: Optional[Mapping], default: AdamSettings = AdamSettings()) -> AdamSettings:
    return default if raw is None else replace(default, **raw)


def _fit_settings(raw: Mapping[str, Any]) -> FitSettings:
    net_raw = raw.get("network", {})
    network = _pick(NetworkSettings, net_raw, hash_grid=_hash_grid(net_raw.get("hash_grid")))
    warm_raw = raw.get("warmup", {})
    warmup = _pick(WarmupSettings, warm_raw,
                   adam=_adam(warm_raw.get("adam"), WarmupSettings().adam) if "adam" in warm_raw else None)
    schedule = tuple(StageSettings(**s) for s in raw["schedule"]) if "schedule" in raw else DEFAULT_SCHEDULE
    texture = None
    if "texture" in raw:
        t = raw["texture"]
        texture = _pick(TextureSettings, t, hash_grid=_hash_grid(t.get("hash_grid")),
                        adam=_adam(t.get("adam")) if "adam" in t else None)
    settings = _pick(FitSettings, raw, network=network, warmup=warmup, schedule=schedule,
                     adam=_adam(raw.get("adam")) if "adam" in raw else None, texture=texture)
    return replace(settings, target=raw["target"])


def _check_schedule(settings: FitSettings) -> None:
    resolutions = [s.resolution for s in settings.schedule]
    if any(b < a for a, b in zip(resolutions, resolutions[1:])):
        raise ConfigError(f"schedule resolutions must be non-decreasing, got {resolutions}")
    if max(resolutions) > settings.max_resolution:
        raise ConfigError(f"stage resolution {max(resolutions)} exceeds max_resolution {settings.max_resolution}")


def _invert_settings(raw: Mapping[str, Any]) -> InversionSettings:
    oracle = _pick(OracleSettings, raw.get("oracle", {}))
    return _pick(InversionSettings, raw, oracle=oracle, queries=dict(raw["queries"]))


def _render_settings(raw: Mapping[str, Any]) -> RenderSettings:
    cameras = tuple(_pick(CameraSettings, c) for c in raw["cameras"])
    return _pick(RenderSettings, raw, cameras=cameras)


_BUILDERS = {
    "fit-shape": _fit_settings,
    "invert": _invert_settings,
    "render": _render_settings,
    "eval": lambda raw: _pick(EvalSettings, raw, target=raw.get("target")),
    "extract-mesh": lambda raw: _pick(ExtractSettings, raw),
}


# ---- Public API -------------------------------------------------------------

def validate_config(raw: Mapping[str, Any], command: str) -> None:
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    errors = sorted(Draft202012Validator(SCHEMAS[command]).iter_errors(raw), key=lambda e: [str(p) for p in e.path])
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.path) or "<root>"
        raise ConfigError(f"{where}: {first.message}")


def apply_overrides(raw: Mapping[str, Any], command: str, seed: Optional[int] = None,
                    out: Optional[str] = None, iters: Optional[int] = None) -> Dict[str, Any]:
    """Flag overrides for top-level keys (--seed, --out, --iters)."""
    merged = json.loads(json.dumps(raw))
    if seed is not None:
        merged["seed"] = seed
    if out is not None:
        merged["out"] = out
    if iters is not None:
        if command == "fit-shape":
            stages = merged.get("schedule") or [
                {"resolution": s.resolution, "iters": s.iters, "near_fraction": s.near_fraction}
                for s in DEFAULT_SCHEDULE
            ]
            merged["schedule"] = [{**s, "iters": iters} for s in stages]
        elif command == "invert":
            merged["generations"] = iters
        else:
            raise ConfigError(f"--iters does not apply to {command}")
    return merged


def build_run_config(raw: Mapping[str, Any], command: str, base_dir: str | Path = ".") -> RunConfig:
    validate_config(raw, command)
    settings = _BUILDERS[command](raw)
    if command == "fit-shape":
        _check_schedule(settings)
    return RunConfig(command=command, seed=int(raw["seed"]), out=raw.get("out", "runs/out"), settings=settings,
                     base_dir=str(base_dir))


def load_run_config(path: str | Path, command: str, **overrides) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_run_config(apply_overrides(raw, command, **overrides), command, base_dir=path.parent)
