"""Run configuration: JSON files resolved against the "paper" or "desk" preset.

A config file is a JSON object with an optional ``preset`` (default "desk"),
an optional top-level ``seed``, and any of the sections ``grid``,
``backbone``, ``inverter``, ``train``, ``defense``. Keys missing from a
section come from the preset; keys the preset does not define are errors.
"""
import copy
import hashlib
import json
import numbers

from .backbone import BackboneSpec, DESK_GRID, PAPER_GRID
from .inverter import ALPHA_TABLES, InverterSpec, TrainConfig, default_alpha
from .voxelgrid import GridSpec

SECTIONS = ("grid", "backbone", "inverter", "train", "defense")


def _grid_section(grid):
    return {"origin": list(grid.origin), "voxel_size": list(grid.voxel_size),
            "shape": list(grid.shape), "max_points_per_voxel": grid.max_points_per_voxel}


_DEFENSE = {
    "sweeps": {"rotate_z": [0, 1, 2, 3, 4, 5], "noise_distributed": [0, 0.1, 0.2, 0.4]},
    "seed": 0,
    "cell_cap": 1 << 22,
}

PRESETS = {
    "paper": {
        "seed": 0,
        "grid": _grid_section(PAPER_GRID),
        "backbone": {"variant": "voxel", "depth": 4, "channel_plan": None, "seed": 0,
                     "calibration_scenes": 4},
        "inverter": {"method": "concretizer", "depth": 4, "split_positions": None,
                     "alpha_per_block": None, "alpha_table": "paper", "beta": 1.0, "gamma": 2.0,
                     "norm_stats": "scene"},
        "train": {"epochs": 150, "lr": 1e-4, "batch_size": 4, "seed": 0, "schedule": "joint",
                  "scenes": 30},
        "defense": _DEFENSE,
    },
    "desk": {
        "seed": 0,
        "grid": _grid_section(DESK_GRID),
        "backbone": {"variant": "voxel", "depth": 4, "channel_plan": None, "seed": 0,
                     "calibration_scenes": 4},
        "inverter": {"method": "concretizer", "depth": 4, "split_positions": None,
                     "alpha_per_block": None, "alpha_table": "desk", "beta": 1.0, "gamma": 2.0,
                     "norm_stats": "scene"},
        "train": {"epochs": 20, "lr": 2e-3, "batch_size": 1, "seed": 0, "schedule": "joint",
                  "scenes": 30},
        "defense": _DEFENSE,
    },
}

# key path -> expected kind; "num" accepts ints and floats, "?" suffix allows null
_TYPES = {
    "seed": "int",
    "grid.origin": "vec3", "grid.voxel_size": "vec3", "grid.shape": "ivec3",
    "grid.max_points_per_voxel": "int",
    "backbone.variant": "str", "backbone.depth": "int", "backbone.channel_plan": "pairs?",
    "backbone.seed": "int", "backbone.calibration_scenes": "int",
    "inverter.method": "str", "inverter.depth": "int", "inverter.split_positions": "ints?",
    "inverter.alpha_per_block": "nums?", "inverter.alpha_table": "str", "inverter.beta": "num", "inverter.gamma": "num",
    "inverter.norm_stats": "str",
    "train.epochs": "int", "train.lr": "num", "train.batch_size": "int", "train.seed": "int",
    "train.schedule": "str", "train.scenes": "int",
    "defense.sweeps": "sweeps", "defense.seed": "int", "defense.cell_cap": "int",
}


class ConfigError(ValueError):
    pass


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, numbers.Real) and not isinstance(v, bool)


def _check(path, kind, v):
    if kind.endswith("?"):
        if v is None:
            return
        kind = kind[:-1]
    ok = {
        "int": lambda: _is_int(v),
        "num": lambda: _is_num(v),
        "str": lambda: isinstance(v, str),
        "vec3": lambda: isinstance(v, list) and len(v) == 3 and all(map(_is_num, v)),
        "ivec3": lambda: isinstance(v, list) and len(v) == 3 and all(map(_is_int, v)),
        "ints": lambda: isinstance(v, list) and all(map(_is_int, v)),
        "nums": lambda: isinstance(v, list) and all(map(_is_num, v)),
        "pairs": lambda: isinstance(v, list) and all(
            isinstance(p, list) and len(p) == 2 and all(map(_is_int, p)) for p in v),
        "sweeps": lambda: isinstance(v, dict) and all(
            isinstance(m, list) and all(map(_is_num, m)) for m in v.values()),
    }[kind]()
    if not ok:
        raise ConfigError(f"{path}: expected {kind}, got {json.dumps(v)}")


def resolve_config(raw):
    """Fully resolved config dict from a parsed JSON object."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    cfg = copy.deepcopy(PRESETS[preset])
    for key, value in raw.items():
        if key == "preset":
            continue
        if key == "seed":
            _check("seed", _TYPES["seed"], value)
            cfg["seed"] = value
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section; expected one of {list(SECTIONS)}")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object, got {json.dumps(value)}")
        for k, v in value.items():
            path = f"{key}.{k}"
            if k not in cfg[key]:
                raise ConfigError(f"{path}: unknown key")
            _check(path, _TYPES[path], v)
            cfg[key][k] = v
    cfg = {"preset": preset, **cfg}
    build_specs(cfg)
    return cfg


def load_config(path=None):
    """Resolved config from a JSON file (``None`` gives the desk preset)."""
    if path is None:
        return resolve_config({})
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return resolve_config(raw)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def grid_spec(cfg):
    return GridSpec(**cfg["grid"])


def backbone_spec(cfg, depth=None):
    b = cfg["backbone"]
    return BackboneSpec(variant=b["variant"], depth=depth or b["depth"], preset=cfg["preset"],
                        grid=grid_spec(cfg), channel_plan=b["channel_plan"])


def inverter_spec(cfg, method=None, depth=None):
    """InverterSpec for ``method`` at ``depth``; unset alphas come from the preset's alpha table."""
    i = cfg["inverter"]
    method = method or i["method"]
    depth = depth or i["depth"]
    splits = None if i["split_positions"] is None else tuple(i["split_positions"])
    common = dict(method=method, depth=depth, split_positions=splits, beta=float(i["beta"]),
                  gamma=float(i["gamma"]), norm_stats=i["norm_stats"],
                  backbone=backbone_spec(cfg, max(depth, cfg["backbone"]["depth"])))
    alpha = i["alpha_per_block"]
    if alpha is None:
        if i["alpha_table"] not in ALPHA_TABLES:
            raise ValueError(f"alpha_table must be one of {sorted(ALPHA_TABLES)}, got {i['alpha_table']!r}")
        n_blocks = len(InverterSpec(**common).segments)
        alpha = default_alpha(method, depth, n_blocks, i["alpha_table"])
    return InverterSpec(alpha_per_block=tuple(alpha), **common)


def train_config(cfg, epochs=None):
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"] if epochs is None else epochs, lr=float(t["lr"]),
                       batch_size=t["batch_size"], seed=t["seed"], schedule=t["schedule"])


def build_specs(cfg):
    """Validate cross-field constraints by constructing every spec."""
    try:
        grid_spec(cfg)
        inverter_spec(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    from .defense import PerturbationSpec
    for kind, mags in cfg["defense"]["sweeps"].items():
        for m in mags:
            try:
                PerturbationSpec(kind, m)
            except ValueError as e:
                raise ConfigError(f"defense.sweeps.{kind}: {e}") from None
