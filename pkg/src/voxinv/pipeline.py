"""Config-driven assembly of the attack: calibrated backbone, trained inverter."""
from .backbone import build_backbone
from .config import backbone_spec, inverter_spec, train_config
from .inverter import build_inverter, train_inversion
from .io import AttackBundle
from .scenes import SceneSpec, scene_corpus

# calibration scenes are drawn from a seed range disjoint from training corpora
CALIBRATION_SEED_OFFSET = 10000


def scene_overrides(cfg):
    """SceneSpec range matching the configured grid."""
    g = cfg["grid"]
    lower = tuple(g["origin"])
    upper = tuple(o + n * v for o, n, v in zip(g["origin"], g["shape"], g["voxel_size"]))
    return {"lower": lower, "upper": upper}


def config_corpus(cfg, count, base_seed=0):
    return scene_corpus(count, base_seed=base_seed, **scene_overrides(cfg))


def prepare_backbone(cfg, depth=None):
    b = cfg["backbone"]
    spec = backbone_spec(cfg, depth)
    calib = config_corpus(cfg, b["calibration_scenes"], CALIBRATION_SEED_OFFSET + b["seed"])
    return build_backbone(spec, seed=b["seed"], calibration_clouds=calib)


def train_attack(cfg, corpus, method=None, depth=None, epochs=None, targets=None, callback=None,
                 backbone=None):
    """``(AttackBundle, TrainLog)`` for one method at one depth."""
    ispec = inverter_spec(cfg, method, depth)
    if backbone is None:
        backbone = prepare_backbone(cfg, ispec.backbone.depth)
    model = build_inverter(ispec, seed=cfg["seed"])
    log = train_inversion(model, backbone, corpus, train_config(cfg, epochs), targets=targets,
                          callback=callback)
    return AttackBundle(backbone, model), log


def default_scene_spec(cfg, seed):
    return SceneSpec(seed=seed, **scene_overrides(cfg))
