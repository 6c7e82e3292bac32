"""Command-line entry point: ``voxinv <subcommand> ...``.

Exit codes: 0 success, 1 contract violation (bad flags, invalid config or
inputs), 2 IO error (missing or corrupt files).
"""
import argparse
from dataclasses import dataclass, field
import glob
import json
import os
import sys

from . import __version__
from .backbone import forward_with_taps, voi_profile
from .config import ConfigError, config_hash, load_config
from .defense import PerturbationSpec, defense_sweep, sweep_csv
from .io import CheckpointError, _atomic_write, load_checkpoint, read_xyzi, save_checkpoint, write_xyzi
from .inverter import attack
from .metrics import evaluate
from .pipeline import default_scene_spec, prepare_backbone, train_attack
from .scenes import generate_scene
from .sparse import set_threads
from .voxelgrid import voxelize


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    code: int
    artifacts: list = field(default_factory=list)
    summary: str = ""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _provenance(cfg, seed):
    return {"tool": "voxinv", "version": __version__, "seed": seed,
            "config_hash": config_hash(cfg) if cfg is not None else None}


def _header_lines(prov):
    return [f"{k}={v}" for k, v in prov.items()]


def _write_text(path, text):
    _atomic_write(path, [text.encode()])


def _write_json(path, payload):
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolve(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    print(f"# resolved config (hash {config_hash(cfg)}, seed {cfg['seed']}):")
    print(json.dumps(cfg, sort_keys=True))
    return cfg


def _scene_files(spec):
    """A directory of .bin files, a glob, or a single file."""
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "*.bin")))
    else:
        paths = sorted(glob.glob(spec))
    if not paths:
        raise FileNotFoundError(f"no XYZI scenes found at {spec}")
    return paths


def cmd_gen_scenes(args):
    cfg = _resolve(args)
    if args.count < 0:
        raise ValueError("--count must be >= 0")
    os.makedirs(args.out_dir, exist_ok=True)
    out = []
    for i in range(args.count):
        seed = cfg["seed"] + i
        path = os.path.join(args.out_dir, f"scene_{i:04d}.bin")
        write_xyzi(generate_scene(default_scene_spec(cfg, seed)), path)
        out.append(path)
    manifest = os.path.join(args.out_dir, "scenes.json")
    _write_json(manifest, {"provenance": _provenance(cfg, cfg["seed"]),
                           "scenes": [os.path.basename(p) for p in out]})
    return CommandResult(0, out + [manifest], f"wrote {len(out)} scenes to {args.out_dir}")


def cmd_train(args):
    cfg = _resolve(args)
    corpus = [read_xyzi(p) for p in _scene_files(args.scenes)]

    def progress(epoch, log):
        rows = [r for r in log.rows if r["epoch"] == epoch]
        print(f"epoch {epoch}: " + " ".join(f"block{r['block']}={r['total']:.5g}" for r in rows),
              flush=True)

    bundle, log = train_attack(cfg, corpus, method=args.method, depth=args.depth,
                               epochs=args.epochs, callback=progress)
    prov = _provenance(cfg, cfg["seed"])
    save_checkpoint(bundle, args.out_ckpt, {"provenance": prov, "config": cfg})
    log_path = args.out_ckpt + ".log.csv"
    _write_text(log_path, "".join(f"# {line}\n" for line in _header_lines(prov)) + log.to_csv())
    return CommandResult(0, [args.out_ckpt, log_path], f"trained {args.method} depth {bundle.inverter.spec.depth}")


def cmd_invert(args):
    bundle = load_checkpoint(args.ckpt)
    cloud = read_xyzi(args.scene)
    restored = attack(bundle.inverter, bundle.backbone, cloud)
    write_xyzi(restored, args.out_cloud)
    return CommandResult(0, [args.out_cloud], f"restored {len(restored)} points")


def cmd_eval(args):
    if args.threshold_cm <= 0:
        raise ValueError("--threshold-cm must be positive")
    gt, restored = read_xyzi(args.gt), read_xyzi(args.restored)
    rep = evaluate(gt, restored, args.threshold_cm / 100.0)
    payload = rep.as_dict(centimeters=True)
    payload["provenance"] = _provenance(None, None)
    _write_json(args.out_json, payload)
    return CommandResult(0, [args.out_json], f"CD {payload['cd_cm']} cm, F1 {rep.f1:.4f}")


def cmd_profile_voi(args):
    cfg = _resolve(args)
    backbone = prepare_backbone(cfg)
    cloud = read_xyzi(args.scene)
    _, trace = forward_with_taps(backbone, voxelize(cloud, backbone.spec.grid))
    text = "".join(f"# {line}\n" for line in _header_lines(_provenance(cfg, cfg["seed"])))
    _write_text(args.out_csv, text + voi_profile(trace))
    return CommandResult(0, [args.out_csv], f"profiled {len(trace.records)} layers")


def cmd_defense_sweep(args):
    cfg = _resolve(args)
    bundle = load_checkpoint(args.ckpt)
    corpus = [read_xyzi(p) for p in _scene_files(args.scenes)]
    d = cfg["defense"]
    specs = [PerturbationSpec(kind, m, d["seed"]) for kind, mags in d["sweeps"].items() for m in mags]
    rows = defense_sweep(bundle.backbone, bundle.inverter, corpus, specs)
    _write_text(args.out_csv, sweep_csv(rows, _header_lines(_provenance(cfg, d["seed"]))))
    return CommandResult(0, [args.out_csv], f"{len(rows)} sweep rows")


def build_parser():
    p = _Parser(prog="voxinv", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="kernel threads (1 is bit-reproducible)")
    p.add_argument("--version", action="version", version=f"voxinv {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_, parents=[common])
        s.set_defaults(fn=fn)
        return s

    s = add("gen-scenes", cmd_gen_scenes, "write synthetic XYZI scenes")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int)

    s = add("train", cmd_train, "train an inversion model against the configured backbone")
    s.add_argument("--config")
    s.add_argument("--method", choices=("pr", "voc", "concretizer"), required=True)
    s.add_argument("--depth", type=int)
    s.add_argument("--scenes", required=True, help="directory of .bin files or a glob")
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)

    s = add("invert", cmd_invert, "restore a point cloud from a scene's tapped feature")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out-cloud", required=True)

    s = add("eval", cmd_eval, "CD / HD / F1 between two XYZI clouds")
    s.add_argument("--gt", required=True)
    s.add_argument("--restored", required=True)
    s.add_argument("--threshold-cm", type=float, required=True)
    s.add_argument("--out-json", required=True)

    s = add("profile-voi", cmd_profile_voi, "per-layer active-voxel counts of the backbone")
    s.add_argument("--config")
    s.add_argument("--scene", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--seed", type=int)

    s = add("defense-sweep", cmd_defense_sweep, "attack metrics under each configured perturbation")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--seed", type=int)
    return p


def run_cli(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "voxinv: error: a subcommand is required")
        set_threads(args.threads)
        result = args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return CommandResult(1, [], "usage error")
    except (OSError, CheckpointError) as e:
        print(f"voxinv: IO error: {e}", file=sys.stderr)
        return CommandResult(2, [], str(e))
    except (ConfigError, ValueError) as e:
        print(f"voxinv: error: {e}", file=sys.stderr)
        return CommandResult(1, [], str(e))
    print(result.summary)
    return result


def main(argv=None):
    sys.exit(run_cli(sys.argv[1:] if argv is None else argv).code)


if __name__ == "__main__":
    main()
