"""Inversion attack models: point regression (PR), voxel occupancy
classification (VOC), and block-wise supervised VOC ("concretizer").

The inverter mirrors the backbone. Up block ``i`` maps level ``i`` back to
level ``i - 1`` with a transposed sparse convolution (plus two submanifold
layers for ``i >= 2``). Supervision boundaries ("splits") partition the up
blocks into segments. Each segment ends in a 1-channel occupancy head, and
between segments the features are masked to the cells the head keeps.
"""
from dataclasses import dataclass
import csv
import io
import math

import numpy as np

from .backbone import BackboneSpec, forward_with_taps
from .losses import FocalParams, block_loss, dense_target_l2
from .sparse import Adam, ConvLayerSpec, Module, SparseConv, no_grad
from .sparse.layers import ConvBNReLU, subm
from .voxelgrid import OccupancyField, as_cloud, crop_range, devoxelize_centers, voxelize

METHODS = ("pr", "voc", "concretizer")

# (kernel, stride, padding) of up block i (index i - 1), (x, y, z) order
UP_GEOMETRY = (
    ((2, 2, 2), (2, 2, 2), (0, 0, 0)),
    ((2, 2, 2), (2, 2, 2), (0, 0, 0)),
    ((2, 2, 3), (2, 2, 2), (0, 0, 0)),
    ((1, 1, 3), (1, 1, 2), (0, 0, 0)),
)

MASK_THRESHOLD = 0.5

# "scene": BN normalizes each scene with its own statistics, in training and
# at inference alike; "running": inference uses running averages
NORM_STATS = ("scene", "running")

# focal alpha per inversion block (block 1 first), VoxelBackBone on KITTI
DEFAULT_ALPHA = {
    "voc": {1: (0.7,), 2: (0.75,), 3: (0.8,), 4: (0.825,)},
    "concretizer": {1: (0.7,), 2: (0.7, 0.75), 3: (0.7, 0.75, 0.75), 4: (0.7, 0.75, 0.75, 0.75)},
}

# desk corpus: level-0 alpha tuned per depth, and the coarse blocks, whose levels are far
# denser, use a balanced loss so fewer cells pass each mask
DESK_ALPHA = {
    "voc": DEFAULT_ALPHA["voc"],
    "concretizer": {1: (0.7,), 2: (0.875, 0.5), 3: (0.8, 0.5, 0.5), 4: (0.825, 0.5, 0.5, 0.5)},
}

ALPHA_TABLES = {"paper": DEFAULT_ALPHA, "desk": DESK_ALPHA}


def default_alpha(method, depth, n_blocks, table="paper"):
    """Focal alpha per inversion block for ``n_blocks`` blocks of a depth-``depth`` inverter."""
    if method == "pr":
        return ()
    alphas = ALPHA_TABLES[table]
    if method == "concretizer" and n_blocks == depth:
        return alphas["concretizer"][depth]
    if n_blocks == 1:
        return alphas["voc"][depth]
    return alphas["concretizer"][n_blocks]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class InverterSpec:
    method: str = "concretizer"
    depth: int = 4
    split_positions: tuple = None
    alpha_per_block: tuple = None
    beta: float = 1.0
    gamma: float = 2.0
    backbone: BackboneSpec = None
    norm_stats: str = "scene"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown inversion method {self.method!r}")
        if self.norm_stats not in NORM_STATS:
            raise ValueError(f"norm_stats must be one of {NORM_STATS}, got {self.norm_stats!r}")
        if self.backbone is None:
            object.__setattr__(self, "backbone", BackboneSpec(depth=self.depth))
        if not 1 <= self.depth <= self.backbone.depth:
            raise ValueError(f"inverter depth {self.depth} exceeds backbone depth {self.backbone.depth}")
        n = self.depth
        if self.split_positions is None:
            splits = tuple(range(n - 1, 0, -1)) if self.method == "concretizer" else ()
        else:
            splits = tuple(sorted({int(s) for s in self.split_positions}, reverse=True))
            if len(splits) != len(tuple(self.split_positions)):
                raise ValueError(f"duplicate split positions {self.split_positions}")
            bad = [s for s in splits if not 1 <= s <= n - 1]
            if bad:
                raise ValueError(
                    f"split positions {bad} are not downsampling boundaries; "
                    f"valid levels for depth {n} are 1..{n - 1}")
            if splits and self.method != "concretizer":
                raise ValueError(f"{self.method} is trained end-to-end and takes no split positions")
        object.__setattr__(self, "split_positions", splits)
        if self.method == "pr":
            object.__setattr__(self, "alpha_per_block", ())
            return
        n_seg = len(splits) + 1
        alpha = self.alpha_per_block
        if alpha is None:
            alpha = default_alpha(self.method, n, n_seg)
        alpha = tuple(float(a) for a in alpha)
        if len(alpha) != n_seg:
            raise ValueError(f"alpha_per_block has {len(alpha)} entries for {n_seg} inversion blocks")
        for a in alpha:
            FocalParams(a, self.gamma)
        object.__setattr__(self, "alpha_per_block", alpha)

    @property
    def boundaries(self):
        """Levels ``[N, s_1, ..., 0]`` delimiting the segments, coarse to fine."""
        return (self.depth,) + self.split_positions + (0,)

    @property
    def segments(self):
        """``(top, bottom)`` level pairs, coarse to fine."""
        b = self.boundaries
        return list(zip(b[:-1], b[1:]))

    def to_dict(self):
        return {"method": self.method, "depth": self.depth,
                "split_positions": list(self.split_positions),
                "alpha_per_block": list(self.alpha_per_block), "beta": self.beta,
                "gamma": self.gamma, "norm_stats": self.norm_stats,
                "backbone": self.backbone.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(method=d["method"], depth=d["depth"], split_positions=tuple(d["split_positions"]),
                   alpha_per_block=tuple(d["alpha_per_block"]), beta=d["beta"], gamma=d["gamma"],
                   backbone=BackboneSpec.from_dict(d["backbone"]),
                   norm_stats=d.get("norm_stats", "scene"))


def up_block_channels(bspec, i):
    """(c_in, c_out) of up block ``i``: f_i channels to f_{i-1} channels (block 1: first subm width)."""
    chans = bspec.level_channels()
    c_out = chans[i - 1] if i >= 2 else bspec.channel_plan[0][0]
    return chans[i], c_out


class UpBlock(Module):
    def __init__(self, bspec, i, seed, track_running_stats=False):
        super().__init__()
        kernel, stride, pad = UP_GEOMETRY[i - 1]
        c_in, c_out = up_block_channels(bspec, i)
        self.index = i
        self.fine_shape = bspec.level_shapes()[i - 1]
        self.up = ConvBNReLU(ConvLayerSpec(c_in, c_out, kernel, stride, pad, "inverse_up"),
                             f"up{i}.up", seed, track_running_stats)
        self.subms = []
        if i >= 2:
            for k in (1, 2):
                layer = ConvBNReLU(subm(c_out, c_out), f"up{i}.subm{k}", seed, track_running_stats)
                self.add_child(f"subm{k}", layer)
                self.subms.append(layer)
        self.c_out = c_out

    def __call__(self, x, counts=None):
        x = self.up(x, self.fine_shape)
        if counts is not None:
            counts.append((f"up{self.index}.up", "inverse_up", x.n_active, x.n_cells))
        for k, layer in enumerate(self.subms, start=1):
            x = layer(x)
            if counts is not None:
                counts.append((f"up{self.index}.subm{k}", "submanifold", x.n_active, x.n_cells))
        return x


class InversionModel(Module):
    def __init__(self, spec, seed=0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.up_blocks = {}
        for i in range(spec.depth, 0, -1):
            block = UpBlock(spec.backbone, i, seed, spec.norm_stats == "running")
            self.up_blocks[i] = self.add_child(f"up{i}", block)
        self.heads = {}
        for top, bottom in spec.segments:
            c = self.up_blocks[bottom + 1].c_out
            out = 3 if spec.method == "pr" else 1
            kind = "regression" if spec.method == "pr" else "classification"
            head = SparseConv(subm(c, out), f"{kind}{bottom + 1}", seed, bias=True)
            self.heads[bottom] = self.add_child(f"{kind}{bottom + 1}", head)

    def head_names(self):
        return [self.heads[b].name for _, b in self.spec.segments]

    def run_segment(self, top, bottom, x, counts=None):
        """Up blocks ``top .. bottom + 1`` on ``x``; returns ``(features, head output)``."""
        for i in range(top, bottom, -1):
            x = self.up_blocks[i](x, counts)
        return x, self.heads[bottom](x)


def build_inverter(spec, seed=0):
    return InversionModel(spec, seed)


def _mask(feats, logits, threshold=MASK_THRESHOLD):
    prob = 1.0 / (1.0 + np.exp(-logits.feats.data[:, 0].astype(np.float64)))
    keep = np.flatnonzero(prob >= threshold)
    if keep.size == feats.n_active:
        return feats.detached(fresh_cache=True)
    kept = feats.select(keep)
    return kept.detached(fresh_cache=True)


@dataclass
class Inversion:
    """Result of ``invert``: per-boundary occupancy fields and the final output."""

    levels: list
    final: object
    counts: list

    @property
    def final_occupancy(self):
        return self.final if isinstance(self.final, OccupancyField) else None


def invert(model, f_n, record_counts=False):
    """Chained inference from ``f_N``; cells with p < 0.5 are dropped between segments.

    Returns an ``Inversion`` whose ``levels`` hold one ``OccupancyField`` per
    segment boundary (coarse to fine). ``final`` is the level-0 occupancy
    field (voc/concretizer) or the 3-channel coordinate tensor (pr).
    """
    spec = model.spec
    want = spec.backbone.level_shapes()[spec.depth]
    if tuple(f_n.shape) != tuple(want):
        raise ValueError(f"f_N grid {tuple(f_n.shape)} does not match depth-{spec.depth} grid {want}")
    model.eval()
    counts = [] if record_counts else None
    levels = []
    x = f_n.detached(fresh_cache=True)
    with no_grad():
        for top, bottom in spec.segments:
            feats, out = model.run_segment(top, bottom, x, counts)
            if spec.method == "pr":
                return Inversion(levels, out, counts)
            occ = OccupancyField.from_logits(out)
            levels.append(occ)
            if bottom > 0:
                x = _mask(feats, out)
                if counts is not None:
                    counts.append((f"mask{bottom}", "mask", x.n_active, x.n_cells))
    return Inversion(levels, levels[-1], counts)


def pr_postprocess(cloud, grid, r_min=0.3):
    """Drop points outside the grid range or within ``r_min`` of the origin."""
    if r_min < 0:
        raise ValueError("r_min must be >= 0")
    cloud = crop_range(cloud, grid)
    norm = np.linalg.norm(cloud[:, :3].astype(np.float64), axis=1)
    return cloud[norm >= r_min]


def restore_points(final, grid, method, r_min=0.3):
    """Point cloud from an inversion's final output."""
    if method == "pr":
        xyz = final.feats.data[:, :3].astype(np.float64)
        cloud = as_cloud(np.column_stack([xyz, np.zeros(len(xyz))])) if len(xyz) else \
            np.zeros((0, 4), np.float32)
        return pr_postprocess(cloud, grid, r_min)
    return devoxelize_centers(final, grid, MASK_THRESHOLD)


def attack(model, backbone, cloud, voxel_seed=0, r_min=0.3):
    """Full attack on one cloud: voxelize, extract f_N, invert, restore points."""
    grid = model.spec.backbone.grid
    taps, _ = forward_with_taps(backbone, voxelize(cloud, grid, seed=voxel_seed))
    result = invert(model, taps[model.spec.depth - 1])
    return restore_points(result.final, grid, model.spec.method, r_min)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    schedule: str = "joint"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if self.schedule not in ("joint", "sequential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class SceneTargets:
    """Everything training needs from one scene, computed once."""

    levels: list

    @classmethod
    def from_cloud(cls, cloud, backbone, voxel_seed=0):
        f0 = voxelize(cloud, backbone.spec.grid, seed=voxel_seed)
        taps, _ = forward_with_taps(backbone, f0)
        return cls([f0.detached(fresh_cache=True)] + taps)


def _segment_loss(model, top, bottom, targets, alpha):
    spec = model.spec
    feats, out = model.run_segment(top, bottom, targets.levels[top])
    if spec.method == "pr":
        loss = dense_target_l2(out, targets.levels[0])
        return loss, None, loss
    gt = targets.levels[bottom]
    focal = FocalParams(alpha, spec.gamma)
    total, l_cls, l_reg = block_loss(bottom, out, gt, feats, gt, focal, spec.beta)
    return total, l_cls, l_reg


class TrainLog:
    FIELDS = ("epoch", "block", "loss_cls", "loss_reg", "total")

    def __init__(self):
        self.rows = []

    def add(self, epoch, block, loss_cls, loss_reg, total):
        self.rows.append({"epoch": epoch, "block": block, "loss_cls": loss_cls,
                          "loss_reg": loss_reg, "total": total})

    def series(self, block, key="total"):
        return [r[key] for r in self.rows if r["block"] == block]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r[k] is None else (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]))
                        for k in self.FIELDS})
        return buf.getvalue()


def train_inversion(model, backbone, corpus, config, targets=None, callback=None):
    """Train ``model`` against the frozen ``backbone`` on ``corpus`` (list of clouds).

    Concretizer segments are trained with teacher forcing: each starts from
    the true tapped feature at its top level. ``targets`` may carry
    precomputed ``SceneTargets`` for the corpus. Returns a ``TrainLog`` with
    one row per (epoch, inversion block); ``block`` is ``bottom + 1``.
    """
    if not corpus and not targets:
        raise ValueError("training corpus is empty")
    spec = model.spec
    if targets is None:
        targets = [SceneTargets.from_cloud(c, backbone) for c in corpus]
    segments = spec.segments
    alphas = {b: a for (_, b), a in zip(sorted(segments, key=lambda s: s[1]), spec.alpha_per_block)}
    model.train()
    log = TrainLog()
    if config.epochs == 0:
        return log
    params_by_segment = {b: _segment_params(model, top, b) for top, b in segments}
    if config.schedule == "joint":
        stages = [(segments, config.epochs)]
    else:
        stages = [([seg], config.epochs) for seg in segments]
    rng = np.random.default_rng(config.seed)
    offset = 0
    for active, epochs in stages:
        params = [p for _, b in active for p in params_by_segment[b]]
        opt = Adam(params, lr=config.lr)
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(targets)) if config.shuffle else np.arange(len(targets))
            sums = {b: [0.0, 0.0, 0.0] for _, b in active}
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                batch = order[start:start + config.batch_size]
                for idx in batch:
                    total = None
                    for top, bottom in active:
                        seg_total, l_cls, l_reg = _segment_loss(model, top, bottom, targets[idx],
                                                                alphas.get(bottom))
                        value = seg_total.item()
                        if not math.isfinite(value):
                            raise TrainingDiverged(
                                f"non-finite loss {value} at epoch {offset + epoch}, step {step}, "
                                f"block {bottom + 1}, scene {int(idx)}")
                        acc = sums[bottom]
                        acc[0] += l_cls.item() if l_cls is not None else float("nan")
                        acc[1] += l_reg.item() if l_reg is not None else 0.0
                        acc[2] += value
                        total = seg_total if total is None else total + seg_total
                    (total * (1.0 / len(batch))).backward()
                opt.step()
            n = len(targets)
            for top, bottom in active:
                c, r, t = (v / n for v in sums[bottom])
                has_reg = spec.method != "pr" and bottom >= 1
                log.add(offset + epoch, bottom + 1, None if spec.method == "pr" else c,
                        r if has_reg else (t if spec.method == "pr" else None), t)
            if callback is not None:
                callback(offset + epoch, log)
        offset += epochs
    model.eval()
    return log


def _segment_params(model, top, bottom):
    params = []
    for i in range(top, bottom, -1):
        params.extend(model.up_blocks[i].parameters())
    params.extend(model.heads[bottom].parameters())
    return params
