"""Frozen voxel feature extractors (plain and residual) with per-layer taps.

Each of the four blocks is a stack of submanifold convolutions followed by
one strided sparse convolution; block ``i`` emits ``f_i``. Kernel, stride,
and padding follow the standard SECOND-style layout, written here in
(x, y, z) order: blocks 1-2 downsample with 3^3/stride 2/pad 1, block 3 keeps
z unpadded, and block 4 collapses z only with a (1, 1, 3) kernel.
"""
from dataclasses import dataclass, field
import csv
import io

from .sparse import ConvLayerSpec, Module, no_grad
from .sparse.autograd import add, relu
from .sparse.layers import BN_MOMENTUM, BatchNorm, ConvBNReLU, SparseConv, subm
from .voxelgrid import GridSpec, voxelize

VARIANTS = ("voxel", "voxel_res")

PAPER_GRID = GridSpec((0.0, -40.0, -3.0), (0.05, 0.05, 0.1), (1408, 1600, 40))
DESK_GRID = GridSpec((0.0, -8.0, -3.0), (0.125, 0.125, 0.125), (128, 128, 32))

CHANNEL_PLANS = {
    ("paper", "voxel"): ((16, 32), (32, 64), (64, 64), (64, 128)),
    ("paper", "voxel_res"): ((16, 32), (32, 64), (64, 128), (128, 128)),
    ("desk", "voxel"): ((8, 16), (16, 16), (16, 16), (16, 32)),
    ("desk", "voxel_res"): ((8, 16), (16, 16), (16, 16), (16, 32)),
}

# (kernel, stride, padding) of each block's downsampling layer, (x, y, z) order
DOWN_GEOMETRY = (
    ((3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ((3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ((3, 3, 3), (2, 2, 2), (1, 1, 0)),
    ((1, 1, 3), (1, 1, 2), (0, 0, 0)),
)

N_BLOCKS = len(DOWN_GEOMETRY)


@dataclass(frozen=True)
class BackboneSpec:
    variant: str = "voxel"
    depth: int = 4
    preset: str = "desk"
    grid: GridSpec = None
    channel_plan: tuple = None
    in_channels: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.preset not in ("paper", "desk"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if not 1 <= self.depth <= N_BLOCKS:
            raise ValueError(f"depth must be in [1, {N_BLOCKS}], got {self.depth}")
        if self.grid is None:
            object.__setattr__(self, "grid", PAPER_GRID if self.preset == "paper" else DESK_GRID)
        plan = self.channel_plan or CHANNEL_PLANS[(self.preset, self.variant)]
        plan = tuple((int(a), int(b)) for a, b in plan)
        if len(plan) < self.depth:
            raise ValueError(f"channel plan defines {len(plan)} blocks, depth is {self.depth}")
        object.__setattr__(self, "channel_plan", plan)
        if self.variant == "voxel_res":
            for j in range(1, self.depth):
                if plan[j][0] != plan[j - 1][1]:
                    raise ValueError("residual blocks need c_subm of block j == c_out of block j-1")
        self.level_shapes()

    def down_spec(self, block):
        """ConvLayerSpec of block ``block``'s downsampling layer (1-based)."""
        kernel, stride, pad = DOWN_GEOMETRY[block - 1]
        c_subm, c_out = self.channel_plan[block - 1]
        return ConvLayerSpec(c_subm, c_out, kernel, stride, pad, "sparse_down")

    def level_shapes(self):
        """Grid shape at levels 0..depth."""
        shapes = [tuple(self.grid.shape)]
        for b in range(1, self.depth + 1):
            shapes.append(self.down_spec(b).down_shape(shapes[-1]))
        return shapes

    def level_channels(self):
        """Channels of f_0..f_depth."""
        return [self.in_channels] + [self.channel_plan[b][1] for b in range(self.depth)]

    def to_dict(self):
        return {"variant": self.variant, "depth": self.depth, "preset": self.preset,
                "grid": self.grid.to_dict(), "channel_plan": [list(p) for p in self.channel_plan]}

    @classmethod
    def from_dict(cls, d):
        return cls(variant=d["variant"], depth=d["depth"], preset=d["preset"],
                   grid=GridSpec.from_dict(d["grid"]), channel_plan=d["channel_plan"])


@dataclass
class LayerRecord:
    name: str
    kind: str
    stride_level: int
    active: int
    total: int

    @property
    def density(self):
        return self.active / self.total if self.total else 0.0


@dataclass
class LayerTapTrace:
    records: list = field(default_factory=list)
    taps: list = field(default_factory=list)

    def log(self, name, kind, x):
        self.records.append(LayerRecord(name, kind, x.stride_level, x.n_active, x.n_cells))


class ResidualPair(Module):
    """Two submanifold conv-BN layers with an identity skip, then ReLU."""

    def __init__(self, channels, name, seed):
        super().__init__()
        self.conv1 = ConvBNReLU(subm(channels, channels), f"{name}.conv1", seed)
        self.conv2 = SparseConv(subm(channels, channels), f"{name}.conv2.conv", seed)
        self.bn2 = BatchNorm(channels, f"{name}.conv2.bn")
        self.name = name

    def __call__(self, x, trace=None):
        h = self.conv1(x)
        if trace is not None:
            trace.log(f"{self.name}.conv1", "submanifold", h)
        h = self.bn2(self.conv2(h))
        out = h.with_feats(relu(add(h.feats, x.feats)))
        if trace is not None:
            trace.log(f"{self.name}.conv2", "submanifold", out)
        return out


class Backbone(Module):
    def __init__(self, spec, seed=0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.blocks = []
        c_prev = spec.in_channels
        for b in range(1, spec.depth + 1):
            c_subm, _ = spec.channel_plan[b - 1]
            layers = []
            if spec.variant == "voxel":
                layers.append(("subm1", ConvBNReLU(subm(c_prev, c_subm), f"block{b}.subm1", seed)))
                layers.append(("subm2", ConvBNReLU(subm(c_subm, c_subm), f"block{b}.subm2", seed)))
            else:
                if b == 1:
                    layers.append(("stem", ConvBNReLU(subm(c_prev, c_subm), "block1.stem", seed)))
                for r in (1, 2):
                    layers.append((f"res{r}", ResidualPair(c_subm, f"block{b}.res{r}", seed)))
            layers.append(("down", ConvBNReLU(spec.down_spec(b), f"block{b}.down", seed)))
            for name, layer in layers:
                self.add_child(f"block{b}.{name}", layer)
            self.blocks.append(layers)
            c_prev = spec.channel_plan[b - 1][1]

    def conv_layers(self):
        """Every SparseConv in execution order."""
        out = []

        def walk(m):
            if isinstance(m, SparseConv):
                out.append(m)
            for c in m._children.values():
                walk(c)

        for layers in self.blocks:
            for _, layer in layers:
                walk(layer)
        return out

    def __call__(self, f0, trace=None):
        if f0.channels != self.spec.in_channels:
            raise ValueError(f"backbone expects {self.spec.in_channels} input channels, got {f0.channels}")
        if tuple(f0.shape) != tuple(self.spec.grid.shape):
            raise ValueError(f"input grid {tuple(f0.shape)} does not match {self.spec.grid.shape}")
        x = f0
        taps = []
        for b, layers in enumerate(self.blocks, start=1):
            for name, layer in layers:
                if isinstance(layer, ResidualPair):
                    x = layer(x, trace)
                    continue
                x = layer(x)
                if trace is not None:
                    trace.log(f"block{b}.{name}", layer.spec.kind, x)
            taps.append(x)
        return taps


def calibrate_batch_norm(model, clouds, seed=0):
    """Set every BN's running stats to the pooled statistics of ``clouds``.

    A stand-in for pretraining: the frozen extractor then sees normalized
    activations, as a trained detector backbone would. Uses a cumulative
    average over scenes (train-mode forward, no gradients).
    """
    bns = [m for m in _modules(model) if isinstance(m, BatchNorm)]
    if not clouds:
        return model
    model.train()
    with no_grad():
        for t, cloud in enumerate(clouds):
            for bn in bns:
                bn.momentum = 1.0 / (t + 1)
            model(voxelize(cloud, model.spec.grid, seed=seed + t))
    for bn in bns:
        bn.momentum = BN_MOMENTUM
    return model.eval()


def _modules(m):
    yield m
    for c in m._children.values():
        yield from _modules(c)


def build_backbone(spec, seed=0, calibration_clouds=None):
    """Seeded, frozen extractor; BN statistics calibrated on ``calibration_clouds``."""
    model = Backbone(spec, seed)
    if calibration_clouds:
        calibrate_batch_norm(model, calibration_clouds, seed)
    return model.freeze()


def forward_with_taps(model, f0):
    """``([f_1..f_N], trace)``; the trace starts with the input record."""
    trace = LayerTapTrace()
    trace.log("input", "input", f0)
    with no_grad():
        taps = model(f0, trace)
    trace.taps = [t.detached(fresh_cache=True) for t in taps]
    return trace.taps, trace


def voi_profile(trace):
    """CSV text with one row per layer: layer,kind,active,total,density."""
    if not trace.records:
        raise ValueError("empty trace")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "active", "total", "density"])
    for r in trace.records:
        w.writerow([r.name, r.kind, r.active, r.total, f"{r.density:.10g}"])
    return buf.getvalue()
