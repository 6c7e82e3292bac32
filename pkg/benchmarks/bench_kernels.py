"""Compiled vs numpy kernel throughput on desk-sized sparse convolutions.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--threads 1]

Prints one line per (layer, backend): cold forward (rulebook built from scratch),
then forward and backward with the rulebook cached.
"""
import argparse
import time

import numpy as np

from voxinv.backbone import BackboneSpec
from voxinv.scenes import SceneSpec, generate_scene
from voxinv.sparse import ConvLayerSpec, Parameter, _backend, set_threads, sparse_conv
from voxinv.sparse.autograd import total
from voxinv.voxelgrid import voxelize

CASES = [
    ("subm 3^3 8->8 @ level 0", ConvLayerSpec(8, 8, 3, 1, 1, "submanifold"), 0),
    ("down 3^3 s2 8->16 @ level 0", ConvLayerSpec(8, 16, 3, 2, 1, "sparse_down"), 0),
    ("up 2^3 s2 16->8 to level 0", ConvLayerSpec(16, 8, 2, 2, 0, "inverse_up"), 1),
]


def inputs(rng):
    spec = BackboneSpec()
    f0 = voxelize(generate_scene(SceneSpec(seed=0)), spec.grid)
    levels = {0: f0}
    down = sparse_conv(f0, Parameter(rng.normal(size=(3, 3, 3, 4, 16)).astype(np.float32), "w"), None,
                       ConvLayerSpec(4, 16, 3, 2, 1, "sparse_down"))
    levels[1] = down.detached(fresh_cache=True)
    return spec, levels


def run_case(spec, x, lspec, rng, repeat, fine_shape):
    x = x.with_feats(Parameter(rng.normal(size=(x.n_active, lspec.c_in)).astype(np.float32), "x"))
    w = Parameter(rng.normal(size=lspec.kernel + (lspec.c_in, lspec.c_out)).astype(np.float32), "w")
    build, fwd, bwd = [], [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        sparse_conv(x.detached(fresh_cache=True), w, None, lspec, fine_shape)
        build.append(time.perf_counter() - t0)
    sparse_conv(x, w, None, lspec, fine_shape)  # builds and caches the rulebook
    for _ in range(repeat):
        t0 = time.perf_counter()
        y = sparse_conv(x, w, None, lspec, fine_shape)
        t1 = time.perf_counter()
        total(y.feats).backward()
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
        w.grad = None
        x.feats.grad = None
    return min(build), min(fwd), min(bwd), y.n_active


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    set_threads(args.threads)
    rng = np.random.default_rng(0)
    spec, levels = inputs(rng)
    print(f"{'case':32s} {'backend':8s} {'rows':>8s} {'cold ms':>9s} {'fwd ms':>9s} {'bwd ms':>9s}")
    for name, lspec, level in CASES:
        fine = spec.level_shapes()[0] if lspec.kind == "inverse_up" else None
        for backend in _backend.available_backends():
            prev = _backend.use_backend(backend)
            try:
                c, f, b, rows = run_case(spec, levels[level], lspec, np.random.default_rng(1),
                                      args.repeat, fine)
            finally:
                _backend.use_backend(prev)
            print(f"{name:32s} {backend:8s} {rows:8d} {1e3 * c:9.2f} {1e3 * f:9.2f} {1e3 * b:9.2f}")


if __name__ == "__main__":
    main()
