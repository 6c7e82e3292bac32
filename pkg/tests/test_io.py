import json
import struct

import numpy as np
import pytest

from voxinv.backbone import Backbone, BackboneSpec
from voxinv.inverter import InverterSpec, build_inverter
from voxinv.io import (
    MAGIC,
    AttackBundle,
    CheckpointError,
    load_checkpoint,
    read_checkpoint,
    read_xyzi,
    save_checkpoint,
    write_xyzi,
)
from voxinv.scenes import SceneSpec, generate_scene
from voxinv.voxelgrid import voxelize


def test_empty_file_is_empty_cloud(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert read_xyzi(p).shape == (0, 4)


def test_single_record_layout(tmp_path):
    p = tmp_path / "one.bin"
    write_xyzi(np.array([[1.0, 2.0, 3.0, 0.5]]), p)
    raw = p.read_bytes()
    assert raw == struct.pack("<4f", 1.0, 2.0, 3.0, 0.5)
    np.testing.assert_array_equal(read_xyzi(p), [[1.0, 2.0, 3.0, 0.5]])


def test_random_records_round_trip_bitwise(tmp_path, rng):
    cloud = rng.normal(size=(1000, 4)).astype(np.float32)
    p = tmp_path / "r.bin"
    write_xyzi(cloud, p)
    back = read_xyzi(p)
    assert back.dtype == np.float32
    assert back.tobytes() == cloud.tobytes()


def test_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(b"\0" * 37)
    with pytest.raises(ValueError, match="byte 32"):
        read_xyzi(p)


def small_model(seed=0):
    return Backbone(BackboneSpec(depth=1), seed=seed)


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = small_model(seed=5)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p, {"note": "x"})
    tensors, meta = read_checkpoint(p)
    assert meta["note"] == "x"
    for name, arr in m.state_arrays().items():
        assert tensors[name].tobytes() == arr.tobytes()
    other = load_checkpoint(p, small_model(seed=9))
    for name, arr in m.state_arrays().items():
        assert other.state_arrays()[name].tobytes() == arr.tobytes()


def test_checkpoint_rebuilds_architecture_and_forward_matches(tmp_path):
    m = small_model(seed=2).eval()
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    f0 = voxelize(generate_scene(SceneSpec(seed=1)), m.spec.grid)
    a = m(f0)[-1].feats.data
    b = back(f0)[-1].feats.data
    assert a.tobytes() == b.tobytes()


def test_attack_bundle_round_trip(tmp_path):
    bundle = AttackBundle(small_model(), build_inverter(
        InverterSpec(method="voc", depth=1, backbone=BackboneSpec(depth=1))))
    p = tmp_path / "a.ckpt"
    save_checkpoint(bundle, p)
    back = load_checkpoint(p)
    assert isinstance(back, AttackBundle)
    assert back.inverter.spec == bundle.inverter.spec
    assert all(not q.requires_grad for q in back.backbone.parameters())


def _corrupt(path, fn):
    raw = bytearray(path.read_bytes())
    mlen = struct.unpack("<Q", raw[8:16])[0]
    manifest = json.loads(raw[16:16 + mlen])
    fn(manifest)
    new = json.dumps(manifest).encode()
    path.write_bytes(bytes(raw[:8]) + struct.pack("<Q", len(new)) + new + bytes(raw[16 + mlen:]))


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), p)
    raw = bytearray(p.read_bytes())
    raw[:8] = b"NOTMAGIC"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(p)


def test_shape_mismatch_names_tensor(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), p)
    name = "block1.subm1.bn.weight"

    def edit(manifest):
        rec = next(r for r in manifest["tensors"] if r["name"] == name)
        rec["shape"] = [2, 4]

    _corrupt(p, edit)
    with pytest.raises(CheckpointError, match=name):
        load_checkpoint(p)


def test_out_of_bounds_offset_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), p)

    def edit(manifest):
        manifest["tensors"][-1]["offset"] = 10 ** 9

    _corrupt(p, edit)
    with pytest.raises(CheckpointError, match="exceeds blob"):
        read_checkpoint(p)


def test_overlapping_tensors_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), p)

    def edit(manifest):
        t = manifest["tensors"]
        t[1]["offset"] = t[0]["offset"]
        t[1]["length"] = t[0]["length"]
        t[1]["shape"] = t[0]["shape"]

    _corrupt(p, edit)
    with pytest.raises(CheckpointError, match="overlap"):
        read_checkpoint(p)


def test_architecture_mismatch_rejected(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), p)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(p, Backbone(BackboneSpec(depth=2)))


def test_header_layout(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(small_model(), p)
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    mlen = struct.unpack("<Q", raw[8:16])[0]
    manifest = json.loads(raw[16:16 + mlen])
    total = sum(r["length"] for r in manifest["tensors"])
    assert len(raw) == 16 + mlen + total


def test_failed_write_leaves_no_file(tmp_path):
    from voxinv.io import _atomic_write

    def chunks():
        yield b"partial"
        raise RuntimeError("disk full")

    p = tmp_path / "m.ckpt"
    with pytest.raises(RuntimeError):
        _atomic_write(p, chunks())
    assert list(tmp_path.iterdir()) == []
