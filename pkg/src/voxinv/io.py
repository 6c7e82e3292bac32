"""Point-cloud files and model checkpoints.

XYZI scans are consecutive 16-byte records of little-endian float32
``(x, y, z, intensity)``, the KITTI velodyne layout.

A checkpoint is ``b"SVINV001"``, a little-endian uint64 manifest length, a
UTF-8 JSON manifest, then a blob of raw little-endian float32 tensors. The
manifest lists every tensor's name, shape, dtype, byte offset, and byte
length within the blob, plus free-form ``meta`` (architecture, provenance).
"""
import json
import os
import struct
import tempfile

import numpy as np

from .backbone import Backbone, BackboneSpec
from .inverter import InversionModel, InverterSpec
from .sparse import Module
from .voxelgrid import as_cloud

RECORD = np.dtype("<f4")
MAGIC = b"SVINV001"
_HEADER = struct.Struct("<8sQ")


class CheckpointError(ValueError):
    pass


def read_xyzi(path):
    """``(k, 4)`` float32 cloud; a trailing partial record is an error."""
    raw = open(path, "rb").read()
    whole = len(raw) // 16 * 16
    if whole != len(raw):
        raise ValueError(
            f"{path}: length {len(raw)} is not a multiple of 16; truncated record at byte {whole}")
    return np.frombuffer(raw, dtype=RECORD).reshape(-1, 4).astype(np.float32)


def _atomic_write(path, chunks):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_xyzi(cloud, path):
    _atomic_write(path, [np.ascontiguousarray(as_cloud(cloud), dtype=RECORD).tobytes()])


class AttackBundle(Module):
    """A frozen backbone and the inverter trained against it, saved together."""

    def __init__(self, backbone, inverter):
        super().__init__()
        self.backbone = backbone
        self.inverter = inverter


def architecture(model):
    """JSON-able description from which ``load_checkpoint`` rebuilds ``model``."""
    if isinstance(model, AttackBundle):
        return {"kind": "attack", "backbone": architecture(model.backbone),
                "inverter": architecture(model.inverter)}
    if isinstance(model, Backbone):
        return {"kind": "backbone", "spec": model.spec.to_dict(), "seed": model.seed}
    if isinstance(model, InversionModel):
        return {"kind": "inverter", "spec": model.spec.to_dict(), "seed": model.seed}
    raise TypeError(f"no checkpoint architecture for {type(model).__name__}")


def build_from_architecture(arch):
    kind = arch.get("kind")
    if kind == "attack":
        bundle = AttackBundle(build_from_architecture(arch["backbone"]),
                              build_from_architecture(arch["inverter"]))
        bundle.backbone.freeze()
        return bundle
    if kind == "backbone":
        return Backbone(BackboneSpec.from_dict(arch["spec"]), arch["seed"])
    if kind == "inverter":
        return InversionModel(InverterSpec.from_dict(arch["spec"]), arch["seed"])
    raise CheckpointError(f"unknown architecture kind {kind!r}")


def save_checkpoint(model, path, meta=None):
    """Write every parameter and buffer of ``model`` (float32).

    ``meta`` is stored alongside the model's architecture description.
    """
    records, blobs, offset = [], [], 0
    for name, arr in model.state_arrays().items():
        data = np.ascontiguousarray(arr, dtype=RECORD).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "length": len(data)})
        blobs.append(data)
        offset += len(data)
    meta = dict(meta or {})
    try:
        meta.setdefault("architecture", architecture(model))
    except TypeError:
        pass
    manifest = json.dumps({"tensors": records, "meta": meta}, sort_keys=True).encode()
    _atomic_write(path, [_HEADER.pack(MAGIC, len(manifest)), manifest] + blobs)


def read_checkpoint(path):
    """``(tensors, meta)`` with validated offsets; tensors are float32 arrays."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size or head[:8] != MAGIC:
            raise CheckpointError(f"{path}: bad magic {head[:8]!r}, expected {MAGIC!r}")
        _, mlen = _HEADER.unpack(head)
        manifest_raw = f.read(mlen)
        if len(manifest_raw) != mlen:
            raise CheckpointError(f"{path}: manifest truncated ({len(manifest_raw)} of {mlen} bytes)")
        try:
            manifest = json.loads(manifest_raw)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: manifest is not valid JSON ({e})") from None
        blob = f.read()
    tensors = {}
    spans = []
    for rec in manifest.get("tensors", []):
        name = rec.get("name")
        if rec.get("dtype") != "f32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {rec.get('dtype')!r}")
        shape = tuple(int(s) for s in rec["shape"])
        off, length = int(rec["offset"]), int(rec["length"])
        if off < 0 or length < 0 or off + length > len(blob):
            raise CheckpointError(
                f"{path}: tensor {name!r} span [{off}, {off + length}) exceeds blob of {len(blob)} bytes")
        if length != int(np.prod(shape)) * 4:
            raise CheckpointError(
                f"{path}: tensor {name!r} length {length} does not match shape {list(shape)}")
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(blob, dtype=RECORD, count=length // 4, offset=off) \
            .reshape(shape).astype(np.float32)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{path}: tensors {an!r} and {bn!r} overlap")
    return tensors, manifest.get("meta", {})


def load_state(model, tensors, path="<checkpoint>"):
    """Copy ``tensors`` into ``model``'s parameters and buffers, checking names and shapes."""
    targets = {n: p for n, p in model.named_parameters()}
    targets.update({n: b for n, b in model.named_buffers()})
    missing = sorted(set(targets) - set(tensors))
    extra = sorted(set(tensors) - set(targets))
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names differ from the model; missing {missing}, unexpected {extra}")
    for name, t in targets.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {list(arr.shape)} in the file "
                f"but {list(t.data.shape)} in the model")
        t.data = arr.astype(t.data.dtype, copy=True)
    return model


def load_checkpoint(path, model=None):
    """Model with the checkpoint's tensors; rebuilt from its architecture if ``model`` is None."""
    tensors, meta = read_checkpoint(path)
    if model is None:
        if "architecture" not in meta:
            raise CheckpointError(f"{path}: no architecture recorded; pass the target model")
        try:
            model = build_from_architecture(meta["architecture"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: cannot rebuild architecture ({e})") from None
    load_state(model, tensors, path)
    model.eval()
    return model
