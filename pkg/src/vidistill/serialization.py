"""The ``VDST`` artifact container.

Layout (all integers little-endian)::

    b"VDST"                      magic
    u16     version              currently 1
    u32     meta_len
    bytes   meta                 UTF-8 JSON; meta["tensors"] lists record names in order
    records, one per tensor:
        u16   name_len
        bytes name               UTF-8
        u8    rank
        u32   dims[rank]
        f32   payload[prod(dims)]
    u32     crc32                zlib CRC-32 of every preceding byte

Only float32 tensors are stored, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import math
import os
import struct
import zlib

import numpy as np
import torch

from .exceptions import ChecksumError, InvalidInputError, MagicError, TruncatedError, VersionError

MAGIC = b"VDST"
VERSION = 1
_F32 = np.dtype("<f4")


def encode(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    meta = dict(meta, tensors=list(tensors))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes]
    for name, t in tensors.items():
        t = torch.as_tensor(t).detach()
        if t.dtype != torch.float32:
            raise InvalidInputError(f"tensor {name!r} is {t.dtype}; artifacts store float32 only")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.cpu().numpy(), dtype=_F32).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError("not a VDST artifact (bad magic bytes)")
    if len(data) < 10:
        raise TruncatedError("file ends inside the header")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionError(f"unsupported artifact version {version} (expected {VERSION})")
    pos = 10 + meta_len
    if pos + 4 > len(data):
        raise TruncatedError("file ends inside the metadata block")
    try:
        meta = json.loads(data[10:pos].decode("utf-8"))
        names = list(meta["tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        _verify(data)
        raise ChecksumError(f"metadata is unreadable: {exc}") from exc
    spans = []
    for _ in names:
        if pos + 2 > len(data) - 4:
            raise TruncatedError("file ends before all tensor records")
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + nlen]
        pos += 2 + nlen
        if pos + 1 > len(data) - 4:
            raise TruncatedError("file ends inside a tensor header")
        rank = data[pos]
        if pos + 1 + 4 * rank > len(data) - 4:
            raise TruncatedError("file ends inside a tensor header")
        dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
        pos += 1 + 4 * rank
        n = math.prod(dims) * 4
        if pos + n > len(data) - 4:
            raise TruncatedError(f"file ends inside tensor payload ({len(data) - 4 - pos} of {n} bytes)")
        spans.append((name, dims, pos))
        pos += n
    if pos + 4 != len(data):
        _verify(data)
        raise ChecksumError("unexpected bytes after the last tensor record")
    _verify(data)
    tensors = {}
    for (name, dims, start), expected in zip(spans, names):
        arr = np.frombuffer(data, dtype=_F32, count=math.prod(dims), offset=start)
        tensors[name.decode("utf-8")] = torch.from_numpy(arr.astype(np.float32)).reshape(dims)
        if name.decode("utf-8") != expected:
            raise ChecksumError("tensor records disagree with the metadata")
    return meta, tensors


def _verify(data: bytes) -> None:
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("CRC-32 mismatch; the file is corrupted")


def write_bytes(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ------------------------------------------------------------- object codecs

def to_record(obj) -> tuple[dict, dict]:
    """Split a supported object into (metadata, tensors)."""
    from .disentangle import DistilledArtifact
    from .matching import ExpertTrajectory, SyntheticSet
    from .models import ModelState
    from .temporal import ParametricInterpolator
    from .video import VideoDataset

    if obj is None:
        return {"kind": "empty"}, {}
    if isinstance(obj, SyntheticSet):
        return ({"kind": "synthetic_set", "labels": obj.labels.tolist(), "num_classes": obj.num_classes,
                 "schedule": obj.schedule.to_dict(), "meta": obj.meta,
                 "history": {"loss": obj.history.loss, "peak_bytes": obj.history.peak_bytes,
                             "seconds": obj.history.seconds}},
                {"frames": obj.frames})
    if isinstance(obj, DistilledArtifact):
        arch = obj.combiner.arch
        return ({"kind": "distilled_artifact", "combiner": {"variant": arch.variant, "channels": arch.channels,
                                                            "frames": arch.frames, "manifest": _manifest(obj.combiner.model),
                                                            "init_seed": obj.combiner.model.init_seed},
                 "schedule": obj.schedule.to_dict() if obj.schedule else None, "meta": obj.meta},
                {"static": obj.static.images, "dynamic": obj.dynamic.motions, "combiner": obj.combiner.model.flat})
    if isinstance(obj, ParametricInterpolator):
        spec = obj.model.spec
        return ({"kind": "interpolator", "spec": {"channels": spec.channels, "width": spec.width, "depth": spec.depth},
                 "trained_for": list(obj.trained_for), "history": list(obj.history), "fingerprint": obj.fingerprint,
                 "manifest": _manifest(obj.model), "init_seed": obj.model.init_seed},
                {"phi": obj.model.flat})
    if isinstance(obj, VideoDataset):
        return ({"kind": "video_dataset", "labels": obj.labels.tolist(), "num_classes": obj.num_classes,
                 "split": obj.split, "fps": [c.fps_meta for c in obj.clips]},
                {f"clip{i}": c.frames for i, c in enumerate(obj.clips)})
    if isinstance(obj, ModelState):
        return ({"kind": "model_state", "spec": obj.spec.to_dict(), "manifest": _manifest(obj),
                 "init_seed": obj.init_seed}, {"flat": obj.flat})
    if isinstance(obj, (list, tuple)) and all(isinstance(t, ExpertTrajectory) for t in obj):
        tensors = {}
        trajs = []
        for i, t in enumerate(obj):
            for j, s in enumerate(t.snapshots):
                tensors[f"traj{i}/snap{j}"] = s
            trajs.append({"arch": t.arch.to_dict() if t.arch else None, "seed": t.seed, "epochs": t.epochs,
                          "snapshots": len(t.snapshots), "meta": t.meta})
        return {"kind": "expert_trajectories", "trajectories": trajs}, tensors
    raise InvalidInputError(f"cannot serialise {type(obj).__name__}")


def from_record(meta: dict, tensors: dict):
    from .disentangle import CombinerArch, CombinerSpec, DistilledArtifact, DynamicMemory, StaticMemory
    from .matching import ExpertTrajectory, History, SyntheticSet
    from .models import ArchSpec, ModelState
    from .temporal import CompressionSchedule, InterpolatorSpec, ParametricInterpolator
    from .video import VideoClip, VideoDataset

    kind = meta.get("kind")
    if kind == "empty":
        return None
    if kind == "synthetic_set":
        h = meta.get("history", {})
        return SyntheticSet(tensors["frames"], np.asarray(meta["labels"], dtype=np.int64),
                            CompressionSchedule.from_dict(meta["schedule"]), meta["num_classes"],
                            History(h.get("loss", []), h.get("peak_bytes", []), h.get("seconds", [])),
                            meta.get("meta", {}))
    if kind == "distilled_artifact":
        c = meta["combiner"]
        arch = CombinerArch(c["variant"], c["channels"], c["frames"])
        model = ModelState(arch, tensors["combiner"], _unmanifest(c["manifest"]), c["init_seed"])
        sched = CompressionSchedule.from_dict(meta["schedule"]) if meta.get("schedule") else None
        return DistilledArtifact(StaticMemory(tensors["static"]), DynamicMemory(tensors["dynamic"]),
                                 CombinerSpec(c["variant"], model), sched, meta.get("meta", {}))
    if kind == "interpolator":
        spec = InterpolatorSpec(**meta["spec"])
        model = ModelState(spec, tensors["phi"], _unmanifest(meta["manifest"]), meta["init_seed"])
        return ParametricInterpolator(model, tuple(meta["trained_for"]), tuple(meta["history"]), meta["fingerprint"])
    if kind == "video_dataset":
        clips = tuple(VideoClip(tensors[f"clip{i}"], int(y), fps)
                      for i, (y, fps) in enumerate(zip(meta["labels"], meta["fps"])))
        return VideoDataset(clips, meta["num_classes"], meta["split"])
    if kind == "model_state":
        return ModelState(ArchSpec.from_dict(meta["spec"]), tensors["flat"], _unmanifest(meta["manifest"]),
                          meta["init_seed"])
    if kind == "expert_trajectories":
        out = []
        for i, t in enumerate(meta["trajectories"]):
            snaps = [tensors[f"traj{i}/snap{j}"] for j in range(t["snapshots"])]
            arch = ArchSpec.from_dict(t["arch"]) if t["arch"] else None
            out.append(ExpertTrajectory(snaps, t["epochs"], arch, t["seed"], t["meta"]))
        return out
    raise InvalidInputError(f"unknown artifact kind {kind!r}")


def _manifest(state) -> list:
    return [[name, list(shape)] for name, shape in state.manifest]


def _unmanifest(m) -> tuple:
    return tuple((name, tuple(shape)) for name, shape in m)


def save_artifact(obj, path: str) -> int:
    """Serialise ``obj`` to ``path`` atomically; returns the file size in bytes."""
    data = encode(*to_record(obj))
    write_bytes(path, data)
    return len(data)


def load_artifact(path: str):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InvalidInputError(f"cannot read artifact {path!r}: {exc.strerror}") from exc
    return from_record(*decode(data))
