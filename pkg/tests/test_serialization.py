import json
import struct
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vidistill.disentangle import DistilledArtifact, DynamicMemory, StaticMemory, build_combiner
from vidistill.exceptions import ChecksumError, InvalidInputError, MagicError, TruncatedError, VersionError
from vidistill.matching import ExpertTrajectory, History, SyntheticSet
from vidistill.models import ArchSpec, build_model
from vidistill.serialization import decode, encode, load_artifact, save_artifact
from vidistill.temporal import CompressionSchedule, InterpolatorConfig, train_parametric_interpolator

from conftest import make_dataset


def parse_reference(data: bytes):
    """Independent reader written straight from the documented layout."""
    assert data[:4] == b"VDST"
    version, meta_len = struct.unpack("<HI", data[4:10])
    meta = json.loads(data[10:10 + meta_len])
    pos = 10 + meta_len
    out = {}
    for _ in meta["tensors"]:
        (nlen,) = struct.unpack("<H", data[pos:pos + 2])
        name = data[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        rank = data[pos]
        dims = struct.unpack(f"<{rank}I", data[pos + 1:pos + 1 + 4 * rank])
        pos += 1 + 4 * rank
        n = int(np.prod(dims))
        out[name] = np.frombuffer(data[pos:pos + 4 * n], dtype="<f4").reshape(dims)
        pos += 4 * n
    (crc,) = struct.unpack("<I", data[pos:pos + 4])
    assert pos + 4 == len(data) and crc == zlib.crc32(data[:pos])
    return version, meta, out


def random_synset(rng):
    k, ipc = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    n = int(rng.integers(1, 4))
    frames = torch.from_numpy(rng.standard_normal((k * ipc, n, 1, 3, 4)).astype(np.float32))
    hist = History([float(v) for v in rng.random(3)], [int(v) for v in rng.integers(0, 100, 3)], [0.1, 0.2, 0.3])
    return SyntheticSet(frames, np.repeat(np.arange(k), ipc), CompressionSchedule(n, n, 1, "duplicate", n + 2), k,
                        hist, {"seed": int(rng.integers(100))})


def random_artifact(rng):
    k, spc, dpc, fd = (int(v) for v in rng.integers(1, 4, size=4))
    s = torch.from_numpy(rng.random((k, spc, 2, 4, 5)).astype(np.float32))
    d = torch.from_numpy(rng.standard_normal((k, dpc, fd, 1, 4, 5)).astype(np.float32))
    comb = build_combiner(["single_block", "two_block_mid8"][int(rng.integers(2))], 2, fd + 1, int(rng.integers(99)))
    return DistilledArtifact(StaticMemory(s), DynamicMemory(d), comb, None, {"tag": "x"})


def same(a, b):
    assert type(a) is type(b)
    if isinstance(a, SyntheticSet):
        assert a.frames.numpy().tobytes() == b.frames.numpy().tobytes()
        assert np.array_equal(a.labels, b.labels) and a.schedule == b.schedule and a.history == b.history
    elif isinstance(a, DistilledArtifact):
        assert a.static.images.numpy().tobytes() == b.static.images.numpy().tobytes()
        assert a.dynamic.motions.numpy().tobytes() == b.dynamic.motions.numpy().tobytes()
        assert torch.equal(a.combiner.model.flat, b.combiner.model.flat)
        assert a.combiner.model.manifest == b.combiner.model.manifest
        x1, _ = a.materialize()
        x2, _ = b.materialize()
        assert torch.equal(x1, x2)


def test_hundred_random_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        obj = random_synset(rng) if i % 2 else random_artifact(rng)
        path = tmp_path / f"a{i}.vdst"
        size = save_artifact(obj, str(path))
        data = path.read_bytes()
        assert size == len(data)
        same(obj, load_artifact(str(path)))
        version, meta, tensors = parse_reference(data)
        assert version == 1 and meta["kind"] in ("synthetic_set", "distilled_artifact")
        first = meta["tensors"][0]
        ref = obj.frames if isinstance(obj, SyntheticSet) else obj.static.images
        assert np.array_equal(tensors[first], ref.numpy())


def test_little_endian_layout():
    data = encode({"kind": "empty"}, {"t": torch.tensor([1.0, -2.0])})
    body = data[:-4]
    assert body.endswith(struct.pack("<2f", 1.0, -2.0))
    assert body.endswith(b"\x00\x00\x80\x3f\x00\x00\x00\xc0")
    assert data[4:6] == b"\x01\x00"
    # reading the payload big-endian gives different numbers
    assert struct.unpack(">2f", body[-8:]) != (1.0, -2.0)


def test_byte_layout_exact():
    data = encode({"kind": "empty"}, {"ab": torch.zeros(2, 3)})
    meta = json.dumps({"kind": "empty", "tensors": ["ab"]}, sort_keys=True).encode()
    body = (b"VDST" + struct.pack("<HI", 1, len(meta)) + meta + struct.pack("<H", 2) + b"ab"
            + struct.pack("<B2I", 2, 2, 3) + bytes(24))
    assert data == body + struct.pack("<I", zlib.crc32(body))


def test_rejects_non_float32():
    with pytest.raises(InvalidInputError):
        encode({}, {"x": torch.zeros(2, dtype=torch.float64)})


class TestCorruption:
    data = encode({"kind": "empty", "x": 1}, {"w": torch.arange(6.0).view(2, 3)})

    def test_bad_magic(self):
        with pytest.raises(MagicError):
            decode(b"XDST" + self.data[4:])

    def test_bad_version(self):
        with pytest.raises(VersionError):
            decode(self.data[:4] + struct.pack("<H", 2) + self.data[6:])

    @pytest.mark.parametrize("cut", [5, 12, 40, -5, -1])
    def test_truncated(self, cut):
        with pytest.raises((TruncatedError, ChecksumError)):
            decode(self.data[:cut])

    def test_truncated_payload_is_reported_as_such(self):
        with pytest.raises(TruncatedError):
            decode(self.data[:-10])

    @given(st.integers(10, 10**6), st.integers(1, 255))
    @settings(max_examples=60, deadline=None)
    def test_flipped_byte(self, pos, xor):
        pos = 10 + pos % (len(self.data) - 10)
        bad = bytearray(self.data)
        bad[pos] ^= xor
        with pytest.raises((ChecksumError, TruncatedError)):
            decode(bytes(bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_artifact(str(tmp_path / "nope.vdst"))


def test_other_kinds_round_trip(tmp_path):
    ds = make_dataset(2, 2, frames=4, shape=(1, 8, 8))
    state = build_model(ArchSpec.mini_c3d((4, 1, 8, 8), 2), 3)
    trajs = [ExpertTrajectory([state.flat, state.flat + 1], [0, 1], state.spec, 3, {"acc": [0.5]})]
    phi = train_parametric_interpolator(ds, 2, 4, InterpolatorConfig(epochs=1))
    for obj in (None, ds, state, trajs, phi):
        path = str(tmp_path / "o.vdst")
        save_artifact(obj, path)
        back = load_artifact(path)
        if obj is None:
            assert back is None
        elif obj is ds:
            assert all(torch.equal(a.frames, b.frames) for a, b in zip(ds.clips, back.clips))
        elif obj is state:
            assert torch.equal(back.flat, state.flat) and back.spec == state.spec
        elif obj is trajs:
            assert torch.equal(back[0].snapshots[1], trajs[0].snapshots[1]) and back[0].arch == state.spec
        else:
            x = torch.rand(3, 2, 1, 8, 8)
            from vidistill.temporal import interpolate
            assert torch.equal(interpolate(x, 4, "parametric", phi), interpolate(x, 4, "parametric", back))


def test_atomic_write_leaves_no_temp(tmp_path):
    save_artifact(None, str(tmp_path / "e.vdst"))
    assert [p.name for p in tmp_path.iterdir()] == ["e.vdst"]
