import math
import struct

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ctce.channel import (HEADER_SIZE, BadMagicError, CaptureWriter, ChannelConfig, LengthMismatchError,
                          OversizeFrameError, TruncatedPacketError, deserialize, drop_draw, is_dropped,
                          packet_size, read_capture, serialize, transmit)
from ctce.geometry import FrameTag, Pose, QueryFrame
from ctce.numerics import Tensor


def random_frame(rng, n=None, d=None):
    n = int(rng.integers(0, 12)) if n is None else n
    d = int(rng.integers(1, 40)) if d is None else d
    rot = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    pose = Pose(rot, rng.normal(scale=50, size=3))
    # values representable in f32 so the round trip can be bit-exact
    f32 = lambda *s: rng.normal(scale=20, size=s).astype(np.float32).astype(np.float64)
    return QueryFrame(int(rng.integers(0, 1 << 16)), int(rng.integers(0, 1 << 32)), pose, f32(n, 3),
                      Tensor(f32(n, d)), rng.uniform(size=n).astype(np.float32).astype(np.float64),
                      FrameTag.ROADSIDE_TEMPORAL)


class TestWireFormat:
    def test_empty_frame_is_40_bytes(self, rng):
        assert len(serialize(random_frame(rng, 0, 32))) == 40 == HEADER_SIZE

    def test_length_formula(self, rng):
        for _ in range(20):
            f = random_frame(rng)
            assert len(serialize(f)) == packet_size(f.count, f.dim) == 40 + f.count * 4 * (4 + f.dim)

    def test_round_trip(self, rng):
        for _ in range(1000):
            f = random_frame(rng)
            g = deserialize(serialize(f))
            assert (g.agent_id, g.frame_id, g.count) == (f.agent_id, f.frame_id, f.count)
            assert g.ref_points.tobytes() == f.ref_points.tobytes()
            assert g.confidences.tobytes() == f.confidences.tobytes()
            if f.count:
                assert g.embeddings.data.tobytes() == f.embeddings.data.tobytes()
            np.testing.assert_allclose(g.sender_pose.translation, f.sender_pose.translation, rtol=1e-6, atol=1e-4)
            np.testing.assert_allclose(g.sender_pose.rotation, f.sender_pose.rotation, atol=1e-6)

    def test_explicit_d(self, rng):
        f = random_frame(rng, 3, 8)
        assert deserialize(serialize(f), d=8).dim == 8

    def test_one_value_changes_four_bytes(self, rng):
        f = random_frame(rng, 4, 6)
        g = f.with_(embeddings=Tensor(f.embeddings.data.copy()))
        g.embeddings.data[2, 3] += 1.0
        a, b = serialize(f), serialize(g)
        assert sum(x != y for x, y in zip(a, b)) <= 4
        diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
        assert diff[-1] - diff[0] < 4

    def test_deterministic(self, rng):
        f = random_frame(rng, 5, 4)
        assert serialize(f) == serialize(f)

    def test_bad_magic(self, rng):
        p = bytearray(serialize(random_frame(rng, 2, 4)))
        p[0] ^= 0xFF
        with pytest.raises(BadMagicError) as e:
            deserialize(bytes(p))
        assert e.value.code == 1

    def test_truncated(self, rng):
        p = serialize(random_frame(rng, 3, 4))
        for cut in (len(p) - 1, HEADER_SIZE + 5, HEADER_SIZE - 1, 4):
            with pytest.raises(TruncatedPacketError) as e:
                deserialize(p[:cut], d=4)
            assert e.value.code == 2

    def test_count_length_mismatch(self, rng):
        p = serialize(random_frame(rng, 3, 4))
        with pytest.raises(LengthMismatchError) as e:
            deserialize(p + b"\x00" * 4, d=4)
        assert e.value.code == 3
        # count field says 5 but payload holds 3 queries' worth of an odd width
        bad = p[:10] + struct.pack("<H", 5) + p[12:]
        with pytest.raises(LengthMismatchError):
            deserialize(bad)

    def test_error_codes_distinct(self):
        codes = {BadMagicError.code, TruncatedPacketError.code, LengthMismatchError.code, OversizeFrameError.code}
        assert len(codes) == 4

    def test_oversize(self):
        n = 1 << 16
        f = QueryFrame(0, 0, Pose.identity(), np.zeros((n, 3)), Tensor(np.zeros((n, 1))), np.zeros(n), "fused")
        with pytest.raises(OversizeFrameError):
            serialize(f)


class TestChannel:
    @pytest.mark.parametrize("pdr", [0.0, 0.25, 0.5, 1.0])
    def test_drop_rate_within_binomial_interval(self, pdr):
        n = 10_000
        cfg = ChannelConfig(pdr, seed=7)
        drops = sum(is_dropped(cfg, f) for f in range(n))
        assert abs(drops / n - pdr) <= 3 * math.sqrt(pdr * (1 - pdr) / n)

    def test_extremes(self):
        assert all(transmit(b"x", ChannelConfig(0.0, 1), f) == b"x" for f in range(100))
        assert all(transmit(b"x", ChannelConfig(1.0, 1), f) is None for f in range(100))

    def test_reproducible_from_seed_and_frame(self):
        a = [is_dropped(ChannelConfig(0.3, 5), f) for f in range(200)]
        b = [is_dropped(ChannelConfig(0.3, 5), f) for f in reversed(range(200))][::-1]
        assert a == b
        assert drop_draw(5, 17) == drop_draw(5, 17)
        assert a != [is_dropped(ChannelConfig(0.3, 6), f) for f in range(200)]

    def test_drop_sets_nested_in_pdr(self):
        low = {f for f in range(2000) if is_dropped(ChannelConfig(0.2, 3), f)}
        high = {f for f in range(2000) if is_dropped(ChannelConfig(0.6, 3), f)}
        assert low <= high

    def test_invalid_pdr(self):
        with pytest.raises(ValueError):
            ChannelConfig(1.5)

    def test_capture_file(self, tmp_path, rng):
        pkts = [serialize(random_frame(rng, 2, 3)) for _ in range(3)]
        with CaptureWriter(tmp_path / "cap.bin") as w:
            for i, p in enumerate(pkts):
                w.write(i, p, i != 1)
        recs = list(read_capture(tmp_path / "cap.bin"))
        assert [(f, d) for f, d, _ in recs] == [(0, True), (1, False), (2, True)]
        assert [p for _, _, p in recs] == pkts
