import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vidistill.exceptions import InvalidConfigError, InvalidInputError
from vidistill.temporal import (CompressionSchedule, InterpolatorConfig, SegmentPairing, check_consistency,
                                duplicate_index, evenly_subsample, interpolate, linear_weights,
                                reconstruction_mse, reference_positions, segment_pairs,
                                train_parametric_interpolator)
from vidistill.video import MovingShapesConfig, generate_moving_shapes


def brute_consistency(pairs):
    ordered = True
    for (r1, s1), (r2, s2) in itertools.combinations(pairs, 2):
        before = max(r1) < min(r2) and max(s1) < min(s2)
        after = max(r2) < min(r1) and max(s2) < min(s1)
        ordered &= before or after
    uniform = len({len(r) for r, _ in pairs}) == 1 and len({len(s) for _, s in pairs}) == 1
    return ordered, uniform


def frames(*values):
    return torch.tensor(values, dtype=torch.float64).view(-1, 1, 1, 1)


class TestSchedule:
    @pytest.mark.parametrize("args", [(4, 8, 3), (2, 8, 4), (4, 2, 4), (17, 17, 1)])
    def test_invalid(self, args):
        with pytest.raises(InvalidConfigError):
            CompressionSchedule(*args)

    def test_linear_needs_two_frames(self):
        with pytest.raises(InvalidConfigError):
            CompressionSchedule(1, 4, 1, "linear")
        CompressionSchedule(1, 4, 1, "duplicate")

    def test_dict_round_trip(self):
        s = CompressionSchedule(4, 8, 2, "linear", 16)
        assert CompressionSchedule.from_dict(s.to_dict()) == s


class TestSegmentPairs:
    def test_equal_split_example(self):
        p = segment_pairs(CompressionSchedule(4, 8, 4), 8)
        assert p.pairs == (((0, 1), (0,)), ((2, 3), (1,)), ((4, 5), (2,)), ((6, 7), (3,)))

    def test_naive_single_pair(self):
        p = segment_pairs(CompressionSchedule(16, 16, 1), 16)
        assert p.pairs == ((tuple(range(16)), tuple(range(16))),)

    def test_partition_oracle(self):
        p = segment_pairs(CompressionSchedule(3, 6, 3), 12)
        real = [0, 2, 4, 6, 8, 10]
        assert p.pairs == ((tuple(real[0:2]), (0,)), (tuple(real[2:4]), (1,)), (tuple(real[4:6]), (2,)))

    def test_short_real(self):
        with pytest.raises(InvalidConfigError):
            segment_pairs(CompressionSchedule(4, 8, 1), 6)

    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 20), st.booleans())
    @settings(max_examples=150, deadline=None)
    def test_always_consistent(self, k, syn_mult, real_mult, extra, randomised):
        n_syn, n_real = k * syn_mult, k * real_mult
        sched = CompressionSchedule(n_syn, n_real, k, "duplicate", max(n_syn, 16))
        rng = np.random.default_rng(extra) if randomised else None
        p = segment_pairs(sched, n_real + extra, rng)
        assert check_consistency(p) == (True, True)
        assert all(0 <= i < n_real + extra for r, _ in p.pairs for i in r)


class TestConsistency:
    def test_fig2a(self):
        assert check_consistency(((( 0, 1), (0,)), ((2, 3), (1,)))) == (True, True)

    def test_crossed_order(self):
        assert check_consistency((((0, 1), (1,)), ((2, 3), (0,))))[0] is False

    def test_nonuniform_sizes(self):
        pairs, start = [], 0
        for j, size in enumerate((1, 1, 5, 1)):
            pairs.append((tuple(range(start, start + size)), (j,)))
            start += size
        assert check_consistency(pairs) == (True, False)

    def test_malformed(self):
        with pytest.raises(InvalidInputError):
            SegmentPairing((((0, 1), ()),))
        with pytest.raises(InvalidInputError):
            SegmentPairing((((0, 1), (0,)), ((1, 2), (1,))))

    def test_brute_force_small(self):
        n_r, n_s = 4, 3
        for k in (1, 2, 3):
            for ra in itertools.product(range(k), repeat=n_r):
                if len(set(ra)) < k:
                    continue
                for sa in itertools.product(range(k), repeat=n_s):
                    if len(set(sa)) < k:
                        continue
                    pairs = tuple((tuple(i for i in range(n_r) if ra[i] == j),
                                   tuple(i for i in range(n_s) if sa[i] == j)) for j in range(k))
                    assert check_consistency(pairs) == brute_consistency(pairs)


class TestInterpolate:
    def test_duplicate_example(self):
        out = interpolate(frames(1.0, 2.0), 4, "duplicate")
        assert out.flatten().tolist() == [1, 1, 2, 2]

    def test_linear_example(self):
        f1, f2 = torch.rand(3, 4, 4, dtype=torch.float64), torch.rand(3, 4, 4, dtype=torch.float64)
        out = interpolate(torch.stack([f1, f2]), 4, "linear")
        expected = torch.stack([f1, (2 * f1 + f2) / 3, (f1 + 2 * f2) / 3, f2])
        assert (out - expected).abs().max() <= 1e-12

    def test_scalar_linear(self):
        assert np.allclose(interpolate(frames(0.0, 3.0), 4, "linear").flatten().numpy(), [0, 1, 2, 3])

    def test_single_frame_everywhere(self):
        out = interpolate(frames(5.0), 6, "duplicate")
        assert out.flatten().tolist() == [5.0] * 6

    def test_batched(self):
        x = torch.rand(3, 2, 1, 2, 2)
        out = interpolate(x, 5, "linear")
        assert out.shape == (3, 5, 1, 2, 2)
        assert torch.allclose(out[1], interpolate(x[1], 5, "linear"))

    def test_errors(self):
        with pytest.raises(InvalidConfigError):
            interpolate(frames(1.0, 2.0), 4, "parametric")
        with pytest.raises(InvalidConfigError):
            interpolate(frames(1.0, 2.0), 4, "cubic")
        with pytest.raises(InvalidInputError):
            interpolate(frames(1.0, 2.0, 3.0), 2, "duplicate")

    def test_duplicate_ties_go_to_earlier(self):
        # 3 references over 5 slots sit at 0, 2, 4; slot 1 and 3 are ties
        assert duplicate_index(3, 5).tolist() == [0, 0, 1, 1, 2]
        assert duplicate_index(2, 4).tolist() == [0, 0, 1, 1]

    @given(st.integers(1, 8), st.integers(0, 8), st.sampled_from(["duplicate", "linear"]), st.integers(0, 999))
    @settings(max_examples=120, deadline=None)
    def test_reference_frames_preserved(self, n, extra, method, seed):
        if method == "linear" and n == 1:
            return
        l_syn = n + extra
        x = torch.rand(n, 1, 2, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        out = interpolate(x, l_syn, method)
        pos = reference_positions(n, l_syn)
        for j, p in enumerate(pos):
            if abs(p - round(p)) < 1e-12:
                assert torch.allclose(out[int(round(p))], x[j], atol=1e-12)

    @given(st.integers(2, 8), st.integers(0, 10), st.integers(0, 999))
    @settings(max_examples=80, deadline=None)
    def test_linear_convexity(self, n, extra, seed):
        l_syn = n + extra
        x = torch.rand(n, 1, 2, 2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        out = interpolate(x, l_syn, "linear")
        w = linear_weights(n, l_syn)
        assert np.allclose(w.sum(1), 1) and (w >= 0).all()
        for t in range(l_syn):
            j = np.flatnonzero(w[t] > 0)
            lo = x[j].min(0).values
            hi = x[j].max(0).values
            assert (out[t] >= lo - 1e-12).all() and (out[t] <= hi + 1e-12).all()

    @given(st.integers(1, 10), st.sampled_from(["duplicate", "linear"]))
    @settings(max_examples=20, deadline=None)
    def test_identity_at_full_length(self, n, method):
        if method == "linear" and n == 1:
            return
        x = torch.rand(n, 1, 2, 2)
        assert torch.allclose(interpolate(x, n, method), x)


class TestParametric:
    def test_static_clips_pass_through(self):
        cfg = MovingShapesConfig(canvas=(16, 16), shape_size=4, speed=0, frames=8, num_appearances=2)
        ds = generate_moving_shapes(cfg, 2, 0)
        phi = train_parametric_interpolator(ds, 2, 8, InterpolatorConfig(epochs=3))
        x, _ = ds.as_tensors()
        assert reconstruction_mse(x, 2, "parametric", phi) < 1e-10
        assert reconstruction_mse(x, 2, "duplicate") < 1e-10

    def test_beats_duplication_on_motion(self):
        cfg = MovingShapesConfig(canvas=(16, 16), shape_size=4, speed=1, frames=8, num_appearances=2)
        ds = generate_moving_shapes(cfg, 6, 0)
        phi = train_parametric_interpolator(ds, 2, 8, InterpolatorConfig(epochs=40, lr=3e-3))
        x, _ = ds.as_tensors()
        assert reconstruction_mse(x, 2, "parametric", phi) < reconstruction_mse(x, 2, "duplicate")
        assert phi.trained_for == (2, 8)

    def test_identity_target_reaches_low_loss(self):
        cfg = MovingShapesConfig(canvas=(16, 16), shape_size=4, speed=1, frames=8, num_appearances=2)
        ds = generate_moving_shapes(cfg, 2, 0)
        phi = train_parametric_interpolator(ds, 8, 8, InterpolatorConfig(epochs=2))
        assert phi.history[-1] < 1e-3

    def test_mismatched_phi(self):
        cfg = MovingShapesConfig(canvas=(16, 16), shape_size=4, speed=1, frames=8, num_appearances=1)
        ds = generate_moving_shapes(cfg, 1, 0)
        phi = train_parametric_interpolator(ds, 2, 8, InterpolatorConfig(epochs=1))
        with pytest.raises(InvalidConfigError):
            interpolate(torch.rand(4, 1, 16, 16), 8, "parametric", phi)
        with pytest.raises(InvalidConfigError):
            train_parametric_interpolator(ds, 9, 8)

    def test_evenly_subsample_endpoints(self):
        x = torch.arange(16.0).view(1, 16, 1, 1, 1)
        assert evenly_subsample(x, 4).flatten().tolist() == [0, 5, 10, 15]
