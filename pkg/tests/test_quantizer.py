import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiquant.engine import NonFiniteError, Tensor, finite_diff_check, ops
from multiquant.quantizer import (
    CODE_HEADER,
    MIN_GAP,
    QuantizerParams,
    dequantize,
    deserialize_codes,
    fake_quantize,
    init_clip_params,
    normalize,
    pack_codes,
    packed_size,
    quantize,
    serialize_codes,
    unpack_codes,
)


def qp(lo=-1.0, hi=1.0, bits=2, role="weight", mode="nearest"):
    return QuantizerParams(lo, hi, bits, role, mode)


class TestScalarSteps:
    def test_normalize(self):
        p = qp()
        assert normalize(0.4, p) == pytest.approx(0.7)
        assert normalize(-1.0, p) == 0.0
        assert normalize(3.0, p) == 1.0

    def test_quantize_nearest_and_floor(self):
        assert quantize(0.7, qp()) == 2
        assert quantize(0.6, qp(mode="floor")) == 1
        assert quantize(0.6, qp(mode="nearest")) == 2
        for b in (2, 3, 8):
            assert quantize(1.0, qp(bits=b)) == 2**b - 1

    def test_round_ties_away_from_zero(self):
        p = qp(bits=2)
        assert quantize(0.5, p) == 2  # 1.5 -> 2
        assert quantize(1.0 / 6.0, p) == 1  # 0.5 -> 1

    def test_dequantize(self):
        assert dequantize(2, qp()) == pytest.approx(1.0 / 3.0)
        assert dequantize(0, qp()) == -1.0
        assert dequantize(255, qp(lo=0.0, bits=8, role="activation")) == 1.0

    def test_dequantize_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            dequantize(np.array([4]), qp())
        with pytest.raises(ValueError):
            dequantize(np.array([-1]), qp())

    def test_fake_quantize_chain(self):
        out = fake_quantize(Tensor([0.4]), qp())
        assert out.data[0] == pytest.approx(1.0 / 3.0)

    def test_grid_points_are_fixed(self):
        grid = Tensor(dequantize(np.arange(4), qp()))
        np.testing.assert_array_equal(fake_quantize(grid, qp()).data, grid.data)

    def test_ste_slope_at_interior_point(self):
        x = Tensor([0.4], requires_grad=True)
        ops.sum(fake_quantize(x, qp())).backward()
        assert x.grad[0] == pytest.approx(1.0)

    def test_nonfinite_input_names_layer(self):
        p = QuantizerParams(-1, 1, 2, name="body.0.wq")
        with pytest.raises(NonFiniteError, match="body.0.wq"):
            fake_quantize(Tensor([np.inf]), p)


class TestClipGap:
    def test_collapsed_interval_is_projected(self):
        p = qp(lo=0.5, hi=0.5)
        assert float(p.upper.data - p.lower.data) == pytest.approx(MIN_GAP)
        assert p.gap_projections == 1
        p.upper.data[...] = -3.0
        fake_quantize(Tensor([0.0]), p)
        assert p.gap_projections == 2
        assert float(p.upper.data - p.lower.data) == pytest.approx(MIN_GAP)


class TestFixedBits:
    def test_fixed_bit_width_cannot_change(self):
        p = QuantizerParams(-1, 1, 2, fixed_bits=True)
        with pytest.raises(AttributeError):
            p.bits = 4
        assert p.bits == 2

    def test_free_bit_width_switches(self):
        p = qp()
        p.bits = 8
        assert p.levels == 255


class TestInit:
    def test_weights_three_sigma(self):
        x = np.random.default_rng(0).standard_normal(200_000)
        p = init_clip_params(x, "weight", 2)
        assert float(p.lower.data) == pytest.approx(-3.0, abs=0.03)
        assert float(p.upper.data) == pytest.approx(3.0, abs=0.03)
        assert float(p.lower.data) == -float(p.upper.data)

    def test_zero_tensor_fallback(self):
        p = init_clip_params(np.zeros(10), "weight", 2)
        assert (float(p.lower.data), float(p.upper.data)) == (-1.0, 1.0)

    def test_activation_percentile(self):
        x = np.random.default_rng(1).uniform(0, 5, 100_000)
        p = init_clip_params(x, "activation", 4)
        assert float(p.lower.data) == 0.0
        assert float(p.upper.data) == pytest.approx(5.0, abs=0.02)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            init_clip_params(np.array([]), "weight", 2)


bounds = st.tuples(st.floats(-5, 5), st.floats(1e-2, 10)).map(lambda t: (t[0], t[0] + t[1]))
bit_widths = st.sampled_from([2, 3, 4, 8])
roles = st.sampled_from(["weight", "activation"])


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(bits=bit_widths, role=roles, seed=st.integers(0, 2**32 - 1))
    def test_idempotent_on_matching_range(self, bits, role, seed):
        # the dequantized range equals [l, u] here, so a second pass sees grid points
        lo = -1.0 if role == "weight" else 0.0
        p = QuantizerParams(lo, 1.0, bits, role)
        x = np.random.default_rng(seed).uniform(-2, 2, 500)
        once = fake_quantize(Tensor(x), p).data
        np.testing.assert_array_equal(fake_quantize(Tensor(once), p).data, once)

    @settings(max_examples=60, deadline=None)
    @given(lu=bounds, bits=bit_widths, role=roles, seed=st.integers(0, 2**32 - 1))
    def test_code_level_idempotence(self, lu, bits, role, seed):
        p = QuantizerParams(lu[0], lu[1], bits, role)
        x = np.random.default_rng(seed).uniform(lu[0] - 1, lu[1] + 1, 500)
        q = quantize(normalize(x, p), p)
        back = lu[0] + (lu[1] - lu[0]) * q / p.levels
        np.testing.assert_array_equal(quantize(normalize(back, p), p), q)

    @settings(max_examples=60, deadline=None)
    @given(lu=bounds, bits=bit_widths, role=roles, mode=st.sampled_from(["nearest", "floor"]), seed=st.integers(0, 2**32 - 1))
    def test_range_and_monotonic(self, lu, bits, role, mode, seed):
        p = QuantizerParams(lu[0], lu[1], bits, role, mode)
        x = np.sort(np.random.default_rng(seed).uniform(lu[0] - 2, lu[1] + 2, 1000))
        out = fake_quantize(Tensor(x), p).data
        assert np.all(np.diff(out) >= 0)
        lo = -1.0 if role == "weight" else 0.0
        assert out.min() >= lo and out.max() <= 1.0
        q = quantize(normalize(x, p), p)
        assert q.min() >= 0 and q.max() <= 2**bits - 1

    @settings(max_examples=30, deadline=None)
    @given(lu=bounds, bits=bit_widths, role=roles)
    def test_code_count(self, lu, bits, role):
        p = QuantizerParams(lu[0], lu[1], bits, role)
        # step well below one bin width so no code is jumped over
        bin_width = (lu[1] - lu[0]) / p.levels
        sweep = np.linspace(lu[0] - 1, lu[1] + 1, int((lu[1] - lu[0] + 2) / bin_width * 4) + 2)
        assert np.unique(fake_quantize(Tensor(sweep), p).data).size == 2**bits

    @settings(max_examples=25, deadline=None)
    @given(lu=bounds, bits=bit_widths, role=roles, seed=st.integers(0, 2**32 - 1))
    def test_ste_matches_surrogate_differences(self, lu, bits, role, seed):
        rng = np.random.default_rng(seed)
        p = QuantizerParams(lu[0], lu[1], bits, role)
        x = Tensor(rng.uniform(lu[0] - 0.5, lu[1] + 0.5, 12), requires_grad=True)
        coef = Tensor(rng.standard_normal(12))

        def loss():
            return ops.sum(ops.mul(fake_quantize(x, p), coef))

        for target in (x, p.lower, p.upper):
            res = finite_diff_check(loss, target, 1e-6)
            if res.conclusive:
                assert res.max_rel_error <= 1e-6

    def test_floor_mode_biases_codes_down(self):
        xn = np.random.default_rng(3).uniform(0, 1, 100_000)
        for b in (2, 3, 4, 8):
            assert quantize(xn, qp(bits=b, mode="floor")).mean() < quantize(xn, qp(bits=b)).mean()


class TestPacking:
    def test_bit_order(self):
        assert pack_codes(np.array([1, 2, 3, 0]), 2) == bytes([1 | 2 << 2 | 3 << 4])

    def test_thousand_weights_take_250_bytes(self):
        q = np.random.default_rng(0).integers(0, 4, 1000)
        assert len(pack_codes(q, 2)) == 250 == packed_size(1000, 2)

    @pytest.mark.parametrize("bits", [2, 3, 5, 8])
    def test_round_trip(self, bits):
        q = np.random.default_rng(bits).integers(0, 2**bits, (7, 13))
        np.testing.assert_array_equal(unpack_codes(pack_codes(q, bits), bits, q.size), q.reshape(-1))

    def test_serialized_header(self):
        p = qp(lo=-0.75, hi=1.25)
        q = np.array([[0, 1], [2, 3]])
        blob = serialize_codes(q, p)
        assert len(blob) == CODE_HEADER.size + 1 == 8 + 8 + 1 + 1
        lo, hi, bits, codes = deserialize_codes(blob, 4)
        assert (lo, hi, bits) == (-0.75, 1.25, 2)
        np.testing.assert_array_equal(codes, [0, 1, 2, 3])

    def test_oversized_code_rejected(self):
        with pytest.raises(ValueError):
            pack_codes(np.array([4]), 2)
