import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepquant import numerics as nx
from stepquant.diffusion import Architecture, init_params
from stepquant.numerics import Node
from stepquant.quantizer import (FULL_PRECISION, LayerQuantTable, QuantContext, QuantParams,
                                 calibrate_scale, candidate_scales, int_bounds, quantize,
                                 quantize_node, quantize_weights, quantize_with, round_half_away)


class TestQuantParams:
    @pytest.mark.parametrize("bits", [2, 3, 6, 8])
    def test_signed_bounds(self, bits):
        q = QuantParams(0.1, bits)
        assert q.z_min == -(2 ** (bits - 1)) and q.z_max == 2 ** (bits - 1) - 1
        assert q.z_max - q.z_min == 2 ** bits - 1

    @pytest.mark.parametrize("scale,bits", [(0.0, 8), (-1.0, 8), (1.0, 1), (1.0, 4.5)])
    def test_invalid(self, scale, bits):
        with pytest.raises(ValueError):
            QuantParams(scale, bits)

    def test_dict_round_trip(self):
        for q in (QuantParams(0.0123, 6), QuantParams(1.0, FULL_PRECISION)):
            assert QuantParams.from_dict(q.to_dict()) == q


class TestQuantize:
    def test_zero(self):
        assert quantize([0.0], QuantParams(0.37, 4)).tolist() == [0.0]

    def test_rounds(self):
        assert quantize([2.4], QuantParams(1.0, 3)).tolist() == [2.0]

    def test_clips(self):
        assert quantize([7.2], QuantParams(1.0, 3)).tolist() == [3.0]
        assert quantize([-9.0], QuantParams(1.0, 3)).tolist() == [-4.0]

    def test_half_away_from_zero(self):
        assert round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -2.5])).tolist() == \
            [1.0, 2.0, 3.0, -1.0, -3.0]

    def test_full_precision_is_identity(self):
        x = np.random.default_rng(0).standard_normal(20)
        np.testing.assert_array_equal(quantize(x, QuantParams(0.5, FULL_PRECISION)), x)

    def test_row_scales(self):
        x = np.array([[0.26, 0.26], [0.26, 0.26]])
        out = quantize_with(x, np.array([[0.1], [0.2]]), 8)
        np.testing.assert_allclose(out, [[0.3, 0.3], [0.2, 0.2]])

    def test_eight_bit_beats_six_bit(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        err = {b: np.mean((x - quantize(x, calibrate_scale(x, b))) ** 2) for b in (8, 6)}
        assert err[8] < err[6]


scales = st.floats(1e-3, 10.0)
values = st.floats(-1e4, 1e4, allow_nan=False)
bitwidths = st.sampled_from([6, 8])


@settings(max_examples=300, deadline=None)
@given(st.lists(values, min_size=1, max_size=20), scales, bitwidths)
def test_idempotent(xs, s, bits):
    q = QuantParams(s, bits)
    once = quantize(xs, q)
    np.testing.assert_array_equal(quantize(once, q), once)


@settings(max_examples=300, deadline=None)
@given(values, values, scales, bitwidths)
def test_monotone(a, b, s, bits):
    lo, hi = sorted((a, b))
    q = QuantParams(s, bits)
    assert quantize([lo], q)[0] <= quantize([hi], q)[0]


@settings(max_examples=300, deadline=None)
@given(values, scales, bitwidths)
def test_on_grid(x, s, bits):
    q = QuantParams(s, bits)
    z = quantize([x], q)[0] / s
    assert abs(z - round(z)) <= 4 * np.spacing(abs(z) + 1.0)
    assert q.z_min <= round(z) <= q.z_max


@settings(max_examples=300, deadline=None)
@given(st.floats(-1.0, 1.0), scales, bitwidths)
def test_half_step_error(frac, s, bits):
    lo, hi = int_bounds(bits)
    x = frac * (hi if frac > 0 else -lo) * s
    assert abs(x - quantize([x], QuantParams(s, bits))[0]) <= s / 2 * (1 + 1e-12)


class TestQuantizeNode:
    def test_forward_matches_quantize(self):
        x = np.linspace(-3, 3, 41)
        out = quantize_node(Node.const(x), Node.param([0.07]), 6)
        np.testing.assert_array_equal(out.value, quantize(x, QuantParams(0.07, 6)))

    def test_inside_range_passes_gradient(self):
        x = Node.param([0.11, -0.33, 0.5])
        nx.backward(nx.reduce_sum(quantize_node(x, Node.param([0.1]), 8)))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_far_above_range(self):
        bits = 4
        x = Node.param([50.0])
        s = Node.param([1.0])
        nx.backward(nx.reduce_sum(quantize_node(x, s, bits)))
        _, hi = int_bounds(bits)
        assert x.grad.tolist() == [0.0]
        assert s.grad[0] == pytest.approx(hi / math.sqrt(1 * hi))

    def test_mixed_batch_matches_piecewise_oracle(self, oracle):
        case = oracle["lsq"]
        x = Node.param(case["x"])
        s = Node.param([case["scale"]])
        out = quantize_node(x, s, case["bits"])
        np.testing.assert_allclose(out.value, case["value"], rtol=0, atol=1e-15)
        nx.backward(nx.reduce_sum(out * Node.const(case["upstream"])))
        assert s.grad[0] == pytest.approx(case["grad_scale"], rel=1e-12)
        np.testing.assert_array_equal(x.grad, case["grad_x"])

    def test_non_positive_scale(self):
        with pytest.raises(ValueError):
            quantize_node(Node.const([1.0]), Node.param([0.0]), 8)

    def test_full_precision_passthrough(self):
        x = Node.param([1.234])
        s = Node.param([0.1])
        out = quantize_node(x, s, FULL_PRECISION)
        nx.backward(nx.reduce_sum(out))
        assert out.value.tolist() == [1.234] and x.grad.tolist() == [1.0]
        assert s.grad is None or s.grad.tolist() == [0.0]


class TestCalibration:
    def test_matches_grid_search_oracle(self, oracle):
        for case in oracle["calibrate_scale"]:
            q = calibrate_scale(case["samples"], case["bits"], case["p"])
            assert q.scale == case["scale"] and q.bits == case["bits"]

    def test_scale_equivariance(self):
        x = np.random.default_rng(3).standard_normal(300)
        base = calibrate_scale(x, 8).scale
        for c in (0.5, 2.0, 8.0):
            assert calibrate_scale(c * x, 8).scale == pytest.approx(c * base, rel=1e-12)
            grid_index = np.argmin(np.abs(candidate_scales(np.max(np.abs(c * x)), 8)
                                          - calibrate_scale(c * x, 8).scale))
            assert candidate_scales(np.max(np.abs(x)), 8)[grid_index] == pytest.approx(base)

    def test_ties_go_to_smaller_scale(self):
        # -3 is exact at both candidates (z = -2 at s = 1.5 and z = -1 at s = 3)
        q = calibrate_scale([-3.0, -3.0], 2, p=2.0, n_grid=2)
        assert q.scale == 1.5

    @pytest.mark.parametrize("samples", [[], [0.0, 0.0]])
    def test_degenerate_input(self, samples):
        with pytest.raises(ValueError):
            calibrate_scale(samples, 8)


class TestWeights:
    def test_full_precision_leaves_params(self):
        p = init_params(Architecture(hidden=(8,)), np.random.default_rng(0))
        qp, table = quantize_weights(p, FULL_PRECISION)
        for a, b in zip(qp.weights, p.weights):
            np.testing.assert_array_equal(a, b)
        assert all(q.is_identity for q in table.values())

    def test_grid_aligned_weights_unchanged(self):
        p = init_params(Architecture(hidden=(8,)), np.random.default_rng(0))
        for i, w in enumerate(p.weights):
            s = np.max(np.abs(w)) / 127
            p.weights[i] = s * np.clip(np.round(w / s), -128, 127)
        qp, _ = quantize_weights(p, 8)
        for a, b in zip(qp.weights, p.weights):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    def test_layer_mse_matches_oracle(self, oracle):
        case = oracle["weight_layer"]
        w = np.array(case["weight"])
        q = calibrate_scale(w, case["bits"], case["p"])
        assert q.scale == case["scale"]
        assert np.mean((w - quantize(w, q)) ** 2) == pytest.approx(case["mse"], rel=1e-12)

    def test_biases_untouched(self):
        p = init_params(Architecture(hidden=(8,)), np.random.default_rng(0))
        qp, table = quantize_weights(p, 6)
        assert sorted(table) == ["fc0", "fc1"]
        for a, b in zip(qp.biases, p.biases):
            np.testing.assert_array_equal(a, b)


def test_layer_table_round_trip():
    t = LayerQuantTable("fc1", [QuantParams(0.1, 8), QuantParams(0.2, 8)], QuantParams(0.01, 8))
    assert LayerQuantTable.from_dict(t.to_dict()) == t
    with pytest.raises(ValueError):
        LayerQuantTable("fc1", [], QuantParams(0.01, 8))


def test_context_uses_each_rows_group():
    fine, coarse = QuantParams(0.01, 8), QuantParams(0.5, 8)
    tables = {"fc0": LayerQuantTable("fc0", [fine, coarse], QuantParams(1.0, FULL_PRECISION)),
              "fc1": LayerQuantTable("fc1", [fine, coarse], QuantParams(1.0, FULL_PRECISION))}
    assignment = np.array([0, 1])
    ctx = QuantContext(tables, assignment)
    a = Node.const(np.full((2, 4), 0.3))
    out = ctx.activation("fc1", a, np.array([1, 2]))
    np.testing.assert_allclose(out.value[0], 0.3)
    np.testing.assert_allclose(out.value[1], 0.5)
