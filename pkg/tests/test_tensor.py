import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carafe import oracles
from carafe.errors import ConfigError, ShapeError
from carafe.gradcheck import check_conv2d, check_softmax
from carafe.tensor import (
    ConvSpec, add, conv2d_backward, conv2d_forward, count_flops, decode_tensor,
    encode_tensor, make_rng, mul_broadcast_channel, mul_scalar, read_archive,
    read_tensor, rng_normal, sgd_step, softmax, softmax_backward, write_archive,
    write_tensor,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestConv2d:
    def test_identity_1x1(self):
        x = make_rng(0).normal(size=(3, 4, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros(3)), x)

    def test_ones_counts_in_bounds_taps(self):
        out = conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out[0, 1, 1] == 9
        for y, x in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[0, y, x] == 4
        assert out[0, 0, 1] == 6

    def test_matches_loop_exactly_on_integer_data(self):
        # integer-valued data keeps every partial sum exact in float64
        rng = make_rng(3)
        x = rng.integers(-4, 5, size=(2, 4, 4)).astype(float)
        w = rng.integers(-3, 4, size=(3, 2, 3, 3)).astype(float)
        b = rng.integers(-2, 3, size=3).astype(float)
        np.testing.assert_array_equal(conv2d_forward(x, w, b), oracles.conv2d_loop(x, w, b))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_random(self, seed):
        rng = make_rng(seed)
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        np.testing.assert_allclose(conv2d_forward(x, w, b), oracles.conv2d_loop(x, w, b),
                                   rtol=0, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ConvSpec(1, 1, 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_forward(np.ones((2, 3, 3)), np.ones((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeError):
            conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(2))
        with pytest.raises(ShapeError):
            conv2d_backward(np.ones((2, 3, 3)), np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(seeds, st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, seed, a, b):
        rng = make_rng(seed)
        x, y = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        zero = np.zeros(3)
        lhs = conv2d_forward(a * x + b * y, w, zero)
        rhs = a * conv2d_forward(x, w, zero) + b * conv2d_forward(y, w, zero)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


class TestConv2dBackward:
    def test_zero_grad(self):
        rng = make_rng(1)
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        for g in conv2d_backward(np.zeros((3, 4, 4)), x, w):
            assert not g.any()

    def test_identity_passes_grad_through(self):
        g = make_rng(2).normal(size=(3, 4, 4))
        gx, _, _ = conv2d_backward(g, np.ones((3, 4, 4)), np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_array_equal(gx, g)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        for r in check_conv2d(seed):
            assert r.worst < 1e-5, r


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("v", [-1e6, 0.0, 3.5, 1e300])
    def test_single(self, v):
        assert softmax([v]).tolist() == [1.0]

    def test_no_overflow(self):
        out = softmax([1000.0, 1000.0 + math.log(2)])
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=1e-12)

    def test_empty(self):
        with pytest.raises(ShapeError):
            softmax([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_simplex(self, values):
        out = softmax(values)
        assert np.all(out > 0) and np.all(out <= 1)
        assert abs(out.sum() - 1) < 1e-12

    def test_backward_constant_grad(self):
        s = softmax(make_rng(0).normal(size=6))
        np.testing.assert_allclose(softmax_backward(np.full(6, 2.5), s), 0, atol=1e-15)

    def test_backward_saturated(self):
        out = np.array([1.0, 0.0, 0.0])
        assert softmax_backward(np.array([0.3, -1.0, 2.0]), out)[0] == 0.0

    def test_backward_length_mismatch(self):
        with pytest.raises(ShapeError):
            softmax_backward(np.ones(3), np.ones(4) / 4)

    @pytest.mark.parametrize("seed", range(20))
    def test_backward_finite_differences(self, seed):
        for r in check_softmax(seed):
            assert r.worst < 1e-5, r


class TestElementwise:
    def test_sgd_plain(self):
        p, state = sgd_step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 1.0, 0.0)
        np.testing.assert_array_equal(p, [0.5, 3.0])

    def test_sgd_momentum_recurrence(self):
        p, v = sgd_step(np.zeros(1), np.ones(1), 0.1, 0.9)
        assert v[0] == pytest.approx(1.0) and p[0] == pytest.approx(-0.1)
        p2, v = sgd_step(p, np.ones(1), 0.1, 0.9, v)
        assert v[0] == pytest.approx(1.9)
        assert p2[0] - p[0] == pytest.approx(-0.19)

    def test_broadcast_identity(self):
        x = make_rng(0).normal(size=(3, 4, 5))
        np.testing.assert_array_equal(mul_broadcast_channel(x, np.ones((1, 4, 5))), x)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            add(np.ones(3), np.ones(4))
        with pytest.raises(ShapeError):
            mul_broadcast_channel(np.ones((2, 3, 3)), np.ones((2, 3, 3)))
        with pytest.raises(ShapeError):
            sgd_step(np.ones(3), np.ones(2), 0.1, 0.0)

    def test_mul_scalar(self):
        np.testing.assert_array_equal(mul_scalar(np.arange(3.0), 2), [0, 2, 4])


class TestRng:
    def test_deterministic(self):
        a = rng_normal(make_rng(42), 100, 1.0)
        b = rng_normal(make_rng(42), 100, 1.0)
        np.testing.assert_array_equal(a, b)

    def test_seed_sensitive(self):
        assert not np.array_equal(rng_normal(make_rng(1), 10, 1.0), rng_normal(make_rng(2), 10, 1.0))

    def test_moments(self):
        v = rng_normal(make_rng(7), 100_000, 1.0)
        assert abs(v.mean()) < 0.02
        assert abs(v.std() - 1.0) < 0.02

    def test_bad_std(self):
        with pytest.raises(ConfigError):
            rng_normal(make_rng(0), 3, 0.0)


class TestFlopCounter:
    def test_conv_count(self):
        x = np.ones((4, 3, 5))
        with count_flops() as c:
            conv2d_forward(x, np.ones((6, 4, 3, 3)), np.zeros(6))
        assert c.total == 2 * (4 * 9 + 1) * 6 * 15

    def test_inactive_outside_block(self):
        with count_flops() as c:
            pass
        conv2d_forward(np.ones((1, 2, 2)), np.ones((1, 1, 1, 1)), np.zeros(1))
        assert c.total == 0


class TestCTNS:
    def test_layout(self):
        blob = encode_tensor(np.arange(6.0).reshape(1, 2, 3))
        assert blob[:4] == b"CTNS"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 3
        assert [int.from_bytes(blob[12 + 8 * i:20 + 8 * i], "little") for i in range(3)] == [1, 2, 3]
        assert np.frombuffer(blob[36:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]

    def test_round_trip(self, tmp_path):
        x = make_rng(0).normal(size=(3, 4, 5))
        write_tensor(tmp_path / "x.ctns", x)
        np.testing.assert_array_equal(read_tensor(tmp_path / "x.ctns"), x)
        buf = io.BytesIO()
        write_tensor(buf, x)
        buf.seek(0)
        np.testing.assert_array_equal(read_tensor(buf), x)

    def test_bad_magic(self):
        with pytest.raises(ShapeError):
            decode_tensor(b"XXXX" + bytes(20))

    def test_truncated(self):
        with pytest.raises(ShapeError):
            decode_tensor(encode_tensor(np.ones((2, 2)))[:-8])

    def test_archive(self, tmp_path):
        tensors = {"a": np.ones((2, 3)), "b": np.arange(4.0).reshape(1, 2, 2)}
        write_archive(tmp_path / "p.ctns", tensors, meta={"note": "x"})
        got, meta = read_archive(tmp_path / "p.ctns")
        assert list(got) == ["a", "b"] and meta == {"note": "x"}
        for k in tensors:
            np.testing.assert_array_equal(got[k], tensors[k])
