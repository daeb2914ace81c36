import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphwin import tensor as T
from morphwin.gradcheck import check_case, fd_gradient, rel_error
from morphwin.rng import Rng


def t64(a):
    return T.Tensor(np.asarray(a, dtype=np.float64))


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(t64(0.0)).item() == pytest.approx(0.5, abs=1e-15)

    def test_add_values(self):
        out = T.add(t64([1.0, 2.0]), t64([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_sigmoid_gradient_at_zero_matches_fd(self):
        # d/dx sigmoid at 0 = 0.25; central difference eps 1e-5 in double
        tape = T.Tape()
        x = tape.watch(t64(0.0))
        g = T.backward(tape, T.sigmoid(x))[x]
        eps = 1e-5
        s = lambda v: 1.0 / (1.0 + np.exp(-v))
        fd = (s(eps) - s(-eps)) / (2 * eps)
        assert abs(g.item() - fd) < 1e-8

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"2"):
            T.add(t64(np.ones((2, 3))), t64(np.ones((4, 5))))

    def test_nan_propagates(self):
        out = T.mul(t64([np.nan, 1.0]), t64([2.0, 2.0]))
        assert np.isnan(out.data[0]) and out.data[1] == 2.0

    def test_scalar_broadcast_keeps_dtype(self):
        x = T.Tensor(np.ones((2, 2), dtype=np.float32))
        assert (x * 2.0).dtype == np.float32

    def test_mixed_dtype_rejected(self):
        with pytest.raises(T.ShapeError, match="dtype"):
            T.add(T.Tensor(np.ones(2, dtype=np.float32)), t64([1.0, 2.0]))


class TestMatmul:
    def test_identity(self):
        v = np.arange(3.0).reshape(3, 1)
        out = T.matmul(t64(np.eye(3)), t64(v))
        np.testing.assert_array_equal(out.data, v)

    def test_hand_values(self):
        out = T.matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(T.ShapeError, match="inner"):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))

    def test_chain_gradient_vs_fd(self):
        rng = Rng(11)
        a = rng.uniforms(4 * 5, -1, 1).reshape(4, 5)
        b = rng.uniforms(5 * 6, -1, 1).reshape(5, 6)
        c = rng.uniforms(6 * 2, -1, 1).reshape(6, 2)
        err = check_case(
            lambda xs: T.reduce_sum(T.matmul(T.matmul(xs[0], xs[1]), xs[2])), [a, b, c]
        )
        assert err < 1e-6


class TestConv3d:
    def test_one_by_one_kernel(self):
        x = t64(np.ones((3, 3, 3, 1)))
        k = t64(np.full((1, 1, 1, 1, 1), 2.0))
        out = T.conv3d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, np.full((3, 3, 3, 1), 2.0))

    def test_output_size_formula(self):
        x = t64(np.zeros((4, 4, 4, 1)))
        k = t64(np.zeros((3, 3, 3, 1, 2)))
        assert T.conv3d(x, k, stride=2, padding=1).shape == (2, 2, 2, 2)

    def test_matches_naive_loop(self):
        rng = Rng(5)
        x = rng.uniforms(5 * 4 * 3 * 2, -1, 1).reshape(5, 4, 3, 2)
        k = rng.uniforms(27 * 2 * 3, -1, 1).reshape(3, 3, 3, 2, 3)
        stride, pad = 2, 1
        got = T.conv3d(t64(x), t64(k), stride, pad).data

        xp = np.pad(x, ((pad, pad),) * 3 + ((0, 0),))
        do, ho, wo = got.shape[:3]
        want = np.zeros_like(got)
        for z in range(do):
            for y in range(ho):
                for xx in range(wo):
                    for co in range(3):
                        acc = 0.0
                        for dz in range(3):
                            for dy in range(3):
                                for dx in range(3):
                                    for ci in range(2):
                                        acc += (xp[z * stride + dz, y * stride + dy,
                                                   xx * stride + dx, ci] * k[dz, dy, dx, ci, co])
                        want[z, y, xx, co] = acc
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_kernel_gradient_vs_fd(self):
        rng = Rng(6)
        x = rng.uniforms(125 * 2, -1, 1).reshape(5, 5, 5, 2)
        k = rng.uniforms(27 * 2 * 2, -1, 1).reshape(3, 3, 3, 2, 2)
        err = check_case(lambda xs: T.reduce_sum(T.conv3d(xs[0], xs[1], 1, 1)), [x, k])
        assert err < 1e-6

    def test_bad_stride_and_degenerate_output(self):
        x = t64(np.zeros((2, 2, 2, 1)))
        k = t64(np.zeros((3, 3, 3, 1, 1)))
        with pytest.raises(ValueError):
            T.conv3d(x, k, stride=0, padding=1)
        with pytest.raises(T.ShapeError):
            T.conv3d(x, k, stride=1, padding=0)


class TestLayerNorm:
    def test_constant_input_gives_beta(self):
        x = t64(np.full((2, 3, 4), 7.0))
        gamma, beta = t64(np.ones(4)), t64(np.linspace(0, 1, 4))
        out = T.layer_norm(x, gamma, beta)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (2, 3, 4)), atol=1e-6)

    def test_normalizes_mean_and_variance(self):
        x = t64([[1.0, 2.0, 3.0]])
        out = T.layer_norm(x, t64(np.ones(3)), t64(np.zeros(3)), eps=1e-12).data
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1.0) < 1e-6

    def test_gradient_vs_fd(self):
        rng = Rng(7)
        x = rng.uniforms(12, -1, 1).reshape(2, 6)
        g = rng.uniforms(6, 0.5, 1.5)
        b = rng.uniforms(6, -1, 1)
        w = rng.uniforms(12, -1, 1).reshape(2, 6)
        err = check_case(
            lambda xs: T.reduce_sum(T.mul(T.layer_norm(xs[0], xs[1], xs[2]), T.Tensor(w))),
            [x, g, b],
        )
        assert err < 1e-6

    def test_zero_channel_axis_rejected(self):
        with pytest.raises(T.ShapeError):
            T.layer_norm(t64(np.zeros((2, 0))), t64(np.zeros(0)), t64(np.zeros(0)))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(t64([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_large_logits_no_overflow(self):
        out = T.softmax(t64([1000.0, 0.0])).data
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)
        assert np.isfinite(out).all()

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, vals):
        out = T.softmax(t64(vals)).data
        assert abs(out.sum() - 1.0) <= 1e-9

    def test_gradient_vs_fd(self):
        rng = Rng(8)
        x = rng.uniforms(10, -1, 1).reshape(2, 5)
        w = rng.uniforms(10, -1, 1).reshape(2, 5)
        err = check_case(lambda xs: T.reduce_sum(T.mul(T.softmax(xs[0], -1), T.Tensor(w))), [x])
        assert err < 1e-6


class TestReductions:
    def test_mean_values(self):
        assert T.reduce_mean(t64([2.0, 4.0, 6.0])).item() == 4.0
        out = T.reduce_mean(t64(np.ones((2, 3))), (1,))
        np.testing.assert_array_equal(out.data, np.ones(2))

    def test_empty_axes_is_identity(self):
        x = t64([[1.0, 2.0]])
        out = T.reduce_mean(x, ())
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_length_reduction_rejected(self):
        with pytest.raises(T.ShapeError):
            T.reduce_mean(t64(np.zeros((2, 0))), (1,))

    def test_mean_gradient_vs_fd(self):
        rng = Rng(9)
        x = rng.uniforms(24, -1, 1).reshape(2, 3, 4)
        w = rng.uniforms(3, -1, 1)
        err = check_case(
            lambda xs: T.reduce_sum(T.mul(T.reduce_mean(xs[0], (0, 2)), T.Tensor(w))), [x]
        )
        assert err < 1e-7


class TestShapeOps:
    def test_reshape_roundtrip_bit_exact(self):
        x = np.arange(6.0).reshape(2, 3)
        out = T.reshape(T.reshape(t64(x), (3, 2)), (2, 3))
        assert (out.data == x).all()

    def test_permute_inverse_identity(self):
        rng = Rng(10)
        x = rng.uniforms(24).reshape(2, 3, 4)
        out = T.transpose(T.transpose(t64(x), (2, 0, 1)), (1, 2, 0))
        assert (out.data == x).all()

    def test_reshape_count_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.reshape(t64(np.ones((2, 3))), (7,))

    def test_nonslice_index_rejected(self):
        with pytest.raises(T.ShapeError):
            t64(np.ones((2, 3)))[0]

    def test_concat_gradient_routes_to_inputs(self):
        rng = Rng(12)
        a = rng.uniforms(6, -1, 1).reshape(2, 3)
        b = rng.uniforms(9, -1, 1).reshape(3, 3)
        w = rng.uniforms(15, -1, 1).reshape(5, 3)
        err = check_case(lambda xs: T.reduce_sum(T.mul(T.concat(xs, 0), T.Tensor(w))), [a, b])
        assert err < 1e-6

    @given(
        st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
        st.integers(0, 6), st.integers(0, 6),
    )
    @settings(max_examples=40, deadline=None)
    def test_roll_roundtrip(self, d, h, w, s1, s2):
        x = np.arange(float(d * h * w)).reshape(d, h, w)
        out = T.roll(T.roll(t64(x), (s1, s2), (0, 1)), (-s1, -s2), (0, 1))
        assert (out.data == x).all()


class TestBackward:
    def test_sum_gives_ones(self):
        tape = T.Tape()
        x = tape.watch(t64(np.zeros((2, 2))))
        g = T.backward(tape, T.reduce_sum(x))[x]
        np.testing.assert_array_equal(g, np.ones((2, 2)))

    def test_square_at_three(self):
        tape = T.Tape()
        x = tape.watch(t64(3.0))
        g = T.backward(tape, T.mul(x, x))[x]
        assert float(g) == pytest.approx(6.0)

    def test_unreachable_param_gets_zero(self):
        tape = T.Tape()
        x = tape.watch(t64(1.0))
        y = tape.watch(t64(2.0))
        g = T.backward(tape, T.mul(x, x))
        assert float(g[y]) == 0.0

    def test_non_scalar_loss_rejected(self):
        tape = T.Tape()
        x = tape.watch(t64([1.0, 2.0]))
        with pytest.raises(T.ShapeError):
            T.backward(tape, T.mul(x, x))

    def test_backward_twice_rejected(self):
        tape = T.Tape()
        x = tape.watch(t64(1.0))
        loss = T.mul(x, x)
        T.backward(tape, loss)
        with pytest.raises(T.TapeError):
            T.backward(tape, loss)

    def test_backward_does_not_mutate_forward_values(self):
        tape = T.Tape()
        x = tape.watch(t64([1.0, 2.0, 3.0]))
        y = T.sigmoid(x)
        z = T.mul(y, y)
        snap_y, snap_z = y.data.copy(), z.data.copy()
        T.backward(tape, T.reduce_sum(z))
        assert (y.data == snap_y).all() and (z.data == snap_z).all()

    def test_diamond_reuse_accumulates(self):
        # f = x*x + x*x -> df/dx = 4x
        tape = T.Tape()
        x = tape.watch(t64(2.0))
        s = T.mul(x, x)
        g = T.backward(tape, T.add(s, s))[x]
        assert float(g) == pytest.approx(8.0)

    def test_mixed_tapes_rejected(self):
        t1, t2 = T.Tape(), T.Tape()
        a = t1.watch(t64(1.0))
        b = t2.watch(t64(2.0))
        with pytest.raises(T.TapeError):
            T.add(a, b)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"w": t64(np.array([1.0, -2.0]))}
        st_ = T.AdamState.init(p)
        newp, _ = T.adam_step(p, {"w": np.zeros(2)}, st_)
        np.testing.assert_array_equal(newp["w"].data, p["w"].data)

    def test_first_step_magnitude_equals_lr(self):
        p = {"w": t64(0.0)}
        st_ = T.AdamState.init(p)
        newp, st2 = T.adam_step(p, {"w": np.asarray(1.0)}, st_, lr=1e-4)
        assert abs(float(newp["w"].data) + 1e-4) < 1e-11
        assert st2.step == 1

    def test_quadratic_descent(self):
        # scalar oracle: |x| decreases monotonically after warmup on f(x)=x^2
        p = {"x": t64(1.0)}
        st_ = T.AdamState.init(p)
        traj = [1.0]
        for _ in range(100):
            g = {"x": 2.0 * p["x"].data}
            p, st_ = T.adam_step(p, g, st_, lr=1e-2)
            traj.append(abs(float(p["x"].data)))
        warm = traj[5:]
        assert all(b <= a + 1e-12 for a, b in zip(warm, warm[1:]))
        assert warm[-1] < 0.5

    def test_shape_mismatch(self):
        p = {"w": t64(np.zeros(3))}
        st_ = T.AdamState.init(p)
        with pytest.raises(T.ShapeError):
            T.adam_step(p, {"w": np.zeros(2)}, st_)


class TestPrecisionAndInvariants:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_primitive_gradients_random_inputs(self, seed):
        rng = Rng(seed)
        x = rng.uniforms(6, -1, 1).reshape(2, 3)
        w = rng.uniforms(6, -1, 1).reshape(2, 3)
        err = check_case(lambda xs: T.reduce_sum(T.mul(T.sigmoid(xs[0]), T.Tensor(w))), [x])
        assert err < 1e-6

    def test_float32_forward_float64_check(self):
        x32 = T.Tensor(np.ones((2, 2), dtype=np.float32))
        assert T.sigmoid(x32).dtype == np.float32
        x64 = T.Tensor(np.ones((2, 2), dtype=np.float64))
        assert T.sigmoid(x64).dtype == np.float64
