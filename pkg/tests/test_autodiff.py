import numpy as np
import pytest

from anonlab.autodiff import (
    CatalogError,
    ShapeError,
    Tape,
    Tensor,
    apply_primitive,
    backward,
    finite_difference_check,
    ops,
    precision,
)


def scalar_sum(x):
    return ops.sum_over_axis(x)


class TestGradReverse:
    def test_forward_is_bitwise_identity(self):
        x = Tensor([1.2, -3.4], requires_grad=True)
        with Tape():
            out = ops.grad_reverse(x, 0.5)
        assert out.data is x.data

    def test_backward_scales_by_minus_alpha(self):
        x = Tensor([0.0, 0.0], requires_grad=True)
        with Tape():
            out = ops.grad_reverse(x, 0.5)
            loss = scalar_sum(out * Tensor([2.0, -1.0]))
            grads = backward(loss)
        np.testing.assert_allclose(grads.wrt(x), [-1.0, 0.5], rtol=1e-6)

    def test_alpha_zero_kills_branch(self):
        x = Tensor([4.0, 5.0], requires_grad=True)
        with Tape():
            loss = scalar_sum(ops.grad_reverse(x, 0.0) * Tensor([3.0, 7.0]))
            grads = backward(loss)
        np.testing.assert_array_equal(grads.wrt(x), [0.0, 0.0])

    def test_negative_alpha_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            ops.grad_reverse(x, -0.1)

    def test_nan_alpha_rejected(self):
        with pytest.raises(ValueError):
            ops.grad_reverse(Tensor([1.0]), float("nan"))


class TestApplyPrimitive:
    def test_matmul_hand_example(self):
        out = apply_primitive("matmul", [Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_layer_norm_example(self):
        with precision("float64"):
            out = ops.layer_norm(Tensor([2.0, 4.0, 6.0]), eps=1e-5)
        np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)
        # independent 64-bit evaluation of (x - mean) / sqrt(var + eps)
        x = np.array([2.0, 4.0, 6.0])
        expect = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        np.testing.assert_allclose(out.data, expect, rtol=1e-12)

    def test_softmax_log_uniform(self):
        out = ops.softmax_log(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [-np.log(2)] * 2, rtol=1e-6)

    def test_unknown_primitive(self):
        with pytest.raises(CatalogError):
            apply_primitive("frobnicate", [Tensor([1.0])])

    def test_shape_mismatch_message(self):
        with pytest.raises(ShapeError, match="matmul"):
            apply_primitive("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])

    def test_add_rejects_nonscalar_broadcast(self):
        with pytest.raises(ShapeError, match="expand"):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            grads = backward(scalar_sum(x * x))
        np.testing.assert_allclose(grads.wrt(x), [2.0, 4.0, 6.0], rtol=1e-6)

    def test_independent_leaf_gets_zeros(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([5.0, 5.0], requires_grad=True)
        with Tape() as tape:
            tape.register_leaf(p)
            grads = backward(scalar_sum(x * x))
        np.testing.assert_array_equal(grads.wrt(p), [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * x
            with pytest.raises(ShapeError):
                backward(y)

    def test_no_grad_leaf_receives_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])  # requires_grad False
        with Tape():
            grads = backward(scalar_sum(x * c))
        assert grads.get(c) is None
        np.testing.assert_allclose(grads.wrt(x), [3.0, 4.0])

    def test_fanout_accumulates_by_sum(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            y = x * x  # dy/dx = 2x = 4
            loss = scalar_sum(y + y + x)  # d/dx = 2*(2x) + 1 = 9
            grads = backward(loss)
        np.testing.assert_allclose(grads.wrt(x), [9.0])

    def test_linearity_in_loss_scale(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=5), requires_grad=True)
        a = 3.7

        def run(scale):
            with Tape():
                loss = scalar_sum(ops.swish(x) * x) * scale
                return backward(loss).wrt(x)

        np.testing.assert_allclose(run(a), a * run(1.0), rtol=1e-5)

    def test_combined_loss_matches_two_separate_backwards(self):
        # gradient into the shared input under reversal equals
        # d(task)/dx - alpha*lam * d(speaker)/dx computed separately
        alpha, lam = 0.5, 0.3
        rng = np.random.default_rng(1)
        with precision("float64"):
            x = Tensor(rng.normal(size=(4,)), requires_grad=True)
            w_task = Tensor(rng.normal(size=(4,)), requires_grad=True)
            w_spk = Tensor(rng.normal(size=(4,)), requires_grad=True)

            def task_loss(inp):
                return scalar_sum(ops.sigmoid(inp * w_task))

            def spk_loss(inp):
                return scalar_sum(ops.square(inp * w_spk))

            with Tape():
                combined = task_loss(x) + spk_loss(ops.grad_reverse(x, alpha)) * lam
                g_comb = backward(combined).wrt(x)
            with Tape():
                g_task = backward(task_loss(x)).wrt(x)
            with Tape():
                g_spk = backward(spk_loss(x)).wrt(x)
        expect = g_task - alpha * lam * g_spk
        np.testing.assert_allclose(g_comb, expect, rtol=1e-10)

    def test_deterministic_bitwise_repeat(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 2)), requires_grad=True)

        def run():
            with Tape():
                h = ops.swish(x @ w)
                loss = ops.mean_over_axis(ops.reshape(ops.square(h), (6,)), axis=0)
                g = backward(loss)
            return g.wrt(x).copy(), g.wrt(w).copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestTapeReplay:
    def test_replay_is_bitwise(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 6, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            h = ops.conv1d(x, w, stride=1, pad=1)
            y = ops.layer_norm(ops.swish(h))
            scalar_sum(ops.reshape(y, (-1,)))
        values = tape.replay()
        for node, val in zip(tape.nodes, values):
            assert np.array_equal(node.out, val), f"replay differs at {node.prim}"


class TestFiniteDifference:
    def test_sum_of_squares_tight(self):
        with precision("float64"):
            x = Tensor([1.0, 2.0], requires_grad=True)
            err = finite_difference_check(lambda a: scalar_sum(ops.square(a)), [x])
        assert err < 1e-8

    def test_constant_function_zero_error(self):
        with precision("float64"):
            x = Tensor([1.0, 2.0], requires_grad=True)
            c = Tensor([5.0])
            err = finite_difference_check(lambda a: scalar_sum(c * c), [x])
        assert err == 0.0

    def test_reversal_chain_differs_by_minus_alpha(self):
        # FD of the forward (identity) vs AD gradient differ by factor -alpha
        alpha = 0.3
        with precision("float64"):
            x = Tensor([0.5, -1.5], requires_grad=True)
            w = Tensor([2.0, 3.0])

            def through_grl(a):
                return scalar_sum(ops.grad_reverse(a, alpha) * w)

            with Tape():
                ad = backward(through_grl(x)).wrt(x)
        np.testing.assert_allclose(ad, -alpha * w.data, rtol=1e-12)

    def test_composite_adversarial_loss_passes_with_surrogate(self):
        alpha, lam = 0.3, 0.5
        rng = np.random.default_rng(5)
        with precision("float64"):
            x = Tensor(rng.normal(size=4), requires_grad=True)
            wt = Tensor(rng.normal(size=4))
            ws = Tensor(rng.normal(size=4))

            def composite(a):
                task = scalar_sum(ops.sigmoid(a * wt))
                spk = scalar_sum(ops.square(ops.grad_reverse(a, alpha) * ws))
                return task + spk * lam

            def surrogate(a):
                task = scalar_sum(ops.sigmoid(a * wt))
                spk = scalar_sum(ops.square(a * ws))
                return task - spk * (alpha * lam)

            err = finite_difference_check(composite, [x], fd_f=surrogate)
        assert err < 1e-6

    def test_requires_float64_mode(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError, match="float64"):
            finite_difference_check(lambda a: scalar_sum(a), [x])


class TestTensorBasics:
    def test_shape_data_invariant(self):
        t = Tensor(np.ones((3, 4)))
        assert int(np.prod(t.shape)) == t.data.size

    def test_precision_mode_is_global(self):
        t32 = Tensor([1.0])
        assert t32.data.dtype == np.float32
        with precision("float64"):
            t64 = Tensor([1.0])
            assert t64.data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_two_tapes_on_disjoint_data(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        with Tape():
            gx = backward(scalar_sum(x * x)).wrt(x)
        with Tape():
            gy = backward(scalar_sum(y * y * y)).wrt(y)
        np.testing.assert_allclose(gx, [2.0, 4.0])
        np.testing.assert_allclose(gy, [27.0, 48.0])
