import numpy as np
import pytest

from subnetdp import Tape, Tensor, backward
from subnetdp import ops
from subnetdp.errors import ConfigError, InputError, ShapeError, UsageError
from subnetdp.gradcheck import check_scalar_fn, numerical_gradient, max_rel_error

from oracles import conv2d_loops, group_norm_reference, matmul_loops


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(None, t([[1, 0], [0, 1]]), t([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[5, 6], [7, 8]])

    def test_scalar_case(self):
        out = ops.matmul(None, t([[2]]), t([[3]]))
        assert out.data[0, 0] == 6

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ops.matmul(None, t(a), t(b))
        assert np.allclose(out.data, matmul_loops(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ops.matmul(None, t(np.zeros((2, 3))), t(np.zeros((2, 2))))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ops.conv2d(None, t(x), t(np.ones((1, 1, 1, 1))), t(np.zeros(1)), 1, 0)
        assert np.array_equal(out.data, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 2, 4, 4))
        out = ops.conv2d(None, t(x), t(np.zeros((3, 2, 3, 3))), t(np.zeros(3)), 1, 1)
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_nested_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ops.conv2d(None, t(x), t(w), t(b), stride, pad)
        assert np.allclose(out.data, conv2d_loops(x, w, b, stride, pad), atol=1e-12)

    def test_non_integral_output_rejected(self):
        with pytest.raises(ConfigError, match="not integral"):
            ops.conv2d(None, t(np.zeros((1, 1, 5, 5))), t(np.zeros((1, 1, 2, 2))),
                       t(np.zeros(1)), 2, 0)


class TestGroupNorm:
    def test_constant_input_all_active(self):
        x = np.full((2, 4, 2, 2), 3.7)
        out = ops.group_norm(None, t(x), 2, t(np.ones(4)), t(np.zeros(4)),
                             np.ones(4, dtype=bool))
        assert np.allclose(out.data, 0.0, atol=1e-10)

    def test_half_inactive_matches_sliced_recompute(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 6, 4, 4))
        gamma = 1 + 0.1 * rng.normal(size=6)
        beta = 0.1 * rng.normal(size=6)
        active = np.array([True, False, True, False, True, True])
        out = ops.group_norm(None, t(x), 2, t(gamma), t(beta), active)
        ref = group_norm_reference(x, 2, gamma, beta, active)
        assert np.allclose(out.data, ref, atol=1e-12)
        assert np.all(out.data[:, ~active] == 0.0)

    def test_unit_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 8, 3, 3))
        out = ops.group_norm(None, t(x), 1, t(np.ones(8)), t(np.zeros(8)),
                             np.ones(8, dtype=bool))
        per_sample = out.data.reshape(5, -1)
        assert np.allclose(per_sample.mean(axis=1), 0.0, atol=1e-6)
        assert np.allclose(per_sample.var(axis=1), 1.0, atol=1e-4)

    def test_all_active_equals_classical(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 6, 3, 3))
        gamma = rng.normal(size=6)
        beta = rng.normal(size=6)
        active = np.ones(6, dtype=bool)
        out = ops.group_norm(None, t(x), 3, t(gamma), t(beta), active)
        ref = group_norm_reference(x, 3, gamma, beta, active)
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_empty_group_rejected(self):
        x = np.zeros((1, 4, 2, 2))
        active = np.array([True, True, False, False])
        with pytest.raises(ConfigError, match="no active channels"):
            ops.group_norm(None, t(x), 2, t(np.ones(4)), t(np.zeros(4)), active)


class TestPointwise:
    def test_relu_values(self):
        out = ops.relu(None, t([-1.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 2.0])

    def test_cross_entropy_uniform_logits(self):
        logits = np.zeros((4, 10))
        loss = ops.softmax_cross_entropy(None, t(logits), np.zeros(4, dtype=np.int64))
        assert abs(float(loss.data) - np.log(10)) < 1e-12

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(InputError, match=r"\[0, 3\)"):
            ops.softmax_cross_entropy(None, t(np.zeros((2, 3))), np.array([0, 3]))

    def test_softmax_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        err = check_scalar_fn(
            lambda tp, ts: ops.softmax_cross_entropy(tp, ts[0], labels), [logits]
        )
        assert err < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        theta = t(np.arange(6.0).reshape(2, 3), grad=True)
        tape = Tape()
        loss = ops.sum_all(tape, theta)
        grads = backward(tape, loss)
        assert np.array_equal(grads[theta.tid], np.ones((2, 3)))

    def test_half_sum_of_squares_gives_theta(self):
        vals = np.arange(5.0) - 2.0
        theta = t(vals, grad=True)
        tape = Tape()
        loss = ops.scale(tape, ops.sum_all(tape, ops.mul(tape, theta, theta)), 0.5)
        grads = backward(tape, loss)
        assert np.allclose(grads[theta.tid], vals, atol=1e-15)

    def test_mini_cnn_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 2, 4, 4))
        labels = rng.integers(0, 3, size=2)
        w1 = 0.5 * rng.normal(size=(3, 2, 3, 3))
        b1 = 0.1 * rng.normal(size=3)
        w2 = 0.5 * rng.normal(size=(3, 3))
        b2 = np.zeros(3)

        def build(tape, ts):
            h = ops.relu(tape, ops.conv2d(tape, t(x), ts[0], ts[1], 1, 1))
            pooled = ops.global_avg_pool(tape, h)
            logits = ops.linear(tape, pooled, ts[2], ts[3])
            return ops.softmax_cross_entropy(tape, logits, labels)

        err = check_scalar_fn(build, [w1, b1, w2, b2])
        assert err < 1e-4

    def test_non_scalar_loss_rejected(self):
        theta = t(np.ones(3), grad=True)
        tape = Tape()
        out = ops.relu(tape, theta)
        with pytest.raises(UsageError, match="scalar"):
            backward(tape, out)

    def test_loss_from_other_tape_rejected(self):
        theta = t(np.ones(3), grad=True)
        tape = Tape()
        loss = ops.sum_all(tape, theta)
        with pytest.raises(UsageError, match="tape"):
            backward(Tape(), loss)


class TestInvariants:
    def test_forward_determinism(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out1 = ops.conv2d(None, t(x), t(w), t(b), 1, 1)
        out2 = ops.conv2d(None, t(x.copy()), t(w.copy()), t(b.copy()), 1, 1)
        assert np.array_equal(out1.data, out2.data)

    def test_backward_linearity(self):
        rng = np.random.default_rng(9)
        vals = rng.normal(size=(3, 3))
        a, b = 1.7, -0.4

        def grad_of(build):
            theta = t(vals, grad=True)
            tape = Tape()
            loss = build(tape, theta)
            return backward(tape, loss)[theta.tid]

        def loss1(tape, theta):
            return ops.sum_all(tape, ops.mul(tape, theta, theta))

        def loss2(tape, theta):
            return ops.sum_all(tape, ops.relu(tape, theta))

        combined = grad_of(
            lambda tape, theta: ops.add(
                tape,
                ops.scale(tape, loss1(tape, theta), a),
                ops.scale(tape, loss2(tape, theta), b),
            )
        )
        expected = a * grad_of(loss1) + b * grad_of(loss2)
        assert np.max(np.abs(combined - expected)) < 1e-10

    def test_every_operator_passes_finite_differences(self):
        from subnetdp.gradcheck import operator_checks

        for name, err in operator_checks(seed=123):
            assert err < 1e-4, f"{name} failed finite differences: {err}"

    def test_finite_check_raises_on_overflow(self):
        from subnetdp.errors import NumericalError

        big = t(np.array([1e200]), grad=True)
        with pytest.raises(NumericalError):
            with np.errstate(over="ignore"):
                ops.mul(Tape(), big, big)


def test_numerical_gradient_self_check():
    # the oracle itself: d/dx sum(x^2) = 2x
    x = np.array([1.0, -2.0, 3.0])
    num = numerical_gradient(lambda v: float((v * v).sum()), x.copy())
    assert max_rel_error(2 * x, num) < 1e-9


def test_tape_activation_elements():
    x = t(np.ones((2, 3)), grad=True)
    tape = Tape()
    h = ops.relu(tape, x)
    loss = ops.sum_all(tape, h)
    assert tape.activation_elements() == 6 + 1
    assert loss.data == 6.0
