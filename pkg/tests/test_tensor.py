import numpy as np
import pytest

from nn.tensor import (
    Parameter, Tape, Tensor, add, apply_op, backward, clamp, concat, div, elementwise, exp,
    grad_check, log, matmul, mean, mul, no_grad, power, relu, reshape, sigmoid, softmax, sub,
    sum_, transpose,
)

def run_backward(fn, *tensors):
    with Tape() as tape:
        out = fn(*tensors)
    backward(out, tape)
    return out

class TestElementwise:
    def test_add_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        run_backward(lambda a, b: sum_(add(a, b)), a, b)
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.full(3, 2.0))

    def test_incompatible_shapes_are_rejected_with_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_division_by_zero_is_rejected(self):
        with pytest.raises(ValueError):
            div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))

    def test_log_of_nonpositive_is_rejected(self):
        with pytest.raises(ValueError):
            log(Tensor([1.0, 0.0]))

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))

    def test_sigmoid_symmetry(self, rng):
        x = rng.uniform(-30, 30, 500)
        total = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(total, 1.0, rtol=0, atol=1e-12)

    def test_add_is_commutative(self, rng):
        for _ in range(20):
            a_data, b_data = rng.standard_normal((3, 4)), rng.standard_normal(4)
            a1, b1 = Tensor(a_data, requires_grad=True), Tensor(b_data, requires_grad=True)
            a2, b2 = Tensor(a_data, requires_grad=True), Tensor(b_data, requires_grad=True)
            w = Tensor(rng.standard_normal((3, 4)))
            ab = run_backward(lambda a, b: sum_(mul(add(a, b), w)), a1, b1)
            ba = run_backward(lambda a, b: sum_(mul(add(b, a), w)), a2, b2)
            assert ab.item() == ba.item()
            np.testing.assert_array_equal(a1.grad, a2.grad)
            np.testing.assert_array_equal(b1.grad, b2.grad)

    def test_gradient_is_linear(self, rng):
        f = lambda x: sum_(mul(sigmoid(x), x))
        g = lambda x: sum_(exp(mul(x, 0.5)))
        for _ in range(20):
            data = rng.standard_normal(6)
            a, b = rng.uniform(-3, 3, 2)
            grads = []
            for fn in (f, g, lambda x: add(mul(f(x), a), mul(g(x), b))):
                x = Tensor(data, requires_grad=True)
                run_backward(fn, x)
                grads.append(x.grad)
            np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], rtol=1e-12, atol=1e-12)

    def test_dispatch_by_kind(self):
        a, b = Tensor([2.0]), Tensor([3.0])
        assert elementwise("mul", a, b).item() == 6.0
        assert elementwise("relu", Tensor([-1.0])).item() == 0.0
        with pytest.raises(ValueError):
            elementwise("mul", a)
        with pytest.raises(ValueError):
            elementwise("unknown", a, b)

    def test_scalar_operand_keeps_tensor_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert sub(1.0, x).dtype == np.float32
        assert mul(x, 0.5).dtype == np.float32

class TestMatmul:
    def test_forward_matches_numpy(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_forward_matches_loop_oracle(self, rng):
        for shape_a, shape_b in [((3, 4), (4, 5)), ((2, 3, 4), (4, 2)), ((2, 1, 3), (2, 3, 2))]:
            a, b = rng.standard_normal(shape_a), rng.standard_normal(shape_b)
            out = matmul(Tensor(a), Tensor(b)).data
            a3 = a.reshape((-1,) + a.shape[-2:])
            b3 = np.broadcast_to(b, a.shape[:-2] + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
            expected = np.zeros((len(a3), a.shape[-2], b.shape[-1]))
            for n in range(len(a3)):
                for i in range(a.shape[-2]):
                    for j in range(b.shape[-1]):
                        for k in range(a.shape[-1]):
                            expected[n, i, j] += a3[n, i, k] * b3[n, k, j]
            np.testing.assert_allclose(out.reshape(expected.shape), expected, rtol=1e-12, atol=1e-12)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ValueError, match="internes"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_rank_limit(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_broadcast_weight_gradient(self, rng, weighted_sum):
        w = Tensor(rng.standard_normal((4, 5)))
        f = weighted_sum(lambda a: matmul(a, w), (2, 3, 5))
        assert grad_check(f, Tensor(rng.standard_normal((2, 3, 4)))).passed
        x = Tensor(rng.standard_normal((2, 3, 4)))
        g = weighted_sum(lambda b: matmul(x, b), (2, 3, 5))
        assert grad_check(g, Tensor(rng.standard_normal((4, 5)))).passed

class TestTape:
    def test_no_recording_without_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        out = mul(x, x)
        assert not out.requires_grad

    def test_no_grad_suspends_recording(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                mul(x, x)
        assert len(tape) == 0

    def test_reused_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        run_backward(lambda x: sum_(add(mul(x, x), x)), x)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_unreachable_tensor_gets_zero_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([5.0], requires_grad=True)
        with Tape() as tape:
            mul(y, y)
            out = sum_(x)
        backward(out, tape)
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_unused_parameter_gets_zero_gradient(self):
        used, unused = Parameter([1.0, 2.0]), Parameter(np.ones((2, 2)))
        with Tape() as tape:
            out = sum_(mul(used, used))
        backward(out, tape, [used, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))
        np.testing.assert_array_equal(used.grad, [2.0, 4.0])

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = mul(x, 2.0)
        with pytest.raises(ValueError, match="scalaire"):
            backward(out, tape)

    def test_bad_rule_shape_is_a_runtime_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = apply_op(x.data * 2, (x,), lambda g: (np.ones(4),))
            out = sum_(y)
        with pytest.raises(RuntimeError):
            backward(out, tape)

    def test_parameter_requires_grad(self):
        assert Parameter(np.zeros(2)).requires_grad

class TestGradCheck:
    @pytest.mark.parametrize("op", [
        lambda x: sigmoid(x),
        lambda x: exp(mul(x, 0.5)),
        lambda x: log(add(mul(x, x), 1.0)),
        lambda x: softmax(x, axis=-1),
        lambda x: power(add(mul(x, x), 1.0), 1.5),
        lambda x: div(x, add(mul(x, x), 2.0)),
    ])
    def test_smooth_ops(self, rng, weighted_sum, op):
        x = Tensor(rng.standard_normal((3, 4)))
        report = grad_check(weighted_sum(op, (3, 4)), x)
        assert report.passed, report

    def test_relu_away_from_kink(self, rng, weighted_sum):
        data = rng.uniform(0.1, 1.0, (4, 4)) * rng.choice([-1, 1], (4, 4))
        assert grad_check(weighted_sum(relu, (4, 4)), Tensor(data)).passed

    def test_shape_ops(self, rng, weighted_sum):
        op = lambda x: transpose(reshape(x, (2, 3, 2)), (2, 0, 1))
        assert grad_check(weighted_sum(op, (2, 2, 3)), Tensor(rng.standard_normal((3, 4)))).passed
        op = lambda x: concat([x, mul(x, x)], axis=1)
        assert grad_check(weighted_sum(op, (3, 8)), Tensor(rng.standard_normal((3, 4)))).passed

    def test_reductions(self, rng, weighted_sum):
        op = lambda x: mean(x, axis=(0, 2), keepdims=True)
        assert grad_check(weighted_sum(op, (1, 3, 1)), Tensor(rng.standard_normal((2, 3, 4)))).passed
        op = lambda x: sum_(x, axis=1)
        assert grad_check(weighted_sum(op, (2, 4)), Tensor(rng.standard_normal((2, 3, 4)))).passed

    def test_clamp_interior(self, rng, weighted_sum):
        data = rng.uniform(0.2, 0.8, (5,))
        assert grad_check(weighted_sum(lambda x: clamp(x, 0.1, 0.9), (5,)), Tensor(data)).passed

    def test_wrong_rule_is_detected(self, rng):
        def doubled_wrong(x):
            return sum_(apply_op(x.data * 3, (x,), lambda g: (g * 2,)))

        report = grad_check(doubled_wrong, Tensor(rng.standard_normal(5)))
        assert not report.passed
        assert report.max_rel_error > 0.1

    def test_nan_is_reported_with_coordinate(self):
        def nan_grad(x):
            return sum_(apply_op(x.data.copy(), (x,), lambda g: (np.full_like(g, np.nan),)))

        report = grad_check(nan_grad, Tensor(np.ones((2, 2))))
        assert not report.passed
        assert report.nan_index == (0, 0)

    def test_samples_at_most_num_coords(self, rng):
        report = grad_check(lambda x: sum_(mul(x, x)), Tensor(rng.standard_normal(500)), num_coords=100)
        assert report.checked == 100
        assert report.passed
