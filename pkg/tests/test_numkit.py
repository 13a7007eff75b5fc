import numpy as np
import pytest

from csibench import numkit
from csibench.numkit import (
    AdamState,
    FlopMeter,
    GradTape,
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    adam_step,
    backward,
    compare_gradients,
    grad_check,
    matmul,
    mean_all,
    softmax_rows,
    sum_all,
)


def matmul_oracle(a, b):
    """Brute-force triple loop."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.5, -2.0], [0.25, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_value(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = np.array([[2.0, 1.0], [4.0, 3.0]])
        assert np.array_equal(matmul(a, b), expected)
        assert np.array_equal(matmul_oracle(a, b), expected)

    def test_matches_oracle_on_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = rng.standard_normal((3, 5))
            b = rng.standard_normal((5, 4))
            assert np.allclose(matmul(a, b), matmul_oracle(a, b), atol=1e-12)

    def test_shape_error_names_both_operands(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\) x \(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            rel = np.abs(left - right).max() / np.abs(left).max()
            assert rel < 1e-10


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = softmax_rows(np.array([[0.0, 0.0, 0.0]]))
        assert np.allclose(out, 1.0 / 3.0, atol=1e-15)

    def test_hand_value(self):
        out = softmax_rows(np.array([[np.log(2.0), 0.0]]))
        assert np.allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_shift_invariance_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 1000.0]]))
        assert np.array_equal(out, np.array([[0.5, 0.5]]))

    def test_rows_sum_to_one_randomized(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a = rng.standard_normal((4, 7)) * rng.uniform(0.1, 50.0)
            out = softmax_rows(a)
            assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12
            assert out.min() > 0.0 and out.max() <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            softmax_rows(np.zeros((0, 3)))


class TestBackward:
    def test_quadratic(self):
        w = Tensor(np.array([[1.0], [2.0], [-3.0]]))
        tape = GradTape()
        tape.watch(w)
        with tape:
            loss = sum_all(w * w)
        (grad,) = backward(tape, loss)
        assert np.allclose(grad, 2.0 * w.data, atol=1e-15)

    def test_sum_of_matvec_is_outer_product(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((2, 3)))
        x = rng.standard_normal((3, 1))
        tape = GradTape()
        tape.watch(w)
        with tape:
            loss = sum_all(matmul(w, x))
        (grad,) = backward(tape, loss)
        assert np.allclose(grad, np.outer(np.ones(2), x[:, 0]), atol=1e-14)

    def test_constant_loss_gives_zero_gradients(self):
        w = Tensor(np.ones((2, 2)))
        tape = GradTape()
        tape.watch(w)
        with tape:
            loss = mean_all(Tensor(np.ones((3, 3))))
        (grad,) = backward(tape, loss)
        assert np.array_equal(grad, np.zeros((2, 2)))

    def test_tape_consumed_twice(self):
        w = Tensor(np.ones(2))
        tape = GradTape()
        tape.watch(w)
        with tape:
            loss = sum_all(w * w)
        backward(tape, loss)
        with pytest.raises(TapeError):
            backward(tape, loss)

    def test_tapes_do_not_nest(self):
        with GradTape():
            with pytest.raises(TapeError):
                with GradTape():
                    pass

    def test_reverse_order_and_reuse(self):
        # same tensor consumed twice accumulates both contributions
        w = Tensor(np.array([3.0]))
        tape = GradTape()
        tape.watch(w)
        with tape:
            loss = sum_all(w * w + w * 2.0)
        (grad,) = backward(tape, loss)
        assert np.allclose(grad, 2.0 * w.data + 2.0)


class TestElementwiseGradients:
    @pytest.mark.parametrize("op", [numkit.tanh, numkit.sigmoid, numkit.exp, numkit.softplus])
    def test_against_finite_differences(self, op):
        rng = np.random.default_rng(4)
        w = Tensor(rng.standard_normal((3, 2)))

        def f():
            return mean_all(op(w) * op(w))

        assert grad_check(f, [w], h=1e-6) < 1e-7

    def test_div_and_broadcast(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((4, 3)))
        b = Tensor(rng.uniform(0.5, 2.0, size=3))

        def f():
            return mean_all((a / b) * (1.0 + b))

        assert grad_check(f, [a, b], h=1e-6) < 1e-7

    def test_slicing_concat_softmax(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.standard_normal((4, 6)))

        def f():
            left = numkit.col_slice(w, 0, 3)
            right = numkit.col_slice(w, 3, 6)
            both = numkit.concat_cols([softmax_rows(left), numkit.tanh(right)])
            return mean_all(both * both)

        assert grad_check(f, [w], h=1e-6) < 1e-7


class TestGradCheck:
    def test_quadratic_precision(self):
        w = Tensor(np.array([0.5, -1.5, 2.0]))

        def f():
            return sum_all(w * w)

        assert grad_check(f, [w], h=1e-6) < 1e-8

    def test_detects_corrupted_gradient(self):
        w = Tensor(np.array([0.5, -1.5, 2.0]))

        def f():
            return sum_all(w * w)

        tape = GradTape()
        tape.watch(w)
        with tape:
            loss = f()
        (grad,) = backward(tape, loss)
        corrupted = grad.copy()
        corrupted[1] += 1.0
        assert compare_gradients([corrupted], f, [w], h=1e-6) > 0.1

    def test_non_finite_objective(self):
        w = Tensor(np.array([1.0]))

        def f():
            return float("nan")

        with pytest.raises(NumericError):
            grad_check(f, [w])


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = AdamState([p])
        before = p.data.copy()
        adam_step(state, [p], [np.zeros(2)])
        assert np.array_equal(p.data, before)
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = Tensor(np.array([0.0]))
        state = AdamState([p], lr=1e-3)
        adam_step(state, [p], [np.array([0.5])])
        # bias-corrected m/sqrt(v) = sign(g) up to eps
        assert abs(abs(p.data[0]) - 1e-3) < 1e-8
        assert p.data[0] < 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        g = rng.standard_normal(4)
        results = []
        for _ in range(2):
            p = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
            state = AdamState([p])
            adam_step(state, [p], [g])
            adam_step(state, [p], [g * 0.5])
            results.append(p.data.copy())
        assert np.array_equal(results[0], results[1])

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3))
        state = AdamState([p])
        with pytest.raises(ShapeError):
            adam_step(state, [p], [np.zeros(4)])


class TestFlopMeter:
    def test_counts_macs(self):
        with FlopMeter() as meter:
            matmul(np.zeros((2, 3)), np.zeros((3, 5)))
        assert meter.total == 2 * 3 * 5

    def test_nested_meters_restore(self):
        with FlopMeter() as outer:
            matmul(np.zeros((1, 2)), np.zeros((2, 1)))
            with FlopMeter() as inner:
                matmul(np.zeros((1, 2)), np.zeros((2, 1)))
            matmul(np.zeros((1, 2)), np.zeros((2, 1)))
        assert inner.total == 2
        assert outer.total == 4
