import numpy as np
import pytest

from csibench.numkit import ConfigurationError, FlopMeter, NumericError, ShapeError, grad_check
from csibench.ssm import (
    SsmDiscrete,
    bilinear_discretize,
    ssm_conv,
    ssm_discretize,
    ssm_flops,
    ssm_forward,
    ssm_init,
    ssm_kernel,
    ssm_predict,
    ssm_scan,
)
from csibench.trainer import mse_tensor

EPS = np.finfo(np.float64).eps


def random_params(rng, state_dim, feat_dim, skip=False):
    seed = int(rng.integers(0, 2 ** 31))
    return ssm_init(state_dim, feat_dim, seed=seed, skip=skip)


class TestDiscretize:
    def test_scalar_zero_state_matrix(self):
        d = bilinear_discretize(np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]), 0.1)
        assert abs(d.a_bar[0, 0] - 1.0) <= EPS
        assert abs(d.b_bar[0, 0] - 0.1) <= EPS

    def test_scalar_minus_one(self):
        d = bilinear_discretize(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), 1.0)
        assert abs(d.a_bar[0, 0] - 1.0 / 3.0) <= EPS
        assert abs(d.b_bar[0, 0] - 2.0 / 3.0) <= EPS

    def test_diagonal_closed_form_vs_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            p = random_params(rng, 6, 3)
            d_fast = ssm_discretize(p)
            lam = -np.exp(p.log_neg_a.data)
            delta = np.exp(p.log_delta.data)
            d_ref = bilinear_discretize(np.diag(lam), p.b_in.data, p.c_out.data, delta)
            assert np.abs(d_fast.a_bar - d_ref.a_bar).max() < 1e-12
            assert np.abs(d_fast.b_bar - d_ref.b_bar).max() < 1e-12
            assert np.array_equal(d_fast.c_bar, d_ref.c_bar)

    def test_diagonal_entries_closed_form(self):
        p = ssm_init(4, 2, seed=1)
        lam = -np.exp(p.log_neg_a.data)
        delta = np.exp(p.log_delta.data)
        d = ssm_discretize(p)
        expected = (1.0 + delta * lam / 2.0) / (1.0 - delta * lam / 2.0)
        assert np.allclose(np.diag(d.a_bar), expected, atol=1e-15)

    def test_stability(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = random_params(rng, 8, 4)
            eigvals = np.linalg.eigvals(ssm_discretize(p).a_bar)
            assert np.abs(eigvals).max() < 1.0

    def test_singular_resolvent(self):
        # unconstrained state matrix with eigenvalue 2/delta makes I - d/2 A singular
        with pytest.raises(NumericError):
            bilinear_discretize(np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]), 1.0)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ConfigurationError):
            bilinear_discretize(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), 0.0)


class TestScan:
    def test_zero_input_zero_state(self):
        p = ssm_init(3, 2, seed=0)
        d = ssm_discretize(p)
        ys = ssm_scan(d, np.zeros((5, 2)))
        assert np.array_equal(ys, np.zeros((5, 2)))

    def test_single_step_unrolls_to_cb(self):
        p = ssm_init(3, 2, seed=3)
        d = ssm_discretize(p)
        x = np.random.default_rng(0).standard_normal((1, 2))
        ys = ssm_scan(d, x)
        assert np.allclose(ys[0], d.c_bar @ d.b_bar @ x[0], atol=1e-14)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        p = ssm_init(5, 3, seed=4)
        d = ssm_discretize(p)
        x1 = rng.standard_normal((8, 3))
        x2 = rng.standard_normal((8, 3))
        a, b = 1.7, -0.4
        combined = ssm_scan(d, a * x1 + b * x2)
        split = a * ssm_scan(d, x1) + b * ssm_scan(d, x2)
        assert np.abs(combined - split).max() < 1e-10

    def test_dimension_mismatch(self):
        p = ssm_init(3, 2, seed=0)
        d = ssm_discretize(p)
        with pytest.raises(ShapeError):
            ssm_scan(d, np.zeros((5, 3)))
        with pytest.raises(ShapeError):
            ssm_scan(d, np.zeros((5, 2)), h0=np.zeros(4))


class TestKernel:
    def test_length_one(self):
        p = ssm_init(3, 2, seed=5)
        d = ssm_discretize(p)
        k = ssm_kernel(d, 1)
        assert len(k) == 1
        assert np.allclose(k.mats[0], d.c_bar @ d.b_bar, atol=1e-15)

    def test_scalar_geometric_sequence(self):
        d = SsmDiscrete(np.array([[0.5]]), np.array([[1.0]]), np.array([[1.0]]))
        k = ssm_kernel(d, 3)
        assert np.allclose(k.mats[:, 0, 0], [1.0, 0.5, 0.25], atol=1e-15)

    def test_kernel_norm_decays_for_stable_diagonal(self):
        p = ssm_init(6, 2, seed=6)
        k = ssm_kernel(ssm_discretize(p), 30)
        norms = np.linalg.norm(k.mats.reshape(30, -1), axis=1)
        # a_bar has positive diagonal entries < 1, so decay is monotone
        assert np.all(np.diff(norms) <= 1e-15)

    def test_impulse_reproduces_kernel(self):
        p = ssm_init(4, 3, seed=7)
        d = ssm_discretize(p)
        k = ssm_kernel(d, 6)
        x = np.zeros((6, 3))
        x[0, 1] = 1.0
        ys = ssm_conv(k, x)
        assert np.allclose(ys, k.mats[:, :, 1], atol=1e-14)


class TestConv:
    def test_matches_scan_on_random_systems(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(100):
            state = int(rng.integers(1, 33))
            feat = int(rng.integers(1, 17))
            steps = int(rng.integers(1, 65))
            p = random_params(rng, state, feat)
            d = ssm_discretize(p)
            x = rng.standard_normal((steps, feat))
            dev = np.abs(ssm_scan(d, x) - ssm_conv(ssm_kernel(d, steps), x)).max()
            worst = max(worst, dev)
        assert worst < 1e-9

    def test_zero_input(self):
        p = ssm_init(3, 2, seed=9)
        d = ssm_discretize(p)
        ys = ssm_conv(ssm_kernel(d, 4), np.zeros((4, 2)))
        assert np.array_equal(ys, np.zeros((4, 2)))

    def test_short_kernel_rejected(self):
        p = ssm_init(3, 2, seed=9)
        k = ssm_kernel(ssm_discretize(p), 3)
        with pytest.raises(ConfigurationError):
            ssm_conv(k, np.zeros((4, 2)))


class TestFlops:
    def test_reference_config(self):
        assert ssm_flops(14, 144, 64) == 315_392

    def test_doubling_steps_doubles_count(self):
        assert ssm_flops(28, 144, 64) == 2 * ssm_flops(14, 144, 64)

    def test_per_step_count_constant(self):
        per_step = {t: ssm_flops(t, 8, 4) / t for t in (1, 7, 50)}
        assert len(set(per_step.values())) == 1

    def test_instrumented_scan_matches_formula(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            state = int(rng.integers(1, 9))
            feat = int(rng.integers(1, 9))
            steps = int(rng.integers(1, 20))
            p = random_params(rng, state, feat)
            d = ssm_discretize(p)
            with FlopMeter() as meter:
                ssm_scan(d, rng.standard_normal((steps, feat)))
            assert meter.total == ssm_flops(steps, feat, state)


class TestForward:
    def test_matches_plain_predict(self):
        rng = np.random.default_rng(11)
        p = ssm_init(5, 4, seed=12, skip=True)
        x = rng.standard_normal((7, 4))
        y = ssm_forward(p, x)
        assert y.data.shape == (7, 4)
        assert np.abs(y.data - ssm_predict(p, x)).max() < 1e-12

    def test_conv_predict_matches_scan_predict(self):
        rng = np.random.default_rng(12)
        p = ssm_init(5, 4, seed=13, skip=True)
        x = rng.standard_normal((7, 4))
        assert np.abs(ssm_predict(p, x, mode="scan") - ssm_predict(p, x, mode="conv")).max() < 1e-9

    def test_gradients(self):
        rng = np.random.default_rng(13)
        p = ssm_init(6, 4, seed=14, skip=True)
        x = rng.standard_normal((5, 4))
        target = rng.standard_normal((5, 4))

        def f():
            return mse_tensor(ssm_forward(p, x), target)

        assert grad_check(f, p.tensors(), h=1e-6) < 1e-5

    def test_skip_toggle(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((4, 3))
        with_skip = ssm_init(3, 3, seed=15, skip=True)
        without = ssm_init(3, 3, seed=15, skip=False)
        # zero-initialized skip must not change the output
        assert np.allclose(ssm_predict(with_skip, x), ssm_predict(without, x), atol=1e-15)
        with_skip.skip.data[:] = 2.0
        assert np.allclose(
            ssm_predict(with_skip, x), ssm_predict(without, x) + 2.0 * x, atol=1e-12
        )


class TestSelective:
    def test_degenerate_maps_reduce_to_lti(self):
        p = ssm_init(4, 3, seed=16, skip=True, selective=True)
        p.selective.w_delta.data[:] = 0.0
        p.selective.w_b.data[:] = 0.0
        p.selective.w_c.data[:] = 0.0
        x = np.random.default_rng(1).standard_normal((6, 3))
        lti = ssm_init(4, 3, seed=16, skip=True, selective=False)
        d = ssm_discretize(lti)
        expected = ssm_scan(d, x, skip=lti.skip.data)
        got = ssm_forward(p, x).data
        assert np.abs(got - expected).max() < 1e-12

    def test_zero_input_zero_output(self):
        p = ssm_init(4, 3, seed=17, selective=True)
        assert np.abs(ssm_forward(p, np.zeros((5, 3))).data).max() == 0.0

    def test_conv_mode_refused(self):
        p = ssm_init(4, 3, seed=18, selective=True)
        with pytest.raises(ConfigurationError):
            ssm_forward(p, np.zeros((5, 3)), mode="conv")
        with pytest.raises(ConfigurationError):
            ssm_predict(p, np.zeros((5, 3)), mode="conv")

    def test_gradients(self):
        rng = np.random.default_rng(19)
        p = ssm_init(3, 2, seed=20, skip=True, selective=True)
        # larger step sizes keep the state-matrix gradient well conditioned
        p.selective.b_delta.data[:] = np.log(np.expm1(0.5))
        x = rng.standard_normal((4, 2))
        target = rng.standard_normal((4, 2))

        def f():
            return mse_tensor(ssm_forward(p, x), target)

        assert grad_check(f, p.tensors(), h=1e-6) < 1e-5
