import numpy as np
import pytest

from csibench.attention import MsaParams, msa_flops, msa_forward, msa_init
from csibench.numkit import (
    ConfigurationError,
    FlopMeter,
    GradTape,
    ShapeError,
    backward,
    grad_check,
)
from csibench.trainer import mse_tensor


class TestInit:
    def test_head_dim(self):
        p = msa_init(14, 144, 2, seed=0)
        assert p.head_dim == 72
        assert p.w_proj.data.shape == (144, 144)
        assert all(w.data.shape == (144, 3 * 72) for w in p.w_qkv)

    def test_deterministic_per_seed(self):
        a = msa_init(4, 8, 2, seed=5)
        b = msa_init(4, 8, 2, seed=5)
        for wa, wb in zip(a.tensors(), b.tensors()):
            assert np.array_equal(wa.data, wb.data)
        c = msa_init(4, 8, 2, seed=6)
        assert not np.array_equal(a.w_proj.data, c.w_proj.data)

    def test_head_count_must_divide(self):
        with pytest.raises(ConfigurationError):
            msa_init(14, 144, 5, seed=0)

    def test_variance_matches_scaled_uniform(self):
        p = msa_init(4, 256, 2, seed=0)
        flat = np.concatenate([w.data.ravel() for w in p.tensors()])
        assert abs(flat.mean()) < 0.005
        assert abs(flat.var() - 1.0 / 256) < 0.1 / 256


class TestForward:
    def test_single_position_map_is_one(self):
        p = msa_init(1, 4, 2, seed=1)
        x = np.random.default_rng(0).standard_normal((1, 4))
        y, acts = msa_forward(p, x)
        for m in acts.maps:
            assert np.array_equal(m, np.ones((1, 1)))
        manual = np.hstack([x @ w.data[:, 2 * p.head_dim:] for w in p.w_qkv]) @ p.w_proj.data
        assert np.allclose(y.data, manual, atol=1e-14)

    def test_zero_input(self):
        p = msa_init(5, 6, 2, seed=2)
        y, acts = msa_forward(p, np.zeros((5, 6)))
        assert np.array_equal(y.data, np.zeros((5, 6)))
        for m in acts.maps:
            assert np.allclose(m, 1.0 / 5.0, atol=1e-15)
        for q in acts.q:
            assert np.array_equal(q, np.zeros((5, 3)))

    def test_shape_preserved(self):
        for n, d, h in [(2, 4, 1), (7, 12, 3), (14, 144, 2)]:
            p = msa_init(n, d, h, seed=0)
            y, _ = msa_forward(p, np.random.default_rng(1).standard_normal((n, d)))
            assert y.data.shape == (n, d)

    def test_row_stochastic_maps(self):
        rng = np.random.default_rng(3)
        p = msa_init(6, 8, 2, seed=0)
        for _ in range(100):
            _, acts = msa_forward(p, rng.standard_normal((6, 8)) * rng.uniform(0.1, 10))
            for m in acts.maps:
                assert np.abs(m.sum(axis=1) - 1.0).max() < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        p = msa_init(4, 8, 2, seed=7)
        x = rng.standard_normal((4, 8))
        y, _ = msa_forward(p, x)
        for _ in range(10):
            perm = rng.permutation(4)
            y_perm, _ = msa_forward(p, x[perm])
            assert np.abs(y_perm.data - y.data[perm]).max() < 1e-10

    def test_input_shape_checked(self):
        p = msa_init(4, 8, 2, seed=0)
        with pytest.raises(ShapeError):
            msa_forward(p, np.zeros((4, 9)))


class TestGradients:
    def test_mse_loss_grad_check(self):
        rng = np.random.default_rng(5)
        p = msa_init(4, 8, 2, seed=3)
        x = rng.standard_normal((4, 8))
        target = rng.standard_normal((4, 8))

        def f():
            y, _ = msa_forward(p, x)
            return mse_tensor(y, target)

        assert grad_check(f, p.tensors(), h=1e-6) < 1e-5

    def test_forward_identical_with_and_without_tape(self):
        p = msa_init(4, 8, 2, seed=3)
        x = np.random.default_rng(6).standard_normal((4, 8))
        y_plain, _ = msa_forward(p, x)
        tape = GradTape()
        tape.watch(*p.tensors())
        with tape:
            y_taped, _ = msa_forward(p, x)
        assert np.array_equal(y_plain.data, y_taped.data)
        grads = backward(tape, mse_tensor(y_taped, np.zeros((4, 8))))
        assert all(np.isfinite(g).all() for g in grads)


class TestFlops:
    def test_reference_config(self):
        assert msa_flops(14, 144, 2) == 1_217_664

    def test_unit_dims(self):
        assert msa_flops(1, 1, 1) == 6

    def test_quadratic_term_scales_by_four(self):
        n, d = 6, 12
        quad = lambda n_: msa_flops(n_, d) - 4 * n_ * d * d
        assert quad(2 * n) == 4 * quad(n)

    def test_instrumented_forward_matches_formula(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            heads = int(rng.integers(1, 4))
            head_dim = int(rng.integers(1, 6))
            dim = heads * head_dim
            n = int(rng.integers(1, 9))
            p = msa_init(n, dim, heads, seed=0)
            with FlopMeter() as meter:
                msa_forward(p, rng.standard_normal((n, dim)))
            assert meter.total == msa_flops(n, dim, heads)
