import numpy as np
import pytest

from phantomsim import (Activation, DenseFFN, OracleError, dense_forward,
                        effective_weight, finite_diff_grad,
                        init_phantom_model, phantom_dense_twin,
                        relative_error)
from tests.test_phantom import worked_example_model


class TestEffectiveWeight:
    def test_zero_compressors_give_block_diagonal(self):
        model = init_phantom_model(8, 2, 2, 1, Activation.RELU, seed=0)
        for rank in range(2):
            model.rank_layers[rank][0].compressor[:] = 0.0
        weight = effective_weight(model, 0)
        assert np.array_equal(weight[0:4, 0:4], model.rank_layers[0][0].local)
        assert np.array_equal(weight[4:8, 4:8], model.rank_layers[1][0].local)
        assert not weight[0:4, 4:8].any()
        assert not weight[4:8, 0:4].any()

    def test_worked_example_blocks(self):
        weight = effective_weight(worked_example_model(), 0)
        expect = np.array([[1.0, 0.0, 1.0, 0.0],
                           [0.0, 1.0, 2.0, 0.0],
                           [0.0, 0.0, 1.0, 0.0],
                           [0.0, 0.0, 0.0, 1.0]])
        assert np.array_equal(weight, expect)
        assert np.allclose(weight @ np.array([1.0, 2.0, 3.0, 4.0]), [4.0, 8.0, 3.0, 4.0])

    def test_off_diagonal_rank_bounded_by_k(self):
        n, p, k = 24, 4, 2
        model = init_phantom_model(n, p, k, 1, Activation.RELU, seed=9)
        weight = effective_weight(model, 0)
        s = n // p
        for j in range(p):
            for i in range(p):
                if i != j:
                    block = weight[j * s:(j + 1) * s, i * s:(i + 1) * s]
                    assert np.linalg.matrix_rank(block) <= k


class TestDenseForward:
    def test_identity_network(self):
        model = DenseFFN([np.eye(3)], [np.zeros(3)], [Activation.IDENTITY])
        x = np.random.default_rng(0).standard_normal((3, 2))
        out, tape = dense_forward(model, x)
        assert np.array_equal(out, x)
        assert len(tape) == 1

    def test_relu_clips(self):
        model = DenseFFN([np.eye(2)], [np.zeros(2)], [Activation.RELU])
        out, _ = dense_forward(model, np.array([[-1.0], [1.0]]))
        assert np.array_equal(out, [[0.0], [1.0]])

    def test_twin_matches_distributed_forward(self):
        from phantomsim import Communicator, pp_forward_layer
        n, p, k, layers = 16, 4, 2, 2
        model = init_phantom_model(n, p, k, layers, Activation.RELU, seed=4)
        twin = phantom_dense_twin(model)
        x = np.random.default_rng(3).standard_normal((n, 2))
        s = n // p

        def fn(c, r):
            out = x[r * s:(r + 1) * s]
            for l in range(layers):
                out = pp_forward_layer(model.rank_layers[r][l], out, c, r,
                                       activation=model.activations[l], layer_index=l)
            return out

        outs = Communicator(p).run(fn)
        expect, _ = dense_forward(twin, x)
        assert np.max(np.abs(np.concatenate(outs) - expect)) <= 1e-10


class TestFiniteDifference:
    def test_quadratic(self):
        fd = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]), h=1e-5)
        assert abs(fd[0] - 6.0) <= 1e-8

    def test_constant_function(self):
        fd = finite_diff_grad(lambda t: 1.5, np.zeros(4), h=1e-5)
        assert np.array_equal(fd, np.zeros(4))

    def test_least_squares_closed_form(self):
        rng = np.random.default_rng(0)
        mat = rng.standard_normal((5, 4))
        theta = rng.standard_normal(4)
        fd = finite_diff_grad(lambda t: 0.5 * float(np.sum((mat @ t) ** 2)), theta)
        assert relative_error(fd, mat.T @ mat @ theta) <= 1e-6

    def test_non_finite_loss_is_oracle_error(self):
        with pytest.raises(OracleError):
            finite_diff_grad(lambda t: float("nan"), np.zeros(1))


class TestRelativeError:
    def test_zero_on_equal(self):
        assert relative_error(np.ones(3), np.ones(3)) == 0.0

    def test_floor_prevents_blowup(self):
        assert relative_error(np.array([1e-12]), np.array([0.0])) == pytest.approx(1e-4)

    def test_scale_invariant_for_large_values(self):
        assert relative_error(np.array([1e6]), np.array([1e6 + 1])) == pytest.approx(1e-6, rel=1e-2)
