import numpy as np
import pytest

from phantomsim import (Activation, Communicator, ConfigurationError,
                        PhantomLayer, PhantomModel, dense_forward,
                        finite_diff_grad, init_phantom_model,
                        phantom_dense_twin, pp_backward_layer, pp_forward_layer,
                        pp_model_size, pp_output_delta, pp_param_grads,
                        relative_error, valid_k)
from phantomsim.training import pp_iteration


def worked_example_model():
    """p=2, k=1, n=4, identity: hand-checkable forward."""
    rank0 = PhantomLayer(np.eye(2), np.array([[0.5, 0.5]]),
                         {1: np.array([[1.0], [2.0]])}, np.zeros(2))
    rank1 = PhantomLayer(np.eye(2), np.array([[1.0, 0.0]]),
                         {0: np.array([[0.0], [0.0]])}, np.zeros(2))
    return PhantomModel(4, 2, 1, [Activation.IDENTITY], [[rank0], [rank1]])


class TestForward:
    def test_worked_example(self):
        model = worked_example_model()
        inputs = [np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])]
        comm = Communicator(2)
        tapes = [[], []]
        outs = comm.run(lambda c, r: pp_forward_layer(
            model.rank_layers[r][0], inputs[r], c, r, tapes[r],
            activation=Activation.IDENTITY))
        # rank0: y + D*g1 = [1,2] + [1,2]*3 = [4,8]; rank1: zero decompressor
        assert np.allclose(outs[0], [[4.0], [8.0]])
        assert np.allclose(outs[1], [[3.0], [4.0]])
        # exchanged phantoms: g0 = 0.5*1 + 0.5*2 = 1.5, g1 = 1*3 + 0*4 = 3
        assert np.allclose(tapes[0][0].phantoms[0], [[1.5]])
        assert np.allclose(tapes[0][0].phantoms[1], [[3.0]])

    def test_zero_compressors_decouple_ranks(self):
        n, p, k = 8, 2, 2
        model = init_phantom_model(n, p, k, 1, Activation.RELU, seed=5)
        for rank in range(p):
            model.rank_layers[rank][0].compressor[:] = 0.0
        rng = np.random.default_rng(0)
        x = rng.standard_normal((n, 3))
        s = n // p
        comm = Communicator(p)
        outs = comm.run(lambda c, r: pp_forward_layer(
            model.rank_layers[r][0], x[r * s:(r + 1) * s], c, r,
            activation=Activation.RELU))
        for r in range(p):
            layer = model.rank_layers[r][0]
            expect = np.maximum(layer.local @ x[r * s:(r + 1) * s] + layer.bias[:, None], 0.0)
            assert np.allclose(outs[r], expect, atol=1e-15)

    @pytest.mark.parametrize("n,p,k,layers,batch", [
        (8, 2, 1, 1, 1), (16, 4, 2, 2, 3), (16, 2, 4, 3, 2), (24, 4, 3, 2, 4),
    ])
    def test_matches_dense_twin(self, n, p, k, layers, batch):
        model = init_phantom_model(n, p, k, layers, Activation.RELU, seed=n + p + k)
        twin = phantom_dense_twin(model)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((n, batch))
        s = n // p
        comm = Communicator(p)

        def fn(c, r):
            out = x[r * s:(r + 1) * s]
            for l in range(layers):
                out = pp_forward_layer(model.rank_layers[r][l], out, c, r,
                                       activation=model.activations[l], layer_index=l)
            return out

        outs = comm.run(fn)
        dense_out, _ = dense_forward(twin, x)
        assert np.max(np.abs(np.concatenate(outs) - dense_out)) <= 1e-10

    def test_activations_stay_sharded(self):
        # no rank ever materializes more than an n/p-row activation
        n, p, k, layers, batch = 16, 4, 2, 3, 2
        model = init_phantom_model(n, p, k, layers, Activation.RELU, seed=0)
        s = n // p
        rng = np.random.default_rng(2)
        x = rng.standard_normal((n, batch))
        tapes = [[] for _ in range(p)]
        comm = Communicator(p)

        def fn(c, r):
            out = x[r * s:(r + 1) * s]
            for l in range(layers):
                out = pp_forward_layer(model.rank_layers[r][l], out, c, r, tapes[r],
                                       activation=model.activations[l], layer_index=l)
            return out

        outs = comm.run(fn)
        for r in range(p):
            assert outs[r].shape == (s, batch)
            for entry in tapes[r]:
                assert entry.inputs.shape == (s, batch)
                assert entry.preact.shape == (s, batch)
                for block in entry.phantoms.values():
                    assert block.shape == (k, batch)
        for record in comm.records:
            assert record.message_size == k * batch


class TestOutputDelta:
    def test_perfect_fit_is_zero(self):
        y = np.array([[1.0, 2.0]])
        out = pp_output_delta(y, y, y, Activation.IDENTITY)
        assert np.array_equal(out, np.zeros((1, 2)))

    def test_identity_passes_difference(self):
        y_out = np.array([[1.0], [-2.0]])
        out = pp_output_delta(y_out, np.zeros((2, 1)), y_out, Activation.IDENTITY)
        assert np.array_equal(out, [[1.0], [-2.0]])

    def test_relu_masks_negative_preactivations(self):
        preact = np.array([[-1.0], [3.0]])
        diff = np.array([[5.0], [5.0]])
        out = pp_output_delta(diff, np.zeros((2, 1)), preact, Activation.RELU)
        assert np.array_equal(out, [[0.0], [5.0]])


class TestBackward:
    def test_zero_decompressors_reduce_to_local_rule(self):
        n, p, k = 8, 2, 2
        model = init_phantom_model(n, p, k, 2, Activation.IDENTITY, seed=3)
        for rank in range(p):
            for layer in model.rank_layers[rank]:
                for i in layer.decompressors:
                    layer.decompressors[i][:] = 0.0
        rng = np.random.default_rng(0)
        s = n // p
        delta_next = {r: rng.standard_normal((s, 2)) for r in range(p)}
        preact = {r: rng.standard_normal((s, 2)) for r in range(p)}
        comm = Communicator(p)
        outs = comm.run(lambda c, r: pp_backward_layer(
            model.rank_layers[r][1], delta_next[r], preact[r],
            Activation.IDENTITY, c, r, layer_index=1))
        for r in range(p):
            expect = model.rank_layers[r][1].local.T @ delta_next[r]
            assert np.allclose(outs[r], expect, atol=1e-14)

    def test_single_rank_world_has_no_cross_terms(self):
        layer = PhantomLayer(np.array([[2.0]]), np.array([[1.0]]), {}, np.zeros(1))
        comm = Communicator(1)
        outs = comm.run(lambda c, r: pp_backward_layer(
            layer, np.array([[3.0]]), np.array([[1.0]]), Activation.IDENTITY, c, r))
        assert np.allclose(outs[0], [[6.0]])

    def test_deltas_match_finite_differences_of_preactivation(self):
        n, p, k, layers, batch = 8, 2, 2, 2, 2
        model = init_phantom_model(n, p, k, layers, Activation.IDENTITY, seed=11)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((n, batch))
        y = rng.standard_normal((n, batch))
        s = n // p
        comm = Communicator(p)
        outs = comm.run(lambda c, r: pp_iteration(
            c, r, model.rank_layers[r], model.activations,
            x[r * s:(r + 1) * s], y[r * s:(r + 1) * s]))
        twin = phantom_dense_twin(model)
        from phantomsim import dense_loss
        for l in range(layers):
            distributed = np.concatenate([outs[r].deltas[l] for r in range(p)])
            fd = finite_diff_grad(
                lambda t, l=l: dense_loss(twin, x, y, preact_offsets={l: t.reshape(n, batch)}),
                np.zeros(n * batch), h=1e-5)
            assert relative_error(distributed.ravel(), fd) <= 1e-6


class TestParamGrads:
    def test_zero_delta_gives_zero_grads(self):
        model = init_phantom_model(8, 2, 2, 1, Activation.RELU, seed=1)
        layer = model.rank_layers[0][0]
        from phantomsim import LayerTape
        tape = LayerTape(inputs=np.ones((4, 2)), preact=np.ones((4, 2)),
                         phantoms={0: np.ones((2, 2)), 1: np.ones((2, 2))})
        grads = pp_param_grads(layer, np.zeros((4, 2)), tape, np.zeros((2, 2)))
        assert not grads.bias.any()
        assert not grads.local.any()
        assert not grads.compressor.any()
        assert not grads.decompressors[1].any()

    def test_outer_product_hand_case(self):
        # batch=1, delta=[1,0]^T, inputs=[2,3]^T -> grad_local = [[2,3],[0,0]]
        model = init_phantom_model(4, 2, 1, 1, Activation.IDENTITY, seed=1)
        layer = model.rank_layers[0][0]
        from phantomsim import LayerTape
        delta = np.array([[1.0], [0.0]])
        tape = LayerTape(inputs=np.array([[2.0], [3.0]]), preact=np.zeros((2, 1)),
                         phantoms={0: np.zeros((1, 1)), 1: np.array([[4.0]])})
        grads = pp_param_grads(layer, delta, tape, np.array([[7.0]]))
        assert np.array_equal(grads.local, [[2.0, 3.0], [0.0, 0.0]])
        assert np.array_equal(grads.bias, [1.0, 0.0])
        # compressor grad = received @ inputs^T, decompressor grad = delta @ g^T
        assert np.array_equal(grads.compressor, [[14.0, 21.0]])
        assert np.array_equal(grads.decompressors[1], [[4.0], [0.0]])

    def test_grad_shapes_match_parameters(self):
        n, p, k, layers = 16, 4, 3, 2
        model = init_phantom_model(n, p, k, layers, Activation.RELU, seed=2)
        data_x = np.random.default_rng(0).standard_normal((n, 2))
        data_y = np.random.default_rng(1).standard_normal((n, 2))
        s = n // p
        comm = Communicator(p)
        outs = comm.run(lambda c, r: pp_iteration(
            c, r, model.rank_layers[r], model.activations,
            data_x[r * s:(r + 1) * s], data_y[r * s:(r + 1) * s]))
        for r in range(p):
            for l in range(layers):
                layer = model.rank_layers[r][l]
                grads = outs[r].grads[l]
                assert grads.local.shape == layer.local.shape
                assert grads.compressor.shape == layer.compressor.shape
                assert grads.bias.shape == layer.bias.shape
                assert set(grads.decompressors) == set(layer.decompressors)
                for i, dec in layer.decompressors.items():
                    assert grads.decompressors[i].shape == dec.shape


class TestDistributedFiniteDifference:
    def test_rank0_layer0_grads_against_distributed_loss(self):
        """Perturb parameters and re-run the full distributed pipeline:
        slow but entirely oracle-independent of the dense twin."""
        n, p, k, layers, batch = 4, 2, 1, 1, 1
        seed = 6
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, batch))
        y = rng.standard_normal((n, batch))
        s = n // p

        def distributed_loss(model):
            comm = Communicator(p)
            outs = comm.run(lambda c, r: pp_iteration(
                c, r, model.rank_layers[r], model.activations,
                x[r * s:(r + 1) * s], y[r * s:(r + 1) * s]))
            return outs[0].global_loss, outs

        base_model = init_phantom_model(n, p, k, layers, Activation.IDENTITY, seed)
        _, outs = distributed_loss(base_model)
        grads = outs[0].grads[0]

        def loss_for_local(theta):
            model = init_phantom_model(n, p, k, layers, Activation.IDENTITY, seed)
            model.rank_layers[0][0].local[:] = theta.reshape(s, s)
            return distributed_loss(model)[0]

        fd = finite_diff_grad(loss_for_local, base_model.rank_layers[0][0].local.ravel())
        assert relative_error(grads.local.ravel(), fd) <= 1e-6

        def loss_for_compressor(theta):
            model = init_phantom_model(n, p, k, layers, Activation.IDENTITY, seed)
            model.rank_layers[0][0].compressor[:] = theta.reshape(k, s)
            return distributed_loss(model)[0]

        fd = finite_diff_grad(loss_for_compressor, base_model.rank_layers[0][0].compressor.ravel())
        assert relative_error(grads.compressor.ravel(), fd) <= 1e-6


class TestSizing:
    @pytest.mark.parametrize("p,k,expect", [
        (8, 16, 71_303_168), (16, 6, 36_700_160), (32, 4, 20_971_520),
    ])
    def test_published_table_sizes(self, p, k, expect):
        assert pp_model_size(16384, p, k, 2) == expect

    def test_tiny_case_counted_by_hand(self):
        # p locals of 2x2 + p compressors 1x2 + p(p-1) decompressors 2x1
        assert pp_model_size(4, 2, 1, 1) == 4 * 4 // 2 + 2 * 1 * 4

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigurationError):
            pp_model_size(10, 4, 1, 1)

    def test_valid_k_published_shape(self):
        assert valid_k(16384, 8) == (2048, 1792.0)

    def test_valid_k_tiny(self):
        comm_bound, compute_bound = valid_k(4, 2)
        assert comm_bound == 2
        assert compute_bound == 1.0

    @pytest.mark.parametrize("n,p", [(8, 2), (64, 4), (1024, 16), (4096, 8)])
    def test_compute_bound_below_comm_bound(self, n, p):
        comm_bound, compute_bound = valid_k(n, p)
        assert compute_bound < comm_bound

    def test_layer_validation(self):
        with pytest.raises(ConfigurationError):
            PhantomLayer(np.ones((2, 2)), np.ones((3, 2)), {}, np.zeros(2))  # k > n/p
        with pytest.raises(ConfigurationError):
            init_phantom_model(8, 2, 5, 1)  # k above the n/p hard cap
