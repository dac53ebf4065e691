import numpy as np
import pytest

from phantomsim import (Activation, Collective, Communicator,
                        ConfigurationError, Dataset, Direction, EnergyRates,
                        TrainConfig, TrainingError, dense_train, effective_weight,
                        gen_dataset, init_dense_ffn, init_phantom_model,
                        mse_loss_sharded, sgd_step, substream, teacher_targets,
                        train)


class TestDataset:
    def test_deterministic_for_fixed_seed(self):
        a = gen_dataset(8, 5, seed=42)
        b = gen_dataset(8, 5, seed=42)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets)
        assert np.array_equal(a.teacher, b.teacher)

    def test_different_seeds_differ(self):
        a = gen_dataset(8, 5, seed=1)
        b = gen_dataset(8, 5, seed=2)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_nonpositive_columns_are_killed(self):
        # relu zeroes an all-nonpositive column, so its target is relu(W @ 0) = 0
        teacher = np.random.default_rng(0).standard_normal((4, 4))
        x = np.array([[-1.0], [-2.0], [0.0], [-0.5]])
        assert not teacher_targets(teacher, x).any()

    def test_column_spot_check(self):
        data = gen_dataset(6, 4, seed=7)
        col = data.inputs[:, 2]
        expect = np.maximum(data.teacher @ np.maximum(col, 0.0), 0.0)
        assert np.allclose(data.targets[:, 2], expect, atol=0)

    def test_targets_use_fixed_teacher(self):
        data = gen_dataset(6, 9, seed=3)
        recomputed = teacher_targets(data.teacher, data.inputs)
        assert np.array_equal(data.targets, recomputed)


class TestShardedLoss:
    def test_perfect_prediction(self):
        y = np.ones((2, 3))
        comm = Communicator(1)
        outs = comm.run(lambda c, r: mse_loss_sharded(y, y, c, r))
        assert outs[0] == (0.0, 0.0)

    def test_single_element_error_two(self):
        # 0.5 * 2^2 = 2 by hand
        comm = Communicator(1)
        outs = comm.run(lambda c, r: mse_loss_sharded(
            np.array([[3.0]]), np.array([[1.0]]), c, r))
        assert outs[0] == (2.0, 2.0)

    def test_global_equals_unsharded(self):
        rng = np.random.default_rng(0)
        y_out = rng.standard_normal((8, 3))
        y_true = rng.standard_normal((8, 3))
        comm = Communicator(4)
        outs = comm.run(lambda c, r: mse_loss_sharded(
            y_out[2 * r:2 * r + 2], y_true[2 * r:2 * r + 2], c, r))
        unsharded = 0.5 * float(np.sum((y_out - y_true) ** 2))
        # additivity: the global value is the ascending-rank sum of locals
        assert outs[0][1] == pytest.approx(unsharded, rel=1e-12)
        assert outs[0][1] == sum(o[0] for o in outs)

    def test_loss_collective_tagged(self):
        comm = Communicator(2)
        comm.run(lambda c, r: mse_loss_sharded(np.ones((1, 1)), np.zeros((1, 1)), c, r))
        assert comm.records[0].collective is Collective.ALL_REDUCE
        assert comm.records[0].direction is Direction.LOSS
        assert comm.records[0].message_size == 1


class TestOptimizers:
    def test_zero_gradient_keeps_params(self):
        theta = np.array([1.0, 2.0])
        sgd_step([theta], [np.zeros(2)], lr=0.1)
        assert np.array_equal(theta, [1.0, 2.0])

    def test_single_step(self):
        theta = np.array([1.0])
        sgd_step([theta], [np.array([1.0])], lr=0.1)
        assert theta[0] == pytest.approx(0.9)

    def test_two_steps_on_quadratic(self):
        # f = theta^2/2, lr = 0.5: theta halves each step, 1 -> 0.25
        theta = np.array([1.0])
        for _ in range(2):
            sgd_step([theta], [theta.copy()], lr=0.5)
        assert theta[0] == pytest.approx(0.25)

    def test_non_finite_gradient_raises(self):
        with pytest.raises(TrainingError, match="layer0.local"):
            sgd_step([np.ones(1)], [np.array([np.nan])], lr=0.1,
                     names=["layer0.local"])


def phantom_teacher_dataset(n, p, k, seed):
    """Targets generated by a phantom-structured linear teacher, so a
    same-shape student can represent them exactly."""
    teacher = init_phantom_model(n, p, k, 1, Activation.IDENTITY, seed=seed + 99)
    weight = effective_weight(teacher, 0)
    rng = substream(seed, "ts-data")
    inputs = rng.standard_normal((n, 32))
    return Dataset(inputs, weight @ inputs, weight, seed)


class TestTrain:
    def test_identity_teacher_student_converges(self):
        # representable target: loss drives to ~0 at a tuned lr
        n, p, k = 64, 4, 8
        data = phantom_teacher_dataset(n, p, k, seed=12345)
        config = TrainConfig(mode="pp", n=n, p=p, k=k, layers=1, lr=0.1,
                             target_loss=1e-6, max_epochs=2000, seed=12345,
                             loss_reduction="mean", activation=Activation.IDENTITY)
        result = train(config, data)
        assert result.converged
        assert result.final_loss <= 1e-6
        assert result.epochs_run <= 2000

    def test_zero_epochs(self):
        data = gen_dataset(8, 4, seed=0)
        config = TrainConfig(mode="tp", n=8, p=2, layers=1, max_epochs=0)
        result = train(config, data)
        assert result.epochs_run == 0
        assert not result.converged
        assert result.cost.energy_total_j == 0.0

    def test_result_internal_consistency(self):
        data = gen_dataset(16, 8, seed=1)
        config = TrainConfig(mode="pp", n=16, p=2, k=2, layers=2, lr=1e-3,
                             max_epochs=5, seed=1)
        result = train(config, data)
        assert result.epochs_run == len(result.loss_history) == 5
        cost = result.cost
        assert cost.energy_total_j == pytest.approx(cost.nu * cost.e_per_iteration_j)
        rates = EnergyRates()
        assert cost.e_per_iteration_j == pytest.approx(
            rates.busy_watts * cost.alpha_s + rates.idle_watts * cost.beta_s)

    @pytest.mark.parametrize("p", [2, 4])
    def test_tp_history_matches_dense_reference(self, p):
        n, layers, epochs = 64, 2, 50
        data = gen_dataset(n, 16, seed=5)
        dense = init_dense_ffn(n, layers, Activation.RELU, seed=5)
        dense_hist = dense_train(dense, data.inputs, data.targets, lr=1e-4,
                                 epochs=epochs, reduction="mean")
        config = TrainConfig(mode="tp", n=n, p=p, layers=layers, lr=1e-4,
                             max_epochs=epochs, seed=5, loss_reduction="mean")
        result = train(config, data)
        for a, b in zip(dense_hist, result.loss_history):
            assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    def test_tp_history_p_invariant(self):
        n, layers = 32, 2
        data = gen_dataset(n, 8, seed=9)
        histories = []
        for p in (1, 2, 4):
            config = TrainConfig(mode="tp", n=n, p=p, layers=layers, lr=1e-4,
                                 max_epochs=30, seed=9, loss_reduction="mean")
            histories.append(train(config, data).loss_history)
        for other in histories[1:]:
            for a, b in zip(histories[0], other):
                assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    def test_pp_collective_schedule_matches_table(self):
        n, p, k, layers, batch = 16, 4, 2, 3, 4
        data = gen_dataset(n, batch, seed=2)
        config = TrainConfig(mode="pp", n=n, p=p, k=k, layers=layers, lr=1e-4,
                             max_epochs=2, seed=2)
        # reach into the run's records via a fresh communicator-level run
        from phantomsim.training import pp_iteration
        model = init_phantom_model(n, p, k, layers, Activation.RELU, seed=2)
        s = n // p
        comm = Communicator(p)
        comm.run(lambda c, r: pp_iteration(
            c, r, model.rank_layers[r], model.activations,
            data.inputs[r * s:(r + 1) * s], data.targets[r * s:(r + 1) * s]))
        records = comm.records
        assert len(records) == 2 * layers + 1
        per_layer_fwd = [(rec.collective, rec.message_size, rec.layer)
                         for rec in records if rec.direction is Direction.FORWARD]
        per_layer_bwd = [(rec.collective, rec.message_size, rec.layer)
                         for rec in records if rec.direction is Direction.BACKWARD]
        assert per_layer_fwd == [(Collective.ALL_GATHER, k * batch, l) for l in range(layers)]
        assert sorted(per_layer_bwd, key=lambda t: t[2]) == [
            (Collective.REDUCE_SCATTER, k * batch, l) for l in range(layers)]

    def test_monotone_loss_identity_quadratic_small_lr(self):
        n, p, k = 16, 2, 3
        data = phantom_teacher_dataset(n, p, k, seed=21)
        # sum-reduction gradient Lipschitz constant is sigma_max(X X^T);
        # stay below 1/that (and below the effective-weight curvature)
        sigma_x = np.linalg.norm(data.inputs @ data.inputs.T, 2)
        sigma_w = np.linalg.norm(data.teacher, 2)
        lr = 0.5 / max(sigma_x, sigma_w ** 2)
        config = TrainConfig(mode="pp", n=n, p=p, k=k, layers=1, lr=lr,
                             max_epochs=200, seed=21,
                             activation=Activation.IDENTITY)
        result = train(config, data)
        hist = result.loss_history
        for before, after in zip(hist, hist[1:]):
            assert after <= before * (1 + 1e-12)

    def test_divergence_raises_training_error(self):
        data = gen_dataset(16, 8, seed=3)
        config = TrainConfig(mode="pp", n=16, p=2, k=2, layers=2, lr=1e3,
                             max_epochs=50, seed=3)
        with pytest.raises((TrainingError, ConfigurationError)):
            train(config, data)

    def test_scheduler_modes_produce_identical_histories(self):
        data = gen_dataset(16, 8, seed=4)
        histories = {}
        for scheduler in ("lockstep", "threads"):
            config = TrainConfig(mode="pp", n=16, p=4, k=2, layers=2, lr=1e-3,
                                 max_epochs=10, seed=4, scheduler=scheduler)
            histories[scheduler] = train(config, data).loss_history
        assert histories["lockstep"] == histories["threads"]

    def test_adam_smoke(self):
        data = gen_dataset(16, 8, seed=6)
        config = TrainConfig(mode="pp", n=16, p=2, k=2, layers=2, lr=1e-3,
                             optimizer="adam", max_epochs=10, seed=6)
        result = train(config, data)
        assert result.loss_history[-1] < result.loss_history[0]

    def test_minibatch_iterations_counted(self):
        data = gen_dataset(8, 12, seed=7)
        config = TrainConfig(mode="tp", n=8, p=2, layers=1, lr=1e-4,
                             batch=4, max_epochs=3, seed=7)
        result = train(config, data)
        assert result.iterations_run == 9  # 3 epochs x 3 batches

    def test_batch_must_divide_samples(self):
        data = gen_dataset(8, 10, seed=8)
        config = TrainConfig(mode="tp", n=8, p=2, layers=1, batch=3, max_epochs=1)
        with pytest.raises(ConfigurationError):
            train(config, data)


class TestConfigValidation:
    def test_k_must_respect_comm_bound(self):
        config = TrainConfig(mode="pp", n=8, p=2, k=4, layers=1)
        with pytest.raises(ConfigurationError, match="valid_k"):
            config.validate()

    def test_k_below_bound_accepted(self):
        TrainConfig(mode="pp", n=8, p=2, k=3, layers=1).validate()

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError, match="mode"):
            TrainConfig(mode="dense", n=8, p=2, layers=1).validate()

    def test_divisibility(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="tp", n=10, p=4, layers=1).validate()
