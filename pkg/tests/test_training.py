"""Streaming correlated noise and the synthetic training harness."""

import numpy as np
import pytest
import scipy.linalg

from corrdp.batching import PAD_SENTINEL
from corrdp.strategies import (
    BandedStrategy,
    BltStrategy,
    DenseStrategy,
    ParticipationSchema,
    ToeplitzStrategy,
    identity,
    materialize,
)
from corrdp.training import (
    NoiseStream,
    TrainingConfig,
    TrainingResult,
    _synthetic_task,
    noise_next,
    train,
)


def dense_solution(strategy, z):
    return scipy.linalg.solve_triangular(materialize(strategy), z, lower=True)


class TestNoiseStream:
    def test_identity_passes_through(self):
        stream = NoiseStream(identity(4), 1.0, 3)
        z = np.array([0.3, -1.2, 0.5])
        np.testing.assert_array_equal(noise_next(stream, z), z)

    def test_two_step_toeplitz_by_hand(self):
        stream = NoiseStream(ToeplitzStrategy([1.0, 0.5], 2), 1.0, 2)
        first = noise_next(stream, np.array([1.0, 2.0]))
        second = noise_next(stream, np.array([3.0, 4.0]))
        np.testing.assert_allclose(first, [1.0, 2.0])
        np.testing.assert_allclose(second, [2.5, 3.0])

    @pytest.mark.parametrize("strategy", [
        ToeplitzStrategy(np.concatenate([[1.0], np.linspace(0.9, 0.1, 31)]), 32),
        ToeplitzStrategy([1.0, 0.5, 0.25], 32),
        BltStrategy(32, [0.4, 0.2, 0.1], [0.9, 0.6, 0.2]),
        BandedStrategy(32, (np.full(32, 1.0), np.full(31, 0.3))),
    ])
    def test_stream_matches_dense_solve(self, strategy):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((32, 6))
        stream = NoiseStream(strategy, 1.0, 6)
        rows = np.stack([stream.next_row(z[i]) for i in range(32)])
        np.testing.assert_allclose(rows, dense_solution(strategy, z), atol=1e-10)

    def test_dense_random_matrix(self):
        rng = np.random.default_rng(2)
        raw = np.tril(rng.uniform(-0.5, 1.0, (20, 20)))
        np.fill_diagonal(raw, rng.uniform(0.5, 1.5, 20))
        strategy = DenseStrategy(raw)
        z = rng.standard_normal((20, 4))
        stream = NoiseStream(strategy, 1.0, 4)
        rows = np.stack([stream.next_row(z[i]) for i in range(20)])
        np.testing.assert_allclose(rows, dense_solution(strategy, z), atol=1e-10)

    def test_blt_state_is_buffers_times_model_dim(self):
        stream = NoiseStream(BltStrategy(64, [0.3, 0.2, 0.1], [0.9, 0.5, 0.2]),
                             1.0, 10)
        assert stream._buffers.shape == (3, 10)

    def test_exhaustion_raises(self):
        stream = NoiseStream(identity(2), 1.0, 1)
        stream.next_row(np.zeros(1))
        stream.next_row(np.zeros(1))
        with pytest.raises(RuntimeError, match="exhausted"):
            stream.next_row(np.zeros(1))


def small_config(**overrides):
    settings = dict(model_dim=4, dataset_size=64, schema=ParticipationSchema(4, 4),
                    batch_size=16, strategy=identity(16), learning_rate=0.3,
                    clip_norm=1.0, mode="practical_bib",
                    data_seed=0, assignment_seed=1, noise_seed=2)
    settings.update(overrides)
    return TrainingConfig(**settings)


class TestTrain:
    def test_noiseless_single_batch_equals_plain_gd(self):
        config = small_config(schema=ParticipationSchema(1, 8),
                              strategy=identity(8), dataset_size=32,
                              batch_size=32, clip_norm=1e9)
        result = train(config, 0.0)
        features, labels = _synthetic_task(config)
        weights = np.zeros(4)
        for _ in range(8):
            grad = ((features @ weights - labels)[:, None] * features).sum(0) / 32
            weights = weights - 0.3 * grad
        # The harness sums per-example gradients in shuffled order, so agree
        # to float accumulation noise rather than bitwise.
        np.testing.assert_allclose(result.final_weights, weights, rtol=1e-10)

    def test_deterministic_given_seeds(self):
        first = train(small_config(), 1.5)
        second = train(small_config(), 1.5)
        np.testing.assert_array_equal(first.final_weights, second.final_weights)
        assert [s["loss"] for s in first.steps] == [s["loss"] for s in second.steps]

    def test_per_example_gradients_are_clipped(self):
        config = small_config(clip_norm=0.05)
        features, labels = _synthetic_task(config)
        # Replay the loop manually to check each clipped norm.
        from corrdp import batching

        plan = batching.assign(config.dataset_size,
                               config.schema.batches_per_epoch,
                               config.assignment_seed)
        weights = np.zeros(config.model_dim)
        batch = batching.pad_truncate(batching.batch_members(plan)[0],
                                      config.batch_size)
        real = batch.example_indices[batch.example_indices != PAD_SENTINEL]
        x = features[real]
        grads = (x @ weights - labels[real])[:, None] * x
        norms = np.linalg.norm(grads, axis=1)
        clipped = grads * np.minimum(1.0, config.clip_norm / norms)[:, None]
        assert np.all(np.linalg.norm(clipped, axis=1) <= config.clip_norm + 1e-12)
        # And the harness's first-step mean must match this clipped mean.
        result = train(config, 0.0)
        manual_step = config.learning_rate * clipped.sum(0) / config.batch_size
        first_loss_weights = -manual_step
        got = result.steps[0]["grad_norm"]
        assert got == pytest.approx(
            np.linalg.norm(clipped.sum(0) / config.batch_size))
        np.testing.assert_allclose(
            first_loss_weights,
            -config.learning_rate * clipped.sum(0) / config.batch_size)

    def test_padding_contributes_nothing(self):
        # With b > dataset_size some batches are pure padding; their steps
        # must apply zero gradient (only noise).
        config = small_config(dataset_size=2, schema=ParticipationSchema(8, 2),
                              strategy=identity(16), batch_size=4)
        result = train(config, 0.0)
        empty_steps = [s for s in result.steps if s["grad_norm"] == 0.0]
        assert empty_steps, "expected at least one all-padding batch"
        for step in empty_steps:
            assert step["noise_norm"] == 0.0

    def test_modes_change_batching_not_contract(self):
        for mode in ("practical_bib", "shuffle_fixed", "unamplified_sigma"):
            result = train(small_config(mode=mode), 0.5)
            assert len(result.steps) == 16
            assert np.isfinite(result.final_loss)

    def test_momentum_accumulates(self):
        plain = train(small_config(), 0.0)
        heavy = train(small_config(momentum=0.9), 0.0)
        assert plain.final_loss != heavy.final_loss

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            small_config(mode="poisson")
        with pytest.raises(ValueError):
            small_config(momentum=1.0)
        with pytest.raises(ValueError):
            small_config(clip_norm=0.0)
        with pytest.raises(ValueError):
            small_config(strategy=identity(4))

    def test_amplified_sigma_trains_better(self):
        # Smaller noise multiplier, same everything else: lower mean loss.
        losses = {"small": [], "large": []}
        for seed in range(8):
            for name, sigma in (("small", 2.0), ("large", 6.0)):
                config = small_config(data_seed=seed, assignment_seed=seed + 50,
                                      noise_seed=seed + 100)
                losses[name].append(train(config, sigma).final_loss)
        assert np.mean(losses["small"]) < np.mean(losses["large"])
