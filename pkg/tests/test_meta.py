import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import balanced_batch
from core import backbone
from core.backbone import BackboneConfig, LabeledBatch, ParameterLayout, ParameterVector
from core.meta import (
    MetaConfig,
    MetaTrainer,
    MetaTrainingError,
    OuterOptimizer,
    TaskEpisode,
    TaskSourceExhausted,
    adapt,
    inner_update,
    meta_gradient,
    meta_gradient_step,
    meta_train,
)
from core.synthgen import generate_bank
from core.taskbank import EpisodeSampler, TaskId, enumerate_tasks


class SquaredNorm:
    """L(θ) = |θ|^2（バッチに依存しない）"""

    def value_and_grad(self, params, batch):
        return float(params.dot(params)), 2.0 * params

    def hessian_vector_product(self, params, batch, v):
        return 2.0 * v


def scalar(value):
    return ParameterVector(torch.tensor([value], dtype=torch.float64), ParameterLayout.flat('theta', 1))


def dummy_episode(name='t'):
    support = LabeledBatch(np.zeros((2, 1)), [1, 0], (f'{name}s0', f'{name}s1'))
    query = LabeledBatch(np.zeros((2, 1)), [1, 0], (f'{name}q0', f'{name}q1'))
    return TaskEpisode(TaskId(name, 'a'), support, query)


def network_episodes(dim, count, seed=0, shots=3):
    return [
        TaskEpisode(
            TaskId(f's{i}', 'a'),
            balanced_batch(shots, dim, seed=seed + 2 * i, prefix=f's{i}_'),
            balanced_batch(shots, dim, seed=seed + 2 * i + 1, prefix=f'q{i}_'),
        )
        for i in range(count)
    ]


def composed_objective(params, episodes, alpha, steps):
    return sum(backbone.loss(inner_update(params, e.support, alpha, steps), e.query) for e in episodes)


class FixedSource:
    """毎回同じエピソードを返すタスク供給元"""

    def __init__(self, episodes):
        self.episodes = episodes
        self.default_batch_size = len(episodes)

    def sample_batch(self, count, rng):
        if count > len(self.episodes):
            raise TaskSourceExhausted(f"{count} > {len(self.episodes)}")
        return self.episodes[:count]


class TestMetaConfig:
    @pytest.mark.parametrize('field, value', [
        ('alpha', 0.0), ('beta', -1.0), ('inner_steps_train', 0), ('meta_batch_size', 0),
        ('gradient_order', 'second'), ('outer_optimizer', 'rmsprop'),
    ])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError, match=field):
            MetaConfig(**{field: value})

    def test_resolved_batch_size(self):
        assert MetaConfig().resolved(12).meta_batch_size == 12
        assert MetaConfig(meta_batch_size=4).resolved(12).meta_batch_size == 4


class TestTaskEpisode:
    def test_rejects_unbalanced_support(self):
        support = LabeledBatch(np.zeros((3, 1)), [1, 1, 0], ('a', 'b', 'c'))
        query = LabeledBatch(np.zeros((2, 1)), [1, 0], ('d', 'e'))
        with pytest.raises(ValueError, match='class-balanced'):
            TaskEpisode(TaskId('s', 'a'), support, query)

    def test_rejects_shared_examples(self):
        support = LabeledBatch(np.zeros((2, 1)), [1, 0], ('a', 'b'))
        query = LabeledBatch(np.zeros((2, 1)), [1, 0], ('b', 'c'))
        with pytest.raises(ValueError, match='share'):
            TaskEpisode(TaskId('s', 'a'), support, query)


class TestInnerUpdate:
    def test_quadratic_single_step(self):
        theta = inner_update(scalar(1.0), None, 0.1, 1, objective=SquaredNorm())
        assert theta.numpy()[0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_alpha_keeps_params(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        assert inner_update(params, balanced_batch(3, 4), 0.0, 3).equals(params)

    def test_zero_steps_keeps_params(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        assert adapt(params, balanced_batch(3, 4), 0.03, 0).equals(params)

    def test_two_steps_compose(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        support = balanced_batch(3, 4, seed=1)
        twice = inner_update(inner_update(params, support, 0.1, 1), support, 0.1, 1)
        assert inner_update(params, support, 0.1, 2).equals(twice)

    def test_adapt_is_inner_update(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        support = balanced_batch(3, 4, seed=2)
        assert adapt(params, support, 0.05, 5).equals(inner_update(params, support, 0.05, 5))

    def test_negative_steps(self):
        with pytest.raises(ValueError):
            inner_update(scalar(1.0), None, 0.1, -1, objective=SquaredNorm())


class TestMetaGradient:
    def test_quadratic_chain_rule(self):
        theta = scalar(1.0)
        episodes = [dummy_episode()]
        exact = meta_gradient(theta, episodes, 0.1, 1, 'exact', objective=SquaredNorm())
        first = meta_gradient(theta, episodes, 0.1, 1, 'first_order', objective=SquaredNorm())
        # θ' = 0.8, (1 - 0.1 * 2) * (2 * 0.8) = 1.28, 2 * 0.8 = 1.6
        assert exact.numpy()[0] == pytest.approx(1.28, abs=1e-15)
        assert first.numpy()[0] == pytest.approx(1.6, abs=1e-15)

    def test_quadratic_two_steps(self):
        exact = meta_gradient(scalar(1.0), [dummy_episode()], 0.1, 2, 'exact', objective=SquaredNorm())
        # θ'' = 0.64, (0.8)^2 * 2 * 0.64
        assert exact.numpy()[0] == pytest.approx(0.8 * 0.8 * 1.28, abs=1e-15)

    def test_empty_episodes(self):
        with pytest.raises(ValueError, match='at least one episode'):
            meta_gradient(scalar(1.0), [], 0.1, 1, objective=SquaredNorm())

    def test_zero_alpha_both_orders_are_query_gradient(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        episodes = network_episodes(4, 3)
        expected = backbone.loss_grad(params, episodes[0].query)
        for episode in episodes[1:]:
            expected = expected + backbone.loss_grad(params, episode.query)
        for order in ('exact', 'first_order'):
            assert meta_gradient(params, episodes, 0.0, 1, order).equals(expected)

    def test_first_order_formula(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        episodes = network_episodes(4, 3, seed=5)
        expected = None
        for episode in episodes:
            g = backbone.loss_grad(inner_update(params, episode.support, 0.1, 2), episode.query)
            expected = g if expected is None else expected + g
        assert meta_gradient(params, episodes, 0.1, 2, 'first_order').equals(expected)

    @pytest.mark.parametrize('seed', range(10))
    @pytest.mark.parametrize('steps', [1, 2])
    def test_exact_matches_finite_differences(self, seed, steps):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(2, 5))
        config = BackboneConfig(input_kind='vector', input_shape=(dim,), conv_channels=(int(rng.integers(2, 5)),),
                                use_batchnorm=bool(seed % 2), activation='tanh', dtype='float64', seed=seed)
        params = backbone.init_params(config)
        params = params + params.with_values(torch.as_tensor(rng.normal(scale=0.1, size=len(params))))
        episodes = network_episodes(dim, 2, seed=10 * seed)
        alpha, h = 0.1, 1e-5

        grad = meta_gradient(params, episodes, alpha, steps, 'exact').numpy()
        fd = np.empty(len(params))
        for i in range(len(params)):
            step = torch.zeros_like(params.values)
            step[i] = h
            plus = composed_objective(params.with_values(params.values + step), episodes, alpha, steps)
            minus = composed_objective(params.with_values(params.values - step), episodes, alpha, steps)
            fd[i] = (plus - minus) / (2 * h)
        assert np.all(np.abs(grad - fd) <= 1e-3 * np.maximum(np.abs(grad), np.abs(fd)) + 1e-8)

    def test_exact_approaches_first_order_as_alpha_shrinks(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        episodes = network_episodes(4, 2, seed=3)
        alphas = [0.08, 0.04, 0.02, 0.01]
        gaps = [
            (meta_gradient(params, episodes, a, 1, 'exact') - meta_gradient(params, episodes, a, 1, 'first_order')).norm()
            for a in alphas
        ]
        ratios = [gap / a for gap, a in zip(gaps, alphas)]
        c = max(ratios)
        assert all(gap <= c * a for gap, a in zip(gaps, alphas))
        assert gaps == sorted(gaps, reverse=True)
        assert max(ratios) / min(ratios) < 1.5

    def test_parallel_reduction_is_bit_identical(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        episodes = network_episodes(4, 5, seed=8)
        sequential = meta_gradient_step(params, episodes, 0.1, 2, 'exact', workers=1)
        parallel = meta_gradient_step(params, episodes, 0.1, 2, 'exact', workers=4)
        assert parallel.grad.equals(sequential.grad)
        assert parallel.mean_query_loss == sequential.mean_query_loss


class TestOuterOptimizer:
    def test_adam_three_step_trace(self):
        lr, b1, b2, eps = 0.03, 0.9, 0.999, 1e-8
        grads = [0.5, -1.2, 2.0]
        optimizer = OuterOptimizer(scalar(1.0), 'adam', lr, (b1, b2), eps)

        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            theta -= lr * m_hat / (v_hat ** 0.5 + eps)
            assert optimizer.step(scalar(g)).numpy()[0] == pytest.approx(theta, rel=1e-12)

    def test_sgd_with_zero_alpha_is_plain_step(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        episode = network_episodes(4, 1, seed=4)[0]
        beta = 0.03
        stepped = OuterOptimizer(params, 'sgd', beta).step(meta_gradient(params, [episode], 0.0, 1))
        expected = params - beta * backbone.loss_grad(params, episode.query)
        torch.testing.assert_close(stepped.values, expected.values, rtol=1e-13, atol=1e-15)


class TestMetaTrainer:
    def test_zero_iterations_returns_init(self, tiny_vector_config):
        source = FixedSource(network_episodes(4, 2))
        theta = meta_train(tiny_vector_config, MetaConfig(meta_iterations=0), source)
        assert theta.equals(backbone.init_params(tiny_vector_config))

    def test_deterministic_replay(self, tiny_vector_config, small_bank):
        config = BackboneConfig(input_kind='vector', input_shape=small_bank.input_shape, conv_channels=(5,),
                                dtype='float64', seed=1)
        plan = enumerate_tasks(small_bank, 's00', shots=3)
        meta_config = MetaConfig(meta_iterations=3, shots_train=3, meta_batch_size=3, seed=7)
        first = meta_train(config, meta_config, EpisodeSampler(small_bank, plan.train_tasks, 3))
        second = meta_train(config, meta_config, EpisodeSampler(small_bank, plan.train_tasks, 3))
        parallel = meta_train(config, MetaConfig(meta_iterations=3, shots_train=3, meta_batch_size=3, seed=7,
                                                 workers=3),
                              EpisodeSampler(small_bank, plan.train_tasks, 3))
        assert first.equals(second)
        assert first.equals(parallel)

    def test_progress_records(self, tiny_vector_config):
        records = []
        trainer = MetaTrainer(tiny_vector_config, MetaConfig(meta_iterations=4), FixedSource(network_episodes(4, 2)),
                              progress_callback=records.append)
        trainer.train()
        assert [r.iteration for r in records] == [1, 2, 3, 4]
        assert trainer.batch_size == 2
        line = json.loads(records[0].to_json())
        assert set(line) == {'iteration', 'mean_support_loss', 'mean_query_loss', 'wall_ms'}

    def test_exhausted_source_reports_iteration(self, tiny_vector_config):
        source = FixedSource(network_episodes(4, 2))
        with pytest.raises(MetaTrainingError) as info:
            meta_train(tiny_vector_config, MetaConfig(meta_iterations=2, meta_batch_size=3), source)
        assert info.value.iteration == 1
        assert isinstance(info.value.__cause__, TaskSourceExhausted)

    def test_training_lowers_query_loss(self, tiny_vector_config):
        episodes = network_episodes(4, 2, seed=11)
        trainer = MetaTrainer(tiny_vector_config, MetaConfig(meta_iterations=30, beta=0.05), FixedSource(episodes))
        trainer.train()
        assert trainer.history[-1].mean_query_loss < trainer.history[0].mean_query_loss

    def test_early_stop_returns_best_validated(self, tiny_vector_config):
        trainer = MetaTrainer(
            tiny_vector_config,
            MetaConfig(meta_iterations=20, validate_every=2, patience=2),
            FixedSource(network_episodes(4, 2, seed=1)),
            validation_source=FixedSource(network_episodes(4, 2, seed=21)),
        )
        theta = trainer.train()
        assert trainer.validation_history
        best = min(loss for _, loss in trainer.validation_history)
        assert trainer.validation_loss(theta, network_episodes(4, 2, seed=21)) == pytest.approx(best)

@pytest.mark.slow
def test_training_lowers_query_loss_across_seeds(small_synth_config):
    improvements = []
    for seed in range(5):
        dataset = generate_bank(replace(small_synth_config, seed=seed))
        config = BackboneConfig(input_kind='vector', input_shape=dataset.input_shape, conv_channels=(8,), seed=seed)
        sampler = EpisodeSampler(dataset, dataset.tasks(), 5)
        trainer = MetaTrainer(config, MetaConfig(meta_iterations=40, meta_batch_size=4, seed=seed), sampler)
        theta = trainer.train()

        held = sampler.sample_batch(len(dataset.tasks()), np.random.default_rng(1000 + seed))
        before = trainer.validation_loss(backbone.init_params(config), held)
        improvements.append(before - trainer.validation_loss(theta, held))
    assert np.mean(improvements) > 0
    assert sum(i > 0 for i in improvements) >= 3
