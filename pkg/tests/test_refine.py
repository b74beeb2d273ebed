import numpy as np
import pytest

from meshsurrogate.autodiff import Tensor
from meshsurrogate.datagen import Dataset
from meshsurrogate.refine import (AdaptiveUpsampler, RefinedSurrogate,
                                  level_contribution, lift_to_full,
                                  lifted_coarse_loss, rebuild_chain,
                                  train_next_level)
from meshsurrogate.surrogate import (Adam, TrainConfig, coarsest_surrogate,
                                     dataset_arrays, downsampled_dataset,
                                     loss, train)


@pytest.fixture()
def frozen_chain(small_hierarchy, small_benchmark):
    """Coarsest model (level 2), frozen, plus a freshly built refined level 1."""
    data, _ = small_benchmark
    coarse = coarsest_surrogate(small_hierarchy, data, latent=4, seed=0)
    coarse.store.freeze(coarse.param_names())
    rng = np.random.default_rng(1)
    refined = RefinedSurrogate(coarse.store, "level1", coarse, small_hierarchy, rng)
    return coarse, refined


class TestWarmStart:
    def test_prediction_equals_static_lift(self, frozen_chain, small_hierarchy):
        coarse, refined = frozen_chain
        up = small_hierarchy.upsamplers[1]
        rng = np.random.default_rng(2)
        for _ in range(50):
            mu = rng.uniform([5, -0.7, 168], [35, 0.7, 758])
            t = rng.uniform(0, 1)
            lifted = up @ coarse.predict(mu, t)
            assert np.max(np.abs(refined.predict(mu, t) - lifted)) < 1e-12

    def test_adaptive_upsampler_matches_static(self, small_hierarchy):
        from meshsurrogate.autodiff import ParamStore

        up = small_hierarchy.upsamplers[0]
        store = ParamStore()
        theta = AdaptiveUpsampler(store, "theta", up)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, up.shape[1], 3))
        out = theta(Tensor(x)).value
        want = np.stack([up @ x[s] for s in range(4)])
        assert np.max(np.abs(out - want)) < 1e-13

    def test_encode_zero_is_zero(self, frozen_chain):
        _, refined = frozen_chain
        z = refined.encode(Tensor(np.zeros((1, refined.n_nodes, 3)))).value
        assert np.array_equal(z, np.zeros((1, refined.latent_dim)))

    def test_epoch0_loss_equals_lifted_coarse(self, small_hierarchy,
                                              small_benchmark):
        data, _ = small_benchmark
        coarse = coarsest_surrogate(small_hierarchy, data, latent=4, seed=0)
        cfg = TrainConfig(epochs=2, seed=0)
        level_data = downsampled_dataset(data, small_hierarchy, 1)
        refined, history = train_next_level(coarse, level_data,
                                            small_hierarchy, cfg)
        lifted, _, _ = lifted_coarse_loss(coarse, refined, level_data.train(),
                                          cfg)
        assert abs(history.initial_total - lifted) < 1e-10

    def test_level_contribution_zero_at_init(self, frozen_chain, small_hierarchy):
        coarse, refined = frozen_chain
        delta = level_contribution(refined, coarse, [20.0, 0.1, 400.0], 0.5,
                                   small_hierarchy)
        assert delta.shape == (20, 3)
        assert np.max(np.abs(delta)) < 1e-12


class TestFrozenTraining:
    def test_frozen_grads_zero_every_epoch(self, frozen_chain, small_hierarchy,
                                           small_benchmark):
        coarse, refined = frozen_chain
        data, _ = small_benchmark
        level_data = downsampled_dataset(data, small_hierarchy, 1).train()
        inputs, states = dataset_arrays(level_data, refined.norm)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=0)
        opt = Adam(refined.store, cfg)
        rng = np.random.default_rng(cfg.seed)
        frozen = [n for n in refined.store.names() if refined.store.is_frozen(n)]
        assert frozen  # the whole coarse model plus normalization stats
        for epoch in range(cfg.epochs):
            order = rng.permutation(inputs.shape[0])
            for start in range(0, inputs.shape[0], cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                refined.store.zero_grad()
                total, _, _ = loss(Tensor(inputs[idx]), Tensor(states[idx]),
                                   refined, 1.0, 1.0)
                total.backward()
                for name in frozen:
                    g = refined.store[name].grad
                    assert g is None or not np.any(g)
                opt.step(opt.cfg.learning_rate)

    def test_frozen_cache_matches_direct(self, frozen_chain, small_hierarchy,
                                         small_benchmark):
        _, refined = frozen_chain
        data, _ = small_benchmark
        level_data = downsampled_dataset(data, small_hierarchy, 1)
        inputs, states = dataset_arrays(level_data, refined.norm)
        direct, _, _ = loss(Tensor(inputs), Tensor(states), refined, 1.0, 1.0)
        cache = refined.precompute_frozen(inputs, states)
        refined.frozen_batch = cache
        try:
            cached, _, _ = loss(Tensor(inputs), Tensor(states), refined, 1.0, 1.0)
        finally:
            refined.frozen_batch = None
        assert direct.value == cached.value

    def test_training_improves_on_warm_start(self, small_hierarchy,
                                             small_benchmark):
        data, _ = small_benchmark
        coarse = coarsest_surrogate(small_hierarchy, data, latent=4, seed=0)
        level_data = downsampled_dataset(data, small_hierarchy, 1)
        cfg = TrainConfig(epochs=10, batch_size=8, seed=0)
        _, history = train_next_level(coarse, level_data, small_hierarchy, cfg)
        assert history.total[history.best_epoch] <= history.initial_total


class TestLift:
    def test_level_zero_identity(self, small_hierarchy):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 3))
        assert np.array_equal(lift_to_full(x, small_hierarchy, 0), x)

    def test_constant_preserved(self, small_hierarchy):
        x = np.full((6, 3), 2.5)
        lifted = lift_to_full(x, small_hierarchy, 2)
        assert np.max(np.abs(lifted - 2.5)) < 1e-12

    def test_composition_identity(self, small_hierarchy):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3))
        direct = lift_to_full(x, small_hierarchy, 2)
        stepped = small_hierarchy.upsamplers[0] @ (small_hierarchy.upsamplers[1] @ x)
        assert np.max(np.abs(direct - stepped)) < 1e-12

    def test_batched_matches_single(self, small_hierarchy):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4, 6, 3))
        lifted = lift_to_full(x, small_hierarchy, 2)
        assert lifted.shape == (3, 4, 20, 3)
        for s in range(3):
            for k in range(4):
                single = lift_to_full(x[s, k], small_hierarchy, 2)
                assert np.allclose(lifted[s, k], single, atol=1e-14)

    def test_level_out_of_range(self, small_hierarchy):
        with pytest.raises(ValueError):
            lift_to_full(np.zeros((6, 3)), small_hierarchy, 3)


class TestChain:
    def test_refined_below_level_zero_rejected(self, frozen_chain,
                                               small_hierarchy):
        _, refined1 = frozen_chain
        rng = np.random.default_rng(0)
        refined1.store.freeze(refined1.param_names())
        refined0 = RefinedSurrogate(refined1.store, "level0", refined1,
                                    small_hierarchy, rng)
        with pytest.raises(ValueError, match="finest"):
            RefinedSurrogate(refined0.store, "levelx", refined0,
                             small_hierarchy, rng)

    def test_dataset_level_mismatch(self, frozen_chain, small_hierarchy,
                                    small_benchmark):
        coarse, _ = frozen_chain
        data, _ = small_benchmark
        with pytest.raises(ValueError, match="nodes"):
            train_next_level(coarse, data, small_hierarchy, TrainConfig(epochs=1))

    def test_rebuild_chain_reproduces_predictions(self, small_hierarchy,
                                                  small_benchmark, tmp_path):
        data, _ = small_benchmark
        cfg = TrainConfig(epochs=1, seed=0, batch_size=8)
        coarse = coarsest_surrogate(small_hierarchy, data, latent=4, seed=0)
        train(coarse, downsampled_dataset(data, small_hierarchy, 2), cfg)
        refined, _ = train_next_level(
            coarse, downsampled_dataset(data, small_hierarchy, 1),
            small_hierarchy, cfg)
        path = tmp_path / "chain.mhw"
        refined.store.save(path)

        from meshsurrogate.autodiff import ParamStore

        models = rebuild_chain(ParamStore.load(path), small_hierarchy, 4)
        assert [m.level for m in models] == [2, 1]
        for mu, t in (([10.0, 0.0, 300.0], 0.25), ([30.0, -0.5, 700.0], 0.9)):
            for orig, rebuilt in zip([coarse, refined], models):
                assert np.allclose(orig.predict(mu, t), rebuilt.predict(mu, t),
                                   atol=1e-12)
