"""Episode sampling, prototypes, posteriors, episode loss, meta-training."""

import numpy as np
import pytest

from protoanchor.episodic import (
    EpisodeTask,
    class_posteriors,
    compute_prototypes,
    episode_loss,
    meta_train,
    predict,
    sample_episode,
)
from protoanchor.errors import ArgumentError, ConfigurationError
from protoanchor.model import ModelConfig
from protoanchor.tensorcore import Graph, Tensor, adam_step, backward, collect_grads, init_adam, ops, zero_grads
from protoanchor.twinsim import Label, SignalConfig, ZERO_SHIFT, generate


def toy_pool(per_class=25, n_way=4, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    pool = {}
    for c in range(n_way):
        pool[c] = rng.normal(size=(per_class, 3, dim)) + 3.0 * c
    return pool


class TestSampleEpisode:
    def test_counts_4way_5shot_15query(self):
        task = sample_episode(toy_pool(), 4, 5, 15, seed=1)
        assert task.support_x.shape[0] == 20
        assert task.query_x.shape[0] == 60
        assert np.all(np.bincount(task.support_y) == 5)
        assert np.all(np.bincount(task.query_y) == 15)

    def test_same_seed_identical(self):
        a = sample_episode(toy_pool(), 4, 3, 5, seed=7)
        b = sample_episode(toy_pool(), 4, 3, 5, seed=7)
        assert np.array_equal(a.support_x, b.support_x)
        assert np.array_equal(a.query_x, b.query_x)

    def test_support_query_disjoint(self):
        pool = toy_pool(per_class=20)
        task = sample_episode(pool, 4, 5, 15, seed=3)
        # 5 + 15 exhausts each class, so disjointness means every sample
        # appears exactly once across support + query.
        for c in range(4):
            used = np.concatenate([task.support_x[task.support_y == c], task.query_x[task.query_y == c]])
            assert used.shape[0] == 20
            assert len({arr.tobytes() for arr in used}) == 20

    def test_insufficient_pool(self):
        with pytest.raises(ConfigurationError):
            sample_episode(toy_pool(per_class=10), 4, 5, 15, seed=0)


class TestPrototypes:
    def test_single_shot_prototype_is_embedding(self):
        emb = np.array([[1.0, 2.0], [3.0, 4.0]])
        protos = compute_prototypes(emb, np.array([0, 1]), 2)
        assert np.array_equal(protos.data, emb)

    def test_two_vector_mean(self):
        emb = np.array([[0.0, 0.0], [2.0, 2.0]])
        protos = compute_prototypes(emb, np.array([0, 0]), 1)
        assert np.array_equal(protos.data, [[1.0, 1.0]])

    def test_matches_bruteforce_mean(self):
        rng = np.random.default_rng(11)
        emb = rng.normal(size=(24, 7))
        labels = np.repeat(np.arange(4), 6)
        protos = compute_prototypes(emb, labels, 4).data
        for c in range(4):
            want = emb[labels == c].mean(axis=0)
            assert np.max(np.abs(protos[c] - want)) < 1e-12

    def test_permutation_within_class_invariant(self):
        rng = np.random.default_rng(13)
        emb = rng.normal(size=(12, 5))
        labels = np.repeat(np.arange(3), 4)
        base = compute_prototypes(emb, labels, 3).data
        perm = np.concatenate([rng.permutation(np.where(labels == c)[0]) for c in range(3)])
        shuffled = compute_prototypes(emb[perm], labels[perm], 3).data
        assert np.allclose(base, shuffled, atol=1e-12)


class TestPosteriors:
    def test_query_at_prototype(self):
        protos = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        post = class_posteriors(np.array([[10.0, 0.0]]), protos)
        assert post[0].argmax() == 1

    def test_equidistant_uniform(self):
        protos = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        post = class_posteriors(np.array([[0.0, 0.0]]), protos)
        assert np.allclose(post[0], 0.25, atol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(17)
        q = rng.normal(size=(9, 4))
        p = rng.normal(size=(3, 4))
        post = class_posteriors(q, p)
        for m in range(9):
            d = np.array([np.sum((q[m] - p[n]) ** 2) for n in range(3)])
            want = np.exp(-d) / np.exp(-d).sum()
            assert np.max(np.abs(post[m] - want)) < 1e-12

    def test_proper_distribution_for_extreme_distances(self):
        q = np.array([[1000.0, -1000.0], [0.001, 0.0]])
        p = np.array([[0.0, 0.0], [2000.0, 0.0]])
        post = class_posteriors(q, p)
        assert np.all(post >= 0)
        assert np.allclose(post.sum(axis=1), 1.0, atol=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(19)
        q = rng.normal(size=(5, 3))
        p = rng.normal(size=(4, 3))
        shift = rng.normal(size=(3,))
        a = class_posteriors(q, p)
        b = class_posteriors(q + shift, p + shift)
        assert np.max(np.abs(a - b)) < 1e-10


class TestEpisodeLoss:
    def test_equidistant_loss_is_log_n(self):
        protos = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
        q = Tensor(np.zeros((4, 2)))
        loss = episode_loss(q, np.arange(4), protos)
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_equals_mean_negative_log_posterior(self):
        rng = np.random.default_rng(23)
        q = rng.normal(size=(12, 5))
        p = rng.normal(size=(4, 5))
        labels = np.repeat(np.arange(4), 3)
        loss = episode_loss(Tensor(q), labels, Tensor(p)).item()
        post = class_posteriors(q, p)
        want = -np.mean(np.log(post[np.arange(12), labels]))
        assert abs(loss - want) < 1e-10

    def test_loss_decreases_on_separable_toy_embeddings(self):
        rng = np.random.default_rng(29)
        emb = Tensor(rng.normal(size=(20, 2)), requires_grad=True)
        labels = np.repeat(np.arange(4), 5)
        params = {"emb": emb}
        state = init_adam(params)
        losses = []
        for _ in range(50):
            with Graph():
                protos = compute_prototypes(emb, labels, 4)
                loss = episode_loss(emb, labels, protos)
                losses.append(loss.item())
                zero_grads(params)
                backward(loss)
                adam_step(params, collect_grads(params), state, lr=0.05)
        assert losses[-1] < losses[0]


def signal_pool(domain="virtual", per_class=25, seed=0, rate=1280.0):
    cfg = SignalConfig(sample_rate_hz=rate)
    pool = {}
    for label in Label:
        samples = generate(label, 2700, domain, ZERO_SHIFT, per_class, seed=(seed, label.name), signal=cfg)
        pool[label] = np.stack([s.phases for s in samples])
    return pool


def small_model_cfg(**kw):
    base = dict(
        mscnn_channels=4,
        top_k=3,
        stage_channels=(8, 8, 8),
        blocks_per_stage=1,
        embedding_dim=8,
    )
    base.update(kw)
    return ModelConfig(**base)


class TestMetaTrain:
    def test_zero_lr_keeps_initial_params(self):
        pool = toy_pool(per_class=10, dim=16)
        cfg = small_model_cfg()
        state, _ = meta_train(pool, cfg, 4, 2, 3, iterations=3, lr=0.0, seed=5)
        from protoanchor.model import init_state
        from protoanchor.seeding import seed_for

        fresh = init_state(cfg, seed=seed_for(5, "init"))
        for name in state.params:
            assert np.array_equal(state.params[name].data, fresh.params[name].data)

    def test_trace_reproducible(self):
        pool = toy_pool(per_class=10, dim=16)
        cfg = small_model_cfg()
        _, t1 = meta_train(pool, cfg, 4, 2, 3, iterations=4, lr=1e-3, seed=6)
        _, t2 = meta_train(pool, cfg, 4, 2, 3, iterations=4, lr=1e-3, seed=6)
        assert t1 == t2

    def test_same_domain_accuracy_after_training(self):
        """End-to-end smoke: >90% query accuracy on the easy synthetic task."""
        pool = signal_pool(per_class=25, seed=1)
        cfg = small_model_cfg()
        state, trace = meta_train(pool, cfg, 4, 5, 15, iterations=60, lr=1e-3, seed=7)
        task = sample_episode(pool, 4, 5, 15, seed=999)
        preds, _ = predict(state, task.support_x, task.support_y, task.query_x, 4)
        acc = float(np.mean(preds == task.query_y))
        assert trace[-1][1] < trace[0][1]
        assert acc > 0.9
