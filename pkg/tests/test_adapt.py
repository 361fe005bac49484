"""Covariance estimation, augmentation statistics, anchoring/entropy losses."""

import numpy as np
import pytest

from protoanchor.adapt import (
    AugmentedFeatureSet,
    anchoring_loss_s2t,
    anchoring_loss_t2s,
    augment,
    entropy_reg,
    estimate_class_covariances,
    estimate_covariance,
    sample_source_batch,
    target_prototypes,
)
from protoanchor.episodic import compute_prototypes
from protoanchor.errors import ArgumentError
from protoanchor.tensorcore import Graph, Tensor, backward, ops

from _helpers import fd_grad_check


# ---------------------------------------------------------------------------
# Independent oracle implementations: plain translations of the loss
# definitions, coded without tensorcore.
# ---------------------------------------------------------------------------


def oracle_covariance(features, shrinkage=1e-3):
    k, w = features.shape
    if k == 1:
        return np.eye(w)
    mean = features.mean(axis=0)
    cov = np.zeros((w, w))
    for z in features:
        cov += np.outer(z - mean, z - mean)
    cov /= k - 1
    return cov + shrinkage * np.trace(cov) / w * np.eye(w)


def oracle_nll_term(vectors, labels, protos):
    """Per-sample mean of d(z, p_y) + log sum exp(-d(z, p_n'))."""
    total = 0.0
    for z, y in zip(vectors, labels):
        d = np.array([np.sum((z - p) ** 2) for p in protos])
        total += d[y] + np.log(np.sum(np.exp(-d)))
    return total / len(vectors)


def oracle_entropy(vectors, protos):
    total = 0.0
    for z in vectors:
        d = np.array([np.sum((z - p) ** 2) for p in protos])
        logits = -d
        logits -= logits.max()
        p = np.exp(logits) / np.exp(logits).sum()
        total += -np.sum(p * np.log(p))
    return total / len(vectors)


def make_aug(vectors, labels):
    return AugmentedFeatureSet(
        vectors=np.asarray(vectors, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.intp),
        seed_key=(),
        epoch=0,
    )


class TestCovariance:
    def test_one_shot_identity(self):
        cov = estimate_covariance(np.array([[3.0, -1.0, 2.0]]))
        assert np.array_equal(cov, np.eye(3))

    def test_hand_example_divisor_k_minus_1(self):
        feats = np.array([[0.0, 0.0], [2.0, 0.0]])
        lam = 1e-3 * 2.0 / 2.0  # trace([[2,0],[0,0]]) / w
        want = np.array([[2.0, 0.0], [0.0, 0.0]]) + lam * np.eye(2)
        assert np.allclose(estimate_covariance(feats), want, atol=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(7, 5))
        got = estimate_covariance(feats)
        want = oracle_covariance(feats)
        assert np.max(np.abs(got - want)) < 1e-10 * max(1.0, np.abs(want).max())

    def test_symmetric_psd(self):
        rng = np.random.default_rng(5)
        for k in (2, 3, 10):
            feats = rng.normal(size=(k, 6))
            cov = estimate_covariance(feats)
            assert np.allclose(cov, cov.T, atol=1e-14)
            assert np.linalg.eigvalsh(cov).min() >= -1e-10

    def test_class_covariances_roots(self):
        rng = np.random.default_rng(7)
        feats = rng.normal(size=(12, 4))
        labels = np.repeat(np.arange(4), 3)
        covs = estimate_class_covariances(feats, labels, 4)
        for c in range(4):
            root = covs.roots[c]
            assert np.allclose(root @ root, covs.matrices[c], atol=1e-10)
            assert np.allclose(root, root.T, atol=1e-12)


class TestAugment:
    def test_zero_k_empty(self):
        out = augment(np.ones((4, 3)), np.zeros(4, dtype=int), None, 0, seed=1)
        assert out.vectors.shape == (0, 3)

    def test_zero_covariance_exact_copies(self):
        # Identical supports: trace-proportional shrinkage keeps Sigma = 0.
        feats = np.tile(np.array([[1.0, -2.0]]), (3, 1))
        labels = np.zeros(3, dtype=int)
        covs = estimate_class_covariances(feats, labels, 1)
        out = augment(feats, labels, covs, 2, seed=2)
        assert np.array_equal(out.vectors, np.repeat(feats, 2, axis=0))

    def test_statistics_match_target_gaussian(self):
        """10k draws: mean within 3 sigma/sqrt(n) per coordinate, covariance
        within 10% Frobenius."""
        rng = np.random.default_rng(11)
        w = 4
        a = rng.normal(size=(w, w))
        target_cov = a @ a.T + 0.5 * np.eye(w)
        root_feats = rng.normal(size=(40, w)) @ np.linalg.cholesky(target_cov).T
        labels = np.zeros(40, dtype=int)
        covs = estimate_class_covariances(root_feats, labels, 1, shrinkage=0.0)
        z = root_feats[0]
        n_draws = 10_000
        out = augment(z[None, :], np.zeros(1, dtype=int), covs, n_draws, seed=13)
        draws = out.vectors
        sigma = np.sqrt(np.diag(covs.matrices[0]))
        assert np.all(np.abs(draws.mean(axis=0) - z) <= 3.0 * sigma / np.sqrt(n_draws))
        emp_cov = np.cov(draws, rowvar=False, ddof=1)
        rel = np.linalg.norm(emp_cov - covs.matrices[0]) / np.linalg.norm(covs.matrices[0])
        assert rel < 0.10

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(17)
        feats = rng.normal(size=(6, 3))
        labels = np.repeat(np.arange(2), 3)
        covs = estimate_class_covariances(feats, labels, 2)
        a = augment(feats, labels, covs, 3, seed=9, epoch=2)
        b = augment(feats, labels, covs, 3, seed=9, epoch=2)
        c = augment(feats, labels, covs, 3, seed=9, epoch=3)
        assert np.array_equal(a.vectors, b.vectors)
        assert not np.array_equal(a.vectors, c.vectors)

    def test_counts(self):
        feats = np.zeros((8, 3))
        labels = np.repeat(np.arange(4), 2)
        covs = estimate_class_covariances(feats, labels, 4)
        out = augment(feats, labels, covs, 3, seed=1)
        assert out.vectors.shape == (24, 3)
        assert np.all(np.bincount(out.labels) == 6)


class TestAnchoringLosses:
    def test_t2s_support_at_prototype(self):
        protos = Tensor(np.array([[0.0, 0.0], [100.0, 0.0]]))
        sup = Tensor(np.array([[0.0, 0.0], [100.0, 0.0]]))
        loss = anchoring_loss_t2s(sup, np.array([0, 1]), make_aug(np.zeros((0, 2)), []), protos)
        assert loss.item() < 1e-9

    def test_t2s_matches_direct_formula(self):
        rng = np.random.default_rng(19)
        sup = rng.normal(size=(8, 5))
        sup_y = np.repeat(np.arange(4), 2)
        aug_v = rng.normal(size=(24, 5))
        aug_y = np.repeat(np.arange(4), 6)
        protos = rng.normal(size=(4, 5))
        got = anchoring_loss_t2s(Tensor(sup), sup_y, make_aug(aug_v, aug_y), Tensor(protos)).item()
        want = oracle_nll_term(sup, sup_y, protos) + oracle_nll_term(aug_v, aug_y, protos)
        assert abs(got - want) < 1e-10 * max(1.0, abs(want))

    def test_t2s_two_class_equidistant_log2(self):
        protos = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        sup = Tensor(np.zeros((2, 2)))
        loss = anchoring_loss_t2s(sup, np.array([0, 1]), make_aug(np.zeros((0, 2)), []), protos)
        # d(z, p) = 1 for both classes: term = 1 + log(2 e^-1) = log 2.
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_t2s_zero_k_augment_drops_second_term(self):
        rng = np.random.default_rng(23)
        sup = rng.normal(size=(4, 3))
        sup_y = np.arange(4) % 2
        protos = rng.normal(size=(2, 3))
        got = anchoring_loss_t2s(Tensor(sup), sup_y, make_aug(np.zeros((0, 3)), []), Tensor(protos)).item()
        assert abs(got - oracle_nll_term(sup, sup_y, protos)) < 1e-12

    def test_s2t_matches_direct_formula(self):
        rng = np.random.default_rng(29)
        src = rng.normal(size=(40, 6))
        src_y = np.repeat(np.arange(4), 10)
        protos = rng.normal(size=(4, 6))
        got = anchoring_loss_s2t(Tensor(src), src_y, Tensor(protos)).item()
        want = oracle_nll_term(src, src_y, protos)
        assert abs(got - want) < 1e-10 * max(1.0, abs(want))

    def test_s2t_class_relabeling_invariance(self):
        rng = np.random.default_rng(31)
        src = rng.normal(size=(12, 4))
        src_y = np.repeat(np.arange(4), 3)
        protos = rng.normal(size=(4, 4))
        perm = np.array([2, 0, 3, 1])
        base = anchoring_loss_s2t(Tensor(src), src_y, Tensor(protos)).item()
        relabeled = anchoring_loss_s2t(Tensor(src), perm[src_y], Tensor(protos[np.argsort(perm)])).item()
        assert abs(base - relabeled) < 1e-12

    def test_anchoring_terms_nonnegative(self):
        rng = np.random.default_rng(37)
        for _ in range(20):
            z = rng.normal(size=(6, 3)) * rng.uniform(0.1, 5)
            y = rng.integers(0, 3, size=6)
            y[:3] = np.arange(3)
            p = rng.normal(size=(3, 3))
            assert anchoring_loss_s2t(Tensor(z), y, Tensor(p)).item() >= 0.0


class TestEntropy:
    def test_one_hot_near_zero(self):
        protos = Tensor(np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]]))
        feats = Tensor(np.array([[0.0, 0.0]]))
        assert entropy_reg(feats, protos).item() < 1e-9

    def test_equidistant_log4(self):
        protos = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
        feats = Tensor(np.zeros((3, 2)))
        assert entropy_reg(feats, protos).item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(41)
        feats = rng.normal(size=(10, 4))
        protos = rng.normal(size=(4, 4))
        got = entropy_reg(Tensor(feats), Tensor(protos)).item()
        want = oracle_entropy(feats, protos)
        assert abs(got - want) < 1e-10

    def test_bounded_by_log_n(self):
        rng = np.random.default_rng(43)
        for _ in range(30):
            n = int(rng.integers(2, 6))
            feats = rng.normal(size=(5, 3)) * rng.uniform(0.01, 10)
            protos = rng.normal(size=(n, 3)) * rng.uniform(0.01, 10)
            h = entropy_reg(Tensor(feats), Tensor(protos)).item()
            assert -1e-12 <= h <= np.log(n) + 1e-12


class TestTargetPrototypes:
    def test_combines_support_and_augmented_means(self):
        sup = np.array([[0.0, 0.0], [2.0, 2.0]])
        sup_y = np.array([0, 1])
        aug_v = np.array([[1.0, 1.0], [1.0, 1.0], [3.0, 3.0], [5.0, 5.0]])
        aug_y = np.array([0, 0, 1, 1])
        protos = target_prototypes(Tensor(sup), sup_y, make_aug(aug_v, aug_y), 2)
        # Class 0: mean of {(0,0), (1,1), (1,1)} = (2/3, 2/3).
        assert np.allclose(protos.data[0], [2.0 / 3.0, 2.0 / 3.0], atol=1e-14)
        assert np.allclose(protos.data[1], [(2 + 3 + 5) / 3.0, (2 + 3 + 5) / 3.0], atol=1e-14)

    def test_no_augmentation_reduces_to_support_means(self):
        rng = np.random.default_rng(47)
        sup = rng.normal(size=(8, 3))
        sup_y = np.repeat(np.arange(4), 2)
        protos = target_prototypes(Tensor(sup), sup_y, make_aug(np.zeros((0, 3)), []), 4)
        assert np.allclose(protos.data, compute_prototypes(Tensor(sup), sup_y, 4).data, atol=1e-15)

    def test_gradient_flows_through_support_only(self):
        rng = np.random.default_rng(53)
        sup = rng.normal(size=(4, 3))
        sup_y = np.array([0, 0, 1, 1])
        aug_v = rng.normal(size=(8, 3))
        aug_y = np.repeat([0, 1], 4)

        def build(ts):
            protos = target_prototypes(ts[0], sup_y, make_aug(aug_v, aug_y), 2)
            return ops.sum_all(ops.mul(protos, protos))

        assert fd_grad_check(build, [sup]) < 1e-6

    def test_augmented_features_carry_no_gradient(self):
        """The z-tilde constants appear in the graph as untracked leaves."""
        rng = np.random.default_rng(59)
        sup = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        sup_y = np.array([0, 0, 1, 1])
        aug = make_aug(rng.normal(size=(4, 3)), np.array([0, 0, 1, 1]))
        with Graph() as g:
            protos = target_prototypes(sup, sup_y, aug, 2)
            loss = ops.sum_all(ops.mul(protos, protos))
            backward(loss)
        aug_ids = {id(node_input) for node in g.nodes for node_input in node.inputs
                   if node_input.node_id is None and not node_input.requires_grad
                   and node_input.data.shape == (4, 3)}
        assert sup.grad is not None
        for node in g.nodes:
            for t in node.inputs:
                if id(t) in aug_ids:
                    assert t.grad is None


class TestSourceBatch:
    def test_class_balanced(self):
        rng = np.random.default_rng(61)
        pool_x = rng.normal(size=(80, 3, 8))
        pool_y = np.repeat(np.arange(4), 20)
        x, y = sample_source_batch(pool_x, pool_y, 40, 4, seed=3)
        assert x.shape[0] == 40
        assert np.all(np.bincount(y) == 10)

    def test_deterministic(self):
        rng = np.random.default_rng(67)
        pool_x = rng.normal(size=(80, 3, 8))
        pool_y = np.repeat(np.arange(4), 20)
        a, _ = sample_source_batch(pool_x, pool_y, 40, 4, seed=5)
        b, _ = sample_source_batch(pool_x, pool_y, 40, 4, seed=5)
        assert np.array_equal(a, b)

    def test_uneven_batch_rejected(self):
        with pytest.raises(ArgumentError):
            sample_source_batch(np.zeros((8, 3, 4)), np.repeat(np.arange(4), 2), 30, 4, seed=0)


class TestTotalLossGradients:
    def test_total_loss_gradcheck_on_embeddings(self):
        """Gradients of L_t w.r.t. the embedding inputs pass FD checks."""
        rng = np.random.default_rng(71)
        sup = rng.normal(size=(4, 3))
        sup_y = np.array([0, 1, 0, 1])
        src = rng.normal(size=(6, 3))
        src_y = np.array([0, 0, 0, 1, 1, 1])
        aug_v = rng.normal(size=(8, 3))
        aug_y = np.repeat([0, 1], 4)

        def build(ts):
            sup_t, src_t = ts
            aug = make_aug(aug_v, aug_y)
            p_s = compute_prototypes(src_t, src_y, 2)
            l1 = anchoring_loss_t2s(sup_t, sup_y, aug, p_s)
            e1 = entropy_reg(ops.concat0([sup_t, Tensor(aug_v)]), p_s)
            p_t = target_prototypes(sup_t, sup_y, aug, 2)
            l2 = anchoring_loss_s2t(src_t, src_y, p_t)
            e2 = entropy_reg(src_t, p_t)
            return ops.add(ops.add(l1, e1), ops.add(l2, e2))

        assert fd_grad_check(build, [sup, src]) < 1e-5
