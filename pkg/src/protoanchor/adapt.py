"""Test-time twin-domain adaptation.

Per adaptation epoch: embed the source batch and the target support set,
compute source prototypes from the source batch, estimate per-class
covariances from the current support embeddings, draw covariance-guided
augmented features (constants w.r.t. gradients), build target prototypes
from support embeddings plus augmented features, and minimize

    L_t = (L_anc1 + L_ent1) + (L_anc2 + L_ent2)

with one Adam step. The anchoring terms pull target features toward the
source prototypes and source features toward the target prototypes; the
entropy terms sharpen the corresponding posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AdaptationError, ArgumentError, NumericError
from .episodic import class_posteriors, compute_prototypes, distance_matrix
from .model import ModelState, forward
from .seeding import rng_for, seed_for
from .tensorcore import Graph, Tensor, adam_step, backward, collect_grads, ops, zero_grads

DEFAULT_SHRINKAGE = 1e-3


@dataclass
class ClassCovariance:
    """Per-class feature covariances after shrinkage, plus their PSD roots."""

    matrices: np.ndarray  # [N, w, w]
    roots: np.ndarray  # [N, w, w] symmetric PSD square roots
    shrinkage: float


@dataclass
class AugmentedFeatureSet:
    """Gaussian-perturbed copies of the support features, K_A per feature."""

    vectors: np.ndarray  # [N*K*K_A, w]
    labels: np.ndarray  # [N*K*K_A]
    seed_key: tuple
    epoch: int


@dataclass
class AdaptationReport:
    """Per-task record of the adaptation run."""

    pre_predictions: list[int] = field(default_factory=list)
    post_predictions: list[int] = field(default_factory=list)
    epoch_losses: list[dict[str, float]] = field(default_factory=list)
    final_prototypes: np.ndarray | None = None
    pre_accuracy: float | None = None
    query_accuracy: float | None = None
    adapted: bool = False
    fallback_reason: str | None = None

    def to_record(self) -> dict:
        return {
            "pre_predictions": [int(p) for p in self.pre_predictions],
            "post_predictions": [int(p) for p in self.post_predictions],
            "epoch_losses": self.epoch_losses,
            "final_prototypes": None
            if self.final_prototypes is None
            else [[float(v) for v in row] for row in self.final_prototypes],
            "pre_accuracy": self.pre_accuracy,
            "query_accuracy": self.query_accuracy,
            "adapted": self.adapted,
            "fallback_reason": self.fallback_reason,
        }


def estimate_covariance(features: np.ndarray, shrinkage: float = DEFAULT_SHRINKAGE) -> np.ndarray:
    """Sample covariance (divisor K-1) plus lambda*I, lambda = shrinkage * trace/w.

    A single feature (1-shot) yields the identity matrix exactly.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ArgumentError(f"expected [K, w] features with K >= 1, got {features.shape}")
    k, w = features.shape
    if k == 1:
        return np.eye(w)
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered / (k - 1)
    lam = shrinkage * np.trace(cov) / w
    return cov + lam * np.eye(w)


def _psd_root(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clamp to zero."""
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < -1e-10 * max(1.0, abs(eigvals.max())):
        raise NumericError(f"covariance not PSD after shrinkage (min eigenvalue {eigvals.min():.3e})")
    clamped = np.sqrt(np.maximum(eigvals, 0.0))
    return (eigvecs * clamped) @ eigvecs.T


def estimate_class_covariances(
    features: np.ndarray, labels: np.ndarray, n_way: int, shrinkage: float = DEFAULT_SHRINKAGE
) -> ClassCovariance:
    mats = []
    roots = []
    for c in range(n_way):
        cov = estimate_covariance(features[labels == c], shrinkage)
        mats.append(cov)
        roots.append(_psd_root(cov))
    return ClassCovariance(matrices=np.stack(mats), roots=np.stack(roots), shrinkage=shrinkage)


def augment(
    features: np.ndarray,
    labels: np.ndarray,
    covariances: ClassCovariance,
    k_augment: int,
    seed,
    epoch: int = 0,
) -> AugmentedFeatureSet:
    """Draw K_A perturbed copies z + L xi (xi standard normal) per feature."""
    if k_augment < 0:
        raise ArgumentError(f"k_augment must be >= 0, got {k_augment}")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    w = features.shape[1]
    if k_augment == 0:
        return AugmentedFeatureSet(
            vectors=np.zeros((0, w)), labels=np.zeros(0, dtype=np.intp), seed_key=tuple(), epoch=epoch
        )
    rng = rng_for(seed, "augment", epoch)
    out = []
    out_labels = []
    for z, label in zip(features, labels):
        xi = rng.standard_normal(size=(k_augment, w))
        out.append(z[None, :] + xi @ covariances.roots[label].T)
        out_labels.extend([int(label)] * k_augment)
    return AugmentedFeatureSet(
        vectors=np.concatenate(out), labels=np.asarray(out_labels, dtype=np.intp), seed_key=tuple(), epoch=epoch
    )


def _proto_nll(features, labels, prototypes, distance: str) -> Tensor:
    """Mean over rows of d(z, p_y) + log sum_n' exp(-d(z, p_n'))."""
    d = distance_matrix(features, prototypes, distance)
    true_d = ops.take_per_row(d, np.asarray(labels, dtype=np.intp))
    lse = ops.logsumexp(ops.neg(d), axis=1)
    return ops.mean_all(ops.add(true_d, lse))


def anchoring_loss_t2s(
    support_embs: Tensor,
    support_labels: np.ndarray,
    aug: AugmentedFeatureSet,
    source_protos: Tensor,
    distance: str = "squared_euclidean",
) -> Tensor:
    """Target-to-source anchoring: support and augmented features against
    the source prototypes, with 1/(N K) and 1/(N K K_A) normalizations."""
    loss = _proto_nll(support_embs, support_labels, source_protos, distance)
    if aug.vectors.shape[0] > 0:
        loss = ops.add(loss, _proto_nll(Tensor(aug.vectors), aug.labels, source_protos, distance))
    return loss


def entropy_reg(features, prototypes, distance: str = "squared_euclidean") -> Tensor:
    """Mean Shannon entropy of the distance-softmax posteriors."""
    d = distance_matrix(features, prototypes, distance)
    return ops.mean_all(ops.softmax_entropy(ops.neg(d), axis=1))


def anchoring_loss_s2t(
    source_embs: Tensor,
    source_labels: np.ndarray,
    target_protos: Tensor,
    distance: str = "squared_euclidean",
) -> Tensor:
    """Source-to-target anchoring, normalized by the source batch size."""
    return _proto_nll(source_embs, source_labels, target_protos, distance)


def target_prototypes(
    support_embs: Tensor, support_labels: np.ndarray, aug: AugmentedFeatureSet, n_way: int
) -> Tensor:
    """Class means over support embeddings plus augmented features.

    The augmented vectors are constants, so gradients flow through the
    support side only: p_t = (m_support + K_A * m_aug) / (1 + K_A).
    """
    m_support = compute_prototypes(support_embs, support_labels, n_way)
    n_aug = aug.vectors.shape[0]
    if n_aug == 0:
        return m_support
    k_augment = n_aug // len(support_labels)
    m_aug = ops.class_means(Tensor(aug.vectors), aug.labels, n_way)
    return ops.scale(
        ops.add(m_support, ops.scale(m_aug, float(k_augment))),
        1.0 / (1.0 + k_augment),
    )


def _class_balanced_indices(labels: np.ndarray, per_class: int, n_way: int, rng) -> np.ndarray:
    picks = []
    for c in range(n_way):
        idx = np.nonzero(labels == c)[0]
        if idx.size < per_class:
            raise ArgumentError(f"class {c} has {idx.size} source samples, need {per_class}")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    return np.concatenate(picks)


def sample_source_batch(
    pool_x: np.ndarray, pool_y: np.ndarray, batch_size: int, n_way: int, seed
) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced source batch, drawn once per task and fixed across epochs."""
    if batch_size % n_way != 0:
        raise ArgumentError(f"source batch {batch_size} must divide evenly over {n_way} classes")
    rng = rng_for(seed, "source-batch")
    idx = _class_balanced_indices(pool_y, batch_size // n_way, n_way, rng)
    return pool_x[idx], pool_y[idx]


def infer(
    state: ModelState,
    support_x: np.ndarray,
    support_y: np.ndarray,
    query_x: np.ndarray,
    n_way: int,
    k_augment: int = 0,
    seed=0,
    shrinkage: float = DEFAULT_SHRINKAGE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Query posteriors against target prototypes built from the support
    embeddings plus (optionally) regenerated augmented features.

    With ``k_augment=0`` this is exactly ProtoNet inference with target
    support prototypes. Returns (predictions, posteriors, prototypes);
    argmax ties resolve to the lowest class index.
    """
    sup_emb = forward(state, support_x)
    qry_emb = forward(state, query_x)
    if k_augment > 0:
        covs = estimate_class_covariances(sup_emb.data, support_y, n_way, shrinkage)
        aug = augment(sup_emb.data, support_y, covs, k_augment, seed=seed_for(seed, "infer-augment"))
    else:
        aug = augment(sup_emb.data, support_y, None, 0, seed=0)
    protos = target_prototypes(sup_emb, support_y, aug, n_way)
    post = class_posteriors(qry_emb, protos, state.config.distance)
    return post.argmax(axis=1), post, protos.data


def adapt(
    state: ModelState,
    support_x: np.ndarray,
    support_y: np.ndarray,
    source_x: np.ndarray,
    source_y: np.ndarray,
    n_way: int,
    epochs: int = 10,
    k_augment: int = 3,
    lr: float = 1e-3,
    seed=0,
    shrinkage: float = DEFAULT_SHRINKAGE,
    freeze_augment: bool = False,
    query_x: np.ndarray | None = None,
    query_y: np.ndarray | None = None,
    task_id: str | None = None,
) -> tuple[ModelState, AdaptationReport]:
    """Run test-time adaptation on a clone of ``state``.

    The input state is never mutated. Augmented features are regenerated
    every epoch from the current support embeddings (``freeze_augment``
    reuses the epoch-0 vectors instead). On a numeric failure the report
    falls back to pre-adaptation predictions instead of raising.
    """
    if not np.array_equal(np.unique(support_y), np.arange(n_way)):
        raise ArgumentError("support must cover every class")
    report = AdaptationReport()
    work = state.clone(fresh_adam=True)
    distance = state.config.distance

    if query_x is not None:
        pre_preds, pre_post, _ = infer(state, support_x, support_y, query_x, n_way)
        report.pre_predictions = pre_preds.tolist()
        if query_y is not None:
            report.pre_accuracy = float(np.mean(pre_preds == query_y))

    batch = np.concatenate([source_x, support_x])
    idx_src = np.arange(source_x.shape[0])
    idx_sup = np.arange(source_x.shape[0], batch.shape[0])
    frozen: AugmentedFeatureSet | None = None

    try:
        for epoch in range(epochs):
            with Graph():
                emb = forward(work, batch)
                src_emb = ops.gather0(emb, idx_src)
                sup_emb = ops.gather0(emb, idx_sup)
                p_s = compute_prototypes(src_emb, source_y, n_way)

                if freeze_augment and frozen is not None:
                    aug = frozen
                elif k_augment > 0:
                    covs = estimate_class_covariances(sup_emb.data, support_y, n_way, shrinkage)
                    aug = augment(sup_emb.data, support_y, covs, k_augment, seed=seed, epoch=epoch)
                else:
                    aug = augment(sup_emb.data, support_y, None, 0, seed=0, epoch=epoch)
                if freeze_augment and frozen is None:
                    frozen = aug

                l_anc1 = anchoring_loss_t2s(sup_emb, support_y, aug, p_s, distance)
                union = ops.concat0([sup_emb, Tensor(aug.vectors)]) if aug.vectors.size else sup_emb
                l_ent1 = entropy_reg(union, p_s, distance)

                p_t = target_prototypes(sup_emb, support_y, aug, n_way)
                l_anc2 = anchoring_loss_s2t(src_emb, source_y, p_t, distance)
                l_ent2 = entropy_reg(src_emb, p_t, distance)

                total = ops.add(ops.add(l_anc1, l_ent1), ops.add(l_anc2, l_ent2))
                values = {
                    "anc1": l_anc1.item(),
                    "ent1": l_ent1.item(),
                    "anc2": l_anc2.item(),
                    "ent2": l_ent2.item(),
                    "total": total.item(),
                }
                if not np.isfinite(values["total"]):
                    raise AdaptationError("non-finite adaptation loss", epoch=epoch, task_id=task_id)
                zero_grads(work.params)
                backward(total)
                adam_step(work.params, collect_grads(work.params), work.adam, lr)
            report.epoch_losses.append(values)
    except (AdaptationError, NumericError) as exc:
        report.fallback_reason = str(exc)
        report.adapted = False
        report.post_predictions = list(report.pre_predictions)
        report.query_accuracy = report.pre_accuracy
        return state.clone(), report

    report.adapted = True
    if query_x is not None:
        post_preds, _, protos = infer(
            work, support_x, support_y, query_x, n_way, k_augment=k_augment, seed=seed, shrinkage=shrinkage
        )
        report.post_predictions = post_preds.tolist()
        report.final_prototypes = protos
        if query_y is not None:
            report.query_accuracy = float(np.mean(post_preds == query_y))
    return work, report
