"""Episodic meta-training: task sampling, prototypes, distance-softmax
classification, and the episode loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ArgumentError, ConfigurationError, TrainingError
from .model import ModelConfig, ModelState, forward, init_state
from .seeding import rng_for, seed_for
from .tensorcore import Graph, Tensor, adam_step, as_tensor, backward, collect_grads, ops, zero_grads
from .twinsim import Label, SignalSample


@dataclass
class EpisodeTask:
    """One N-way K-shot task with disjoint support and query sets."""

    support_x: np.ndarray  # [N*K, 3, L]
    support_y: np.ndarray  # [N*K]
    query_x: np.ndarray  # [N*M_q, 3, L]
    query_y: np.ndarray
    n_way: int
    k_shot: int
    queries_per_class: int

    def __post_init__(self):
        for y, per_class in ((self.support_y, self.k_shot), (self.query_y, self.queries_per_class)):
            counts = np.bincount(y, minlength=self.n_way)
            if not np.all(counts == per_class):
                raise ArgumentError(f"every class must appear exactly {per_class} times, got {counts}")


def sample_episode(
    pool: Mapping[Label, np.ndarray] | Mapping[Label, list[SignalSample]],
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    seed,
) -> EpisodeTask:
    """Uniform per-class sampling without replacement, deterministic per seed."""
    if n_way < 1 or k_shot < 1 or queries_per_class < 1:
        raise ArgumentError("n_way, k_shot and queries_per_class must be positive")
    labels = sorted(pool.keys())[:n_way]
    if len(labels) < n_way:
        raise ConfigurationError(f"pool covers {len(labels)} classes, need {n_way}")
    rng = rng_for(seed)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for ci, label in enumerate(labels):
        group = pool[label]
        arr = group if isinstance(group, np.ndarray) else np.stack([s.phases for s in group])
        need = k_shot + queries_per_class
        if arr.shape[0] < need:
            raise ConfigurationError(
                f"class {getattr(label, 'name', label)} has {arr.shape[0]} samples, need {need}"
            )
        chosen = rng.choice(arr.shape[0], size=need, replace=False)
        sup_x.append(arr[chosen[:k_shot]])
        qry_x.append(arr[chosen[k_shot:]])
        sup_y.extend([ci] * k_shot)
        qry_y.extend([ci] * queries_per_class)
    return EpisodeTask(
        support_x=np.concatenate(sup_x),
        support_y=np.asarray(sup_y),
        query_x=np.concatenate(qry_x),
        query_y=np.asarray(qry_y),
        n_way=n_way,
        k_shot=k_shot,
        queries_per_class=queries_per_class,
    )


def compute_prototypes(embeddings, labels, n_way: int) -> Tensor:
    """Per-class mean of the support embeddings (class order = label order)."""
    return ops.class_means(as_tensor(embeddings), labels, n_way)


def distance_matrix(embeddings, prototypes, distance: str = "squared_euclidean") -> Tensor:
    d = ops.pairwise_sq_dists(as_tensor(embeddings), as_tensor(prototypes))
    if distance == "euclidean":
        d = ops.sqrt(d)
    elif distance != "squared_euclidean":
        raise ArgumentError(f"unknown distance '{distance}'")
    return d


def class_posteriors(query_emb, prototypes, distance: str = "squared_euclidean") -> np.ndarray:
    """Softmax over negative prototype distances; rows sum to one."""
    d = distance_matrix(query_emb, prototypes, distance).data
    logits = -d
    logits = logits - logits.max(axis=1, keepdims=True)
    z = np.exp(logits)
    return z / z.sum(axis=1, keepdims=True)


def episode_loss(query_embs, labels, prototypes, distance: str = "squared_euclidean") -> Tensor:
    """Mean over queries of d(f(x), p_y) + log sum_n' exp(-d(f(x), p_n')).

    Algebraically the mean negative log posterior of the true class.
    """
    d = distance_matrix(query_embs, prototypes, distance)
    true_dist = ops.take_per_row(d, np.asarray(labels, dtype=np.intp))
    lse = ops.logsumexp(ops.neg(d), axis=1)
    return ops.mean_all(ops.add(true_dist, lse))


def meta_train(
    source_pool: Mapping[Label, np.ndarray],
    config: ModelConfig,
    n_way: int,
    k_shot: int,
    queries_per_class: int = 15,
    iterations: int = 200,
    lr: float = 1e-3,
    seed=0,
    on_iteration: Callable[[int, float], None] | None = None,
) -> tuple[ModelState, list[tuple[int, float]]]:
    """Episodic training: one Adam step per episode; deterministic per seed.

    Returns the trained state plus the (iteration, loss) trace.
    """
    if iterations < 1:
        raise ArgumentError("iterations must be >= 1")
    state = init_state(config, seed=seed_for(seed, "init"))
    trace: list[tuple[int, float]] = []
    n_support = n_way * k_shot
    for it in range(iterations):
        task = sample_episode(source_pool, n_way, k_shot, queries_per_class, seed=seed_for(seed, "episode", it))
        batch = np.concatenate([task.support_x, task.query_x])
        with Graph():
            emb = forward(state, batch)
            sup = ops.gather0(emb, np.arange(n_support))
            qry = ops.gather0(emb, np.arange(n_support, batch.shape[0]))
            protos = compute_prototypes(sup, task.support_y, n_way)
            loss = episode_loss(qry, task.query_y, protos, config.distance)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at iteration {it}", iteration=it)
            zero_grads(state.params)
            backward(loss)
            adam_step(state.params, collect_grads(state.params), state.adam, lr)
        trace.append((it, value))
        if on_iteration is not None:
            on_iteration(it, value)
    return state, trace


def predict(
    state: ModelState,
    support_x: np.ndarray,
    support_y: np.ndarray,
    query_x: np.ndarray,
    n_way: int,
) -> tuple[np.ndarray, np.ndarray]:
    """ProtoNet inference: support prototypes, then posterior argmax.

    Ties resolve to the lowest class index.
    """
    sup_emb = forward(state, support_x)
    qry_emb = forward(state, query_x)
    protos = compute_prototypes(sup_emb, support_y, n_way)
    post = class_posteriors(qry_emb, protos, state.config.distance)
    return post.argmax(axis=1), post
