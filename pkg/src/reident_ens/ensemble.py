"""The five ensemble transformations over per-sub-model embeddings.

Every ``fit_*`` function takes embeddings as a list with one ``(n, d_m)``
matrix per sub-model, in a fixed sub-model order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import TrainingError, ValidationError
from .evaluation import rank_gallery, squared_distances
from .neural import (EmbeddingModel, TrainConfig, TripletSampler, dense_spec, embed_all,
                     make_optimizer, train_siamese)

log = logging.getLogger(__name__)

KINDS = ("concatenation", "nn_triplet", "weighted_triplet", "weighted_accuracy", "majority_vote")
STD_FLOOR = 1e-8
SEARCH_FACTORS = (0.5, 0.8, 1.25, 2.0)
SEARCH_RANGE = (1e-2, 1e1)


@dataclass
class ZScoreStats:
    means: List[np.ndarray]
    stds: List[np.ndarray]
    epsilon: float = STD_FLOOR

    @property
    def dims(self) -> List[int]:
        return [m.shape[0] for m in self.means]

    def normalize(self, per_model) -> List[np.ndarray]:
        if len(per_model) != len(self.means):
            raise ValidationError(f"expected {len(self.means)} sub-model embeddings, "
                                  f"got {len(per_model)}")
        out = []
        for i, (x, mu, sd) in enumerate(zip(per_model, self.means, self.stds)):
            x = np.asarray(x, dtype=np.float64)
            if x.shape[-1] != mu.shape[0]:
                raise ValidationError(f"sub-model {i}: dims {x.shape[-1]} != fitted {mu.shape[0]}")
            out.append((x - mu) / sd)
        return out


def fit_zscore(train_embeddings: Sequence[np.ndarray], epsilon: float = STD_FLOOR) -> ZScoreStats:
    """Per-dimension mean and population std of the training rows, std floored."""
    means, stds = [], []
    for i, x in enumerate(train_embeddings):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValidationError(f"sub-model {i}: z-score needs >= 2 training rows")
        means.append(x.mean(axis=0))
        stds.append(np.maximum(x.std(axis=0), epsilon))
    if len({x.shape[0] for x in train_embeddings}) > 1:
        raise ValidationError("sub-model embeddings cover different numbers of rows")
    return ZScoreStats(means, stds, epsilon)


def apply_concatenation(stats: ZScoreStats, per_model_embeddings) -> np.ndarray:
    """Z-score each sub-model's embedding and concatenate in sub-model order.

    Works for one sample (1-D inputs) or a batch (2-D inputs).
    """
    return np.concatenate(stats.normalize(per_model_embeddings), axis=-1)


@dataclass
class WeightVector:
    alphas: np.ndarray
    objective: Optional[float] = None
    baseline_objective: Optional[float] = None
    log: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if np.any(self.alphas < 0) or not np.any(self.alphas > 0):
            raise ValidationError(f"weights must be >= 0 with one > 0, got {self.alphas}")


def apply_weighted(weights: WeightVector, normalized: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate ``alpha_m * z_m`` over sub-models."""
    if len(normalized) != len(weights.alphas):
        raise ValidationError("weight count does not match sub-model count")
    return np.concatenate([a * z for a, z in zip(weights.alphas, normalized)], axis=-1)


def _weighted_triplet_grad(alphas, sq_ab, sq_ac, margin):
    # sq_* are (batch, m) per-sub-model squared distances
    a2 = alphas ** 2
    d_ab = np.sqrt(sq_ab @ a2)
    d_ac = np.sqrt(sq_ac @ a2)
    hinge = d_ab - d_ac + margin
    loss = float(np.maximum(hinge, 0.0).mean())
    active = (hinge > 0) / len(hinge)
    with np.errstate(invalid="ignore", divide="ignore"):
        g_ab = np.where(d_ab[:, None] > 0, sq_ab / d_ab[:, None], 0.0)
        g_ac = np.where(d_ac[:, None] > 0, sq_ac / d_ac[:, None], 0.0)
    grad = alphas * (active @ (g_ab - g_ac))
    return loss, grad


def fit_weighted_triplet(train_embeddings: Sequence[np.ndarray], labels,
                         cfg: TrainConfig) -> WeightVector:
    """Learn one non-negative weight per sub-model by gradient descent on the
    triplet loss of the weighted concatenation.

    The embeddings should already be z-scored. Weights start at 1 and are
    clipped at 0 after every step.
    """
    mats = [np.asarray(x, dtype=np.float64) for x in train_embeddings]
    labels = np.asarray(labels)
    sampler = TripletSampler(labels)
    rng = np.random.default_rng([cfg.seed, 2])
    alphas = np.ones(len(mats))
    opt = make_optimizer([alphas], cfg)
    n_batches = max(1, math.ceil(len(labels) / cfg.batch_size))
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in range(n_batches):
            a, p, c = sampler.draw(cfg.batch_size, rng)
            sq_ab = np.stack([((x[a] - x[p]) ** 2).sum(axis=1) for x in mats], axis=1)
            sq_ac = np.stack([((x[a] - x[c]) ** 2).sum(axis=1) for x in mats], axis=1)
            loss, grad = _weighted_triplet_grad(alphas, sq_ab, sq_ac, cfg.margin)
            if not math.isfinite(loss):
                raise TrainingError(f"weighted triplet: non-finite loss at epoch {epoch}, batch {b}")
            previous = alphas.copy()
            opt.step([alphas], [grad])
            np.maximum(alphas, 0.0, out=alphas)
            if not np.any(alphas > 0):
                alphas[:] = previous
            total += loss
        history.append(total / n_batches)
    return WeightVector(alphas.copy(), log=history)


def internal_query_gallery(labels, seed: int):
    """One seeded-random row per subject (with >= 2 rows) as query; everything else gallery."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    query = []
    for subject in dict.fromkeys(labels.tolist()):
        rows = np.flatnonzero(labels == subject)
        if len(rows) >= 2:
            query.append(rows[rng.integers(len(rows))])
    query = np.array(query, dtype=np.intp)
    mask = np.ones(len(labels), dtype=bool)
    mask[query] = False
    return query, np.flatnonzero(mask)


class _Rank1Objective:
    def __init__(self, mats, labels, seed):
        labels = np.asarray(labels)
        q, g = internal_query_gallery(labels, seed)
        if len(q) < 2:
            raise ValidationError("weighted accuracy needs >= 2 subjects with >= 2 views")
        self.dist = np.stack([squared_distances(x[q], x[g]) for x in mats])  # (m, q, g)
        self.match = labels[g][None, :] == labels[q][:, None]

    def __call__(self, alphas) -> float:
        d = np.tensordot(np.asarray(alphas) ** 2, self.dist, axes=1)
        nearest = d.argmin(axis=1)  # first minimum: ties by gallery index
        return float(self.match[np.arange(len(nearest)), nearest].mean())


def fit_weighted_accuracy(train_embeddings: Sequence[np.ndarray], labels, budget: int = 200,
                          seed: int = 0) -> WeightVector:
    """Derivative-free search for weights maximising training-split Rank-1 accuracy.

    The training rows are split into an internal query/gallery set. The first
    60% of the evaluation budget goes to log-uniform random weights in
    [0.01, 10] (the first point is always all-ones), the rest to multiplicative
    coordinate moves around the incumbent. Only strict improvements replace the
    incumbent, so ties go to the earlier evaluation.
    """
    mats = [np.asarray(x, dtype=np.float64) for x in train_embeddings]
    m = len(mats)
    if budget < 1:
        raise ValidationError(f"budget must be >= 1, got {budget}")
    objective = _Rank1Objective(mats, labels, seed)
    rng = np.random.default_rng([seed, 3])
    n_random = max(1, int(round(0.6 * budget)))
    lo, hi = np.log(SEARCH_RANGE[0]), np.log(SEARCH_RANGE[1])

    best = np.ones(m)
    best_val = objective(best)
    baseline = best_val
    trace = [best_val]
    for _ in range(n_random - 1):
        cand = np.exp(rng.uniform(lo, hi, size=m))
        val = objective(cand)
        trace.append(val)
        if val > best_val:
            best, best_val = cand, val
    used = n_random
    while used < budget:
        for coord in range(m):
            for factor in SEARCH_FACTORS:
                if used >= budget:
                    break
                cand = best.copy()
                cand[coord] *= factor
                val = objective(cand)
                trace.append(val)
                used += 1
                if val > best_val:
                    best, best_val = cand, val
    return WeightVector(best, objective=best_val, baseline_objective=baseline, log=trace)


def fit_nn_triplet(train_embeddings: Sequence[np.ndarray], labels, cfg: TrainConfig,
                   hidden: Sequence[int] = (100,), output_dim: int = 50) -> EmbeddingModel:
    """Stacked siamese head trained on the concatenated (z-scored) embeddings."""
    x = np.concatenate([np.asarray(e, dtype=np.float64) for e in train_embeddings], axis=1)
    spec = dense_spec(x.shape[1], hidden=hidden, output_dim=output_dim)
    return train_siamese(x, labels, spec, cfg)


def median_ranks(rank_positions: np.ndarray) -> np.ndarray:
    """Lower median over axis 0."""
    m = rank_positions.shape[0]
    return np.sort(rank_positions, axis=0)[(m - 1) // 2]


def majority_vote_ranking(per_model_distance_rows) -> np.ndarray:
    """Order gallery items by the (lower) median of their per-model rank positions.

    Rank positions come from a stable sort of each model's distances. Ties in
    the median go to the lower mean rank, then to the lower gallery index.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in per_model_distance_rows]
    if not rows:
        raise ValidationError("majority vote needs at least one model")
    n = rows[0].shape[0]
    if any(r.ndim != 1 or r.shape[0] != n for r in rows):
        raise ValidationError("per-model distance rows have different lengths")
    dist = np.stack(rows)
    order = np.argsort(dist, axis=1, kind="stable")
    positions = np.empty_like(order)
    np.put_along_axis(positions, order, np.arange(n)[None, :].repeat(len(rows), 0), axis=1)
    med = median_ranks(positions)
    mean = positions.mean(axis=0)
    return np.lexsort((np.arange(n), mean, med))


def majority_vote_rankings(per_model_query, per_model_gallery) -> np.ndarray:
    """``majority_vote_ranking`` for every query; returns ``(n_query, n_gallery)``."""
    dists = [squared_distances(q, g) for q, g in zip(per_model_query, per_model_gallery)]
    return np.stack([majority_vote_ranking([d[i] for d in dists])
                     for i in range(dists[0].shape[0])])


@dataclass
class EnsembleTransform:
    """A fitted fusion rule; ``stats`` is None only for majority vote."""

    kind: str
    stats: Optional[ZScoreStats] = None
    weights: Optional[WeightVector] = None
    model: Optional[EmbeddingModel] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown ensemble kind {self.kind!r}")
        needs = {"weighted_triplet": "weights", "weighted_accuracy": "weights",
                 "nn_triplet": "model"}.get(self.kind)
        if needs and getattr(self, needs) is None:
            raise ValidationError(f"{self.kind} transform needs fitted {needs}")
        if self.kind != "majority_vote" and self.stats is None:
            raise ValidationError(f"{self.kind} transform needs z-score stats")

    def embed(self, per_model) -> np.ndarray:
        if self.kind == "majority_vote":
            raise ValidationError("majority vote produces rankings, not embeddings")
        z = self.stats.normalize(per_model)
        if self.kind == "concatenation":
            return np.concatenate(z, axis=-1)
        if self.kind == "nn_triplet":
            x = np.concatenate(z, axis=-1)
            out = embed_all(self.model, np.atleast_2d(x))
            return out if x.ndim == 2 else out[0]
        return apply_weighted(self.weights, z)

    def rank(self, per_model_query, per_model_gallery) -> np.ndarray:
        """Gallery rankings for every query."""
        if self.kind == "majority_vote":
            return majority_vote_rankings(per_model_query, per_model_gallery)
        return rank_gallery(squared_distances(self.embed(per_model_query),
                                              self.embed(per_model_gallery)))


def fit_transform(kind: str, train_embeddings: Sequence[np.ndarray], labels,
                  cfg: Optional[TrainConfig] = None, budget: int = 200, seed: int = 0,
                  nn_hidden: Sequence[int] = (100,), nn_output_dim: int = 50) -> EnsembleTransform:
    """Fit one ensemble kind on training embeddings (one matrix per sub-model)."""
    if kind not in KINDS:
        raise ValidationError(f"unknown ensemble kind {kind!r}")
    if kind == "majority_vote":
        return EnsembleTransform(kind)
    cfg = cfg or TrainConfig()
    stats = fit_zscore(train_embeddings)
    z = stats.normalize(train_embeddings)
    if kind == "concatenation":
        return EnsembleTransform(kind, stats)
    if kind == "weighted_triplet":
        return EnsembleTransform(kind, stats, weights=fit_weighted_triplet(z, labels, cfg))
    if kind == "weighted_accuracy":
        return EnsembleTransform(kind, stats,
                                 weights=fit_weighted_accuracy(z, labels, budget, seed))
    return EnsembleTransform(kind, stats,
                             model=fit_nn_triplet(z, labels, cfg, nn_hidden, nn_output_dim))
