"""Retrieval ranking, rank-k accuracy and the cross-model statistics."""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError


def squared_distances(query: np.ndarray, gallery: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared Euclidean distances (differences, not the dot-product expansion)."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if query.shape[1] != gallery.shape[1]:
        raise ValidationError(f"query dims {query.shape[1]} != gallery dims {gallery.shape[1]}")
    out = np.empty((query.shape[0], gallery.shape[0]))
    for s in range(0, query.shape[0], chunk):
        diff = query[s:s + chunk, None, :] - gallery[None, :, :]
        out[s:s + chunk] = np.einsum("qgd,qgd->qg", diff, diff)
    return out


def rank_gallery(distances: np.ndarray) -> np.ndarray:
    """Gallery indices per query, ascending distance, ties by gallery index."""
    return np.argsort(np.asarray(distances), axis=1, kind="stable")


def _check_labels(query_ids, gallery_ids):
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    missing = set(query_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ValidationError(f"query subjects without gallery images: {sorted(missing)[:5]}")
    return query_ids, gallery_ids


def first_match_positions(rankings: np.ndarray, query_ids, gallery_ids) -> np.ndarray:
    """0-based position of the first same-subject gallery item for each query."""
    query_ids, gallery_ids = _check_labels(query_ids, gallery_ids)
    hits = gallery_ids[rankings] == query_ids[:, None]
    return hits.argmax(axis=1)


def cmc_from_rankings(rankings: np.ndarray, query_ids, gallery_ids, max_k: int = 10) -> np.ndarray:
    """Rank-1..Rank-max_k accuracies from precomputed rankings."""
    rankings = np.asarray(rankings)
    if max_k < 1 or max_k > rankings.shape[1]:
        raise ValidationError(f"k={max_k} outside [1, gallery size {rankings.shape[1]}]")
    pos = first_match_positions(rankings, query_ids, gallery_ids)
    return np.array([(pos < k).mean() for k in range(1, max_k + 1)])


def cmc_curve(query_embs, gallery_embs, query_ids, gallery_ids, max_k: int = 10) -> np.ndarray:
    return cmc_from_rankings(rank_gallery(squared_distances(query_embs, gallery_embs)),
                             query_ids, gallery_ids, max_k)


def rank_k_accuracy(query_embs, gallery_embs, query_ids, gallery_ids, k: int) -> float:
    """Fraction of queries with a same-subject item among their ``k`` nearest gallery items."""
    gallery_embs = np.atleast_2d(gallery_embs)
    if k < 1 or k > gallery_embs.shape[0]:
        raise ValidationError(f"k={k} outside [1, gallery size {gallery_embs.shape[0]}]")
    return float(cmc_curve(query_embs, gallery_embs, query_ids, gallery_ids, k)[-1])


def mean_and_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("no values to aggregate")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def relative_uncertainty(per_fold_accuracies: Sequence[float]) -> float:
    """Sample standard deviation across folds divided by the mean across folds."""
    arr = np.asarray(per_fold_accuracies, dtype=np.float64)
    if arr.size < 2:
        raise ValidationError("relative uncertainty needs at least 2 folds")
    mean = arr.mean()
    if mean == 0:
        raise ValidationError("relative uncertainty undefined for zero mean accuracy")
    return float(arr.std(ddof=1) / mean)


def _distinct_triples(n: int, trials: int, rng: np.random.Generator):
    a = rng.integers(n, size=trials)
    b = rng.integers(n - 1, size=trials)
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = rng.integers(n - 2, size=trials)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return a, b, c


def triplet_correlation(embs_f, embs_g, trials: int = 100_000, seed: int = 0) -> float:
    """Agreement of two embeddings on the order of random distance pairs, in [-1, 1].

    For each trial three distinct samples A, B, C are drawn; the trial counts
    as a success when both embeddings strictly agree on whether B or C is
    closer to A. The result is ``2 * successes / trials - 1``.
    """
    f = np.asarray(embs_f, dtype=np.float64)
    g = np.asarray(embs_g, dtype=np.float64)
    if f.shape[0] != g.shape[0]:
        raise ValidationError("both embeddings must cover the same samples")
    n = f.shape[0]
    if n < 3:
        raise ValidationError("triplet correlation needs at least 3 samples")
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    success = 0
    chunk = 65536
    for s in range(0, trials, chunk):
        a, b, c = _distinct_triples(n, min(chunk, trials - s), rng)
        fab = np.linalg.norm(f[a] - f[b], axis=1)
        fac = np.linalg.norm(f[a] - f[c], axis=1)
        gab = np.linalg.norm(g[a] - g[b], axis=1)
        gac = np.linalg.norm(g[a] - g[c], axis=1)
        agree = ((fab < fac) & (gab < gac)) | ((fab > fac) & (gab > gac))
        success += int(agree.sum())
    return 2.0 * success / trials - 1.0


def correlation_matrix(embeddings: Mapping[str, np.ndarray], trials: int = 100_000,
                       seed: int = 0) -> Tuple[List[str], np.ndarray]:
    """Symmetric matrix of pairwise triplet correlations; the diagonal is NaN."""
    names = list(embeddings)
    m = len(names)
    out = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(i + 1, m):
            out[i, j] = out[j, i] = triplet_correlation(embeddings[names[i]], embeddings[names[j]],
                                                        trials, seed=seed + 1009 * i + j)
    return names, out


def pair_key(a: str, b: str) -> Tuple[str, str]:
    return tuple(sorted((a, b)))


def pairwise_improvement_matrix(sub_rank1: Mapping[str, float],
                                pair_rank1: Mapping[Tuple[str, str], float],
                                names: Optional[Sequence[str]] = None) -> Tuple[List[str], np.ndarray]:
    """Rank-1 of each two-model ensemble minus the better of its two members.

    ``pair_rank1`` is keyed by ``pair_key(a, b)``. Diagonal entries are NaN.
    """
    names = list(names) if names is not None else list(sub_rank1)
    m = len(names)
    out = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            key = pair_key(names[i], names[j])
            if key not in pair_rank1:
                raise ValidationError(f"no two-model ensemble result for {key}")
            for nm in key:
                if nm not in sub_rank1:
                    raise ValidationError(f"no sub-model result for {nm!r}")
            out[i, j] = pair_rank1[key] - max(sub_rank1[names[i]], sub_rank1[names[j]])
    return names, out


def leave_one_out_ablation(full_rank1: float, minus_one_rank1: Mapping[str, float],
                           names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """``Rank-1(all) - Rank-1(all except m)`` for each sub-model ``m``."""
    names = list(names) if names is not None else list(minus_one_rank1)
    missing = [n for n in names if n not in minus_one_rank1]
    if missing:
        raise ValidationError(f"missing leave-one-out reports for {missing}")
    return {n: float(full_rank1 - minus_one_rank1[n]) for n in names}
