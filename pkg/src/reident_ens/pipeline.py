"""Cross-validated experiments: features -> sub-models -> ensembles -> rank-k."""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ensemble as ens
from .data import FoldAssignment, Sample, assign_folds, build_query_gallery
from .errors import ReidentError, ValidationError
from .evaluation import (cmc_from_rankings, correlation_matrix, leave_one_out_ablation,
                         mean_and_std, pair_key, pairwise_improvement_matrix, rank_gallery,
                         relative_uncertainty, squared_distances)
from .features import (DEFAULT_PATCH_RESIZE, IMAGE_RESIZE_FULL, IMAGE_RESIZE_TEST, METHODS,
                       extract_matrix, join_features)
from .neural import (EmbeddingModel, NetworkSpec, TrainConfig, dense_spec, embed_all,
                     image_spec, train_siamese)

log = logging.getLogger(__name__)

INPUT_NORMS = ("zscore", "scale", "none")

# (width, height) each method is resized to when the config leaves it unset
DEFAULT_RESIZE = {
    "brightness": DEFAULT_PATCH_RESIZE,
    "avg_color": DEFAULT_PATCH_RESIZE,
    "color_variance": DEFAULT_PATCH_RESIZE,
    "column_quantile": IMAGE_RESIZE_FULL,
    "raw_image": IMAGE_RESIZE_TEST,
    "imported": None,
}


@dataclass
class SubModelConfig:
    """One feature method plus the siamese network trained on it.

    ``resize`` is ``(width, height)``; when unset the method's entry in
    ``DEFAULT_RESIZE`` applies.
    """

    name: str
    method: str
    resize: Optional[Tuple[int, int]] = None
    hidden: Tuple[int, ...] = (100, 100, 100)
    output_dim: int = 50
    input_norm: str = "zscore"
    train: TrainConfig = field(default_factory=TrainConfig)
    patch: int = 16
    overlap_fraction: float = 0.5
    quantiles: Tuple[float, ...] = (0.2, 0.5, 0.8)
    features_path: Optional[str] = None
    # conv stack, raw_image only
    n_conv: int = 6
    pool_after: Tuple[int, ...] = (2, 4, 6)
    channel_growth: float = 1.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"sub-model {self.name!r}: unknown method {self.method!r}")
        if self.input_norm not in INPUT_NORMS:
            raise ValidationError(f"sub-model {self.name!r}: input_norm must be one of {INPUT_NORMS}")
        if self.method == "imported" and not self.features_path:
            raise ValidationError(f"sub-model {self.name!r}: imported method needs features_path")
        if self.resize is None:
            self.resize = DEFAULT_RESIZE[self.method]
        elif self.method == "imported":
            raise ValidationError(f"sub-model {self.name!r}: imported features cannot be resized")
        else:
            self.resize = tuple(int(v) for v in self.resize)

    def network_spec(self, input_dim: int) -> NetworkSpec:
        if self.method == "raw_image":
            w, h = self.resize
            return image_spec((3, h, w), self.n_conv, self.pool_after, self.channel_growth,
                              self.hidden, self.output_dim)
        return dense_spec(input_dim, self.hidden, self.output_dim)

    def extraction_options(self) -> dict:
        return {"patch": self.patch, "overlap_fraction": self.overlap_fraction,
                "quantiles": tuple(self.quantiles)}


@dataclass
class EnsembleConfig:
    kinds: Tuple[str, ...] = ens.KINDS
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.01, epochs=200))
    budget: int = 200
    seed: int = 0
    nn_hidden: Tuple[int, ...] = (100,)
    nn_output_dim: int = 50

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in ens.KINDS]
        if bad:
            raise ValidationError(f"unknown ensemble kinds {bad}")


@dataclass
class AnalysisConfig:
    pairwise: bool = False
    leave_one_out: bool = False
    correlation: bool = False
    correlation_trials: int = 100_000


@dataclass
class EvaluationReport:
    """Per-fold CMC curves for every method plus the optional analyses."""

    methods: Dict[str, dict]
    rotations: List[int]
    max_k: int
    fold_sizes: List[int]
    weights: Dict[str, List[List[float]]] = field(default_factory=dict)
    pairwise: Optional[dict] = None
    leave_one_out: Optional[dict] = None
    correlation: Optional[dict] = None
    timings: Dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def per_fold(self, method: str) -> np.ndarray:
        return np.asarray(self.methods[method]["per_fold"])

    def mean_rank(self, method: str, k: int = 1) -> float:
        return float(self.per_fold(method)[:, k - 1].mean())

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "rotations": self.rotations,
            "fold_sizes": self.fold_sizes,
            "max_k": self.max_k,
            "methods": self.methods,
        }
        if self.weights:
            out["weights"] = self.weights
        for key in ("pairwise", "leave_one_out", "correlation"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        out.update(self.extra)
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_text(self) -> str:
        """Aligned table: one row per fold and a mean +- std row for every method."""
        ks = [k for k in (1, 5, 10) if k <= self.max_k]
        name_w = max([len(m) for m in self.methods] + [12])
        head = f"{'method':<{name_w}}  {'fold':>6}  " + "  ".join(f"{'rank-' + str(k):>15}" for k in ks)
        lines = [head, "-" * len(head)]
        for name, entry in self.methods.items():
            for r, row in zip(self.rotations, entry["per_fold"]):
                cells = "  ".join(f"{row[k - 1]:>15.3f}" for k in ks)
                lines.append(f"{name:<{name_w}}  {r:>6}  {cells}")
            cells = "  ".join(f"{entry['mean'][k - 1]:>7.3f} +- {entry['std'][k - 1]:<4.3f}"
                              for k in ks)
            lines.append(f"{name:<{name_w}}  {'mean':>6}  {cells}")
        return "\n".join(lines) + "\n"


@contextmanager
def _phase(label: str):
    try:
        yield
    except ReidentError as exc:
        raise type(exc)(f"{label}: {exc}") from exc


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _normalize_inputs(x: np.ndarray, train_rows: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return x
    if mode == "scale":
        return x / 255.0
    mu = x[train_rows].mean(axis=0)
    sd = np.maximum(x[train_rows].std(axis=0), 1e-8)
    return (x - mu) / sd


def extract_all(samples: Sequence[Sample], submodels: Sequence[SubModelConfig],
                imported: Optional[Dict[str, dict]] = None) -> Dict[str, np.ndarray]:
    """Feature matrix per sub-model; identical extraction settings are computed once."""
    cache: Dict[tuple, np.ndarray] = {}
    out = {}
    for sm in submodels:
        if sm.method == "imported":
            if not imported or sm.name not in imported:
                raise ValidationError(f"sub-model {sm.name!r}: imported features not loaded")
            out[sm.name] = join_features(samples, imported[sm.name])
            continue
        resize = tuple(sm.resize) if sm.resize else None
        key = (sm.method, resize, sm.patch, sm.overlap_fraction, tuple(sm.quantiles))
        if key not in cache:
            cache[key] = extract_matrix(samples, sm.method, resize, **sm.extraction_options())
        out[sm.name] = cache[key]
    return out


@dataclass
class _FoldResult:
    rotation: int
    cmc: Dict[str, np.ndarray]
    weights: Dict[str, List[float]]
    pair_rank1: Dict[Tuple[str, str], float]
    minus_one_rank1: Dict[str, float]
    full_rank1: Optional[float]
    correlation: Optional[np.ndarray]
    timings: Dict[str, float]
    models: Dict[str, EmbeddingModel]
    transforms: Dict[str, ens.EnsembleTransform]
    eval_embeddings: Dict[str, np.ndarray]
    eval_keys: List[Tuple[str, str]]


def _run_rotation(samples, features, submodels, ens_cfg, analysis, base: FoldAssignment,
                  eval_fold: int, rotation: int, query_seed: int, max_k: int) -> _FoldResult:
    assignment = base.with_eval_fold(eval_fold)
    split = build_query_gallery(samples, assignment, seed=_derive_seed(query_seed, eval_fold))
    index = {s.key: i for i, s in enumerate(samples)}
    train_subjects = assignment.training_subjects()
    train_rows = np.array([i for i, s in enumerate(samples) if s.subject_id in train_subjects])
    q_rows = np.array([index[s.key] for s in split.query])
    g_rows = np.array([index[s.key] for s in split.gallery])
    labels = np.array([s.subject_id for s in samples])
    train_labels, q_ids, g_ids = labels[train_rows], labels[q_rows], labels[g_rows]
    if set(train_labels) & (set(q_ids) | set(g_ids)):
        raise ReidentError(f"rotation {rotation}: training subjects leak into evaluation")
    k = min(max_k, len(g_rows))
    timings: Dict[str, float] = {}
    cmc: Dict[str, np.ndarray] = {}
    models = {}
    emb_train, emb_q, emb_g = [], [], []

    for sm in submodels:
        t0 = time.perf_counter()
        x = _normalize_inputs(features[sm.name], train_rows, sm.input_norm)
        cfg = dataclasses.replace(sm.train, seed=_derive_seed(sm.train.seed, rotation))
        with _phase(f"training sub-model {sm.name!r}"):
            model = train_siamese(x[train_rows], train_labels, sm.network_spec(x.shape[1]), cfg)
        t1 = time.perf_counter()
        e_tr, e_q, e_g = (embed_all(model, x[rows]) for rows in (train_rows, q_rows, g_rows))
        t2 = time.perf_counter()
        timings[f"train/{sm.name}"] = t1 - t0
        timings[f"inference/{sm.name}"] = t2 - t1
        models[sm.name] = model
        emb_train.append(e_tr)
        emb_q.append(e_q)
        emb_g.append(e_g)
        cmc[sm.name] = cmc_from_rankings(rank_gallery(squared_distances(e_q, e_g)), q_ids, g_ids, k)
        log.info("rotation %d: %s rank-1 %.3f (%.1fs)", rotation, sm.name, cmc[sm.name][0], t1 - t0)

    transforms = {}
    weights = {}
    for kind in ens_cfg.kinds:
        t0 = time.perf_counter()
        tr_cfg = dataclasses.replace(ens_cfg.train, seed=_derive_seed(ens_cfg.train.seed, rotation))
        with _phase(f"fitting ensemble {kind!r}"):
            transform = ens.fit_transform(kind, emb_train, train_labels, tr_cfg, ens_cfg.budget,
                                          _derive_seed(ens_cfg.seed, rotation),
                                          ens_cfg.nn_hidden, ens_cfg.nn_output_dim)
        t1 = time.perf_counter()
        cmc[kind] = cmc_from_rankings(transform.rank(emb_q, emb_g), q_ids, g_ids, k)
        timings[f"fit/{kind}"] = t1 - t0
        timings[f"inference/{kind}"] = time.perf_counter() - t1
        transforms[kind] = transform
        if transform.weights is not None:
            weights[kind] = transform.weights.alphas.tolist()
        log.info("rotation %d: %s rank-1 %.3f", rotation, kind, cmc[kind][0])

    names = [sm.name for sm in submodels]

    def concat_rank1(members: Sequence[int]) -> float:
        t = ens.fit_transform("concatenation", [emb_train[i] for i in members], train_labels)
        r = t.rank([emb_q[i] for i in members], [emb_g[i] for i in members])
        return float(cmc_from_rankings(r, q_ids, g_ids, 1)[0])

    pair_rank1 = {}
    if analysis.pairwise and len(names) >= 2:
        for i, j in combinations(range(len(names)), 2):
            pair_rank1[pair_key(names[i], names[j])] = concat_rank1([i, j])
    minus_one = {}
    full_rank1 = None
    if analysis.leave_one_out and len(names) >= 2:
        full_rank1 = concat_rank1(list(range(len(names))))
        for i in range(len(names)):
            minus_one[names[i]] = concat_rank1([j for j in range(len(names)) if j != i])
    eval_embs = {n: np.concatenate([q, g]) for n, q, g in zip(names, emb_q, emb_g)}
    corr = None
    if analysis.correlation and len(names) >= 2:
        _, corr = correlation_matrix(eval_embs, analysis.correlation_trials,
                                     seed=_derive_seed(query_seed, rotation, 17))
    eval_keys = [samples[i].key for i in np.concatenate([q_rows, g_rows])]
    return _FoldResult(rotation, cmc, weights, pair_rank1, minus_one, full_rank1, corr, timings,
                       models, transforms, eval_embs, eval_keys)


def _summary(per_fold: List[np.ndarray]) -> dict:
    arr = np.vstack(per_fold)
    means, stds = zip(*(mean_and_std(arr[:, j]) for j in range(arr.shape[1])))
    entry = {"per_fold": arr.tolist(), "mean": list(means), "std": list(stds)}
    rel = {}
    for k in (1, arr.shape[1]):
        try:
            rel[f"rank{k}"] = relative_uncertainty(arr[:, k - 1])
        except ValidationError:
            rel[f"rank{k}"] = None
    entry["relative_uncertainty"] = rel
    return entry


def _matrix_json(names, mat):
    return {"names": list(names),
            "matrix": [[None if np.isnan(v) else float(v) for v in row] for row in mat]}


def cross_validate(samples: Sequence[Sample], submodels: Sequence[SubModelConfig],
                   ensemble_cfg: Optional[EnsembleConfig] = None, k_folds: int = 5,
                   holdout_fold: Optional[int] = None, fold_seed: int = 0, query_seed: int = 0,
                   max_k: int = 10, analysis: Optional[AnalysisConfig] = None, threads: int = 1,
                   imported: Optional[Dict[str, dict]] = None,
                   artifacts_dir=None) -> EvaluationReport:
    """Rotate the evaluation fold over every non-holdout fold and score all methods.

    Each rotation trains every sub-model on the remaining folds, fits the
    requested ensembles on the training embeddings and scores query against
    gallery. The holdout fold is never read.
    """
    if not submodels:
        raise ValidationError("at least one sub-model required")
    names = [sm.name for sm in submodels]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate sub-model names in {names}")
    ensemble_cfg = ensemble_cfg or EnsembleConfig(kinds=())
    clash = set(names) & set(ensemble_cfg.kinds)
    if clash:
        raise ValidationError(f"sub-model names collide with ensemble kinds: {sorted(clash)}")
    analysis = analysis or AnalysisConfig()
    if holdout_fold is None:
        holdout_fold = k_folds - 1
    first_eval = 0 if holdout_fold != 0 else 1
    base = assign_folds(samples, k_folds, first_eval, holdout_fold, seed=fold_seed)
    eval_folds = [f for f in range(k_folds) if f != holdout_fold]

    t0 = time.perf_counter()
    features = extract_all(samples, submodels, imported)
    t_feat = time.perf_counter() - t0

    def run(item):
        rotation, fold = item
        try:
            return _run_rotation(samples, features, submodels, ensemble_cfg, analysis, base,
                                 fold, rotation, query_seed, max_k)
        except ReidentError as exc:
            raise type(exc)(f"rotation {rotation} (eval fold {fold}): {exc}") from exc

    items = list(enumerate(eval_folds))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]

    # galleries differ in size across rotations; report ranks every rotation supports
    k_common = int(min(r.cmc[names[0]].shape[0] for r in results))
    methods = {}
    for name in names + list(ensemble_cfg.kinds):
        methods[name] = {"kind": "submodel" if name in names else "ensemble",
                         **_summary([r.cmc[name][:k_common] for r in results])}
    weights = {kind: [r.weights[kind] for r in results]
               for kind in ensemble_cfg.kinds if kind in results[0].weights}
    timings = {"feature_extraction": t_feat}
    for r in results:
        for key, val in r.timings.items():
            timings[key] = timings.get(key, 0.0) + val

    report = EvaluationReport(methods, [r.rotation for r in results], k_common,
                              base.fold_sizes(), weights, timings=timings)
    sub_rank1 = {n: methods[n]["mean"][0] for n in names}
    if analysis.pairwise and len(names) >= 2:
        pair_mean = {key: float(np.mean([r.pair_rank1[key] for r in results]))
                     for key in results[0].pair_rank1}
        _, mat = pairwise_improvement_matrix(sub_rank1, pair_mean, names)
        report.pairwise = _matrix_json(names, mat)
        report.pairwise["row_sums"] = [float(np.nansum(row)) for row in mat]
        report.pairwise["column_sums"] = [float(np.nansum(col)) for col in mat.T]
    if analysis.leave_one_out and len(names) >= 2:
        full_rank1 = float(np.mean([r.full_rank1 for r in results]))
        minus = {n: float(np.mean([r.minus_one_rank1[n] for r in results])) for n in names}
        report.leave_one_out = {"full_rank1": full_rank1, "minus_one_rank1": minus,
                                "delta": leave_one_out_ablation(full_rank1, minus, names)}
    if analysis.correlation and len(names) >= 2:
        report.correlation = _matrix_json(names, np.mean([r.correlation for r in results], axis=0))

    if artifacts_dir is not None:
        _write_artifacts(Path(artifacts_dir), results, names)
    return report


def _write_artifacts(root: Path, results: List[_FoldResult], names: List[str]) -> None:
    from .storage import dump_embeddings, save_model, save_transform

    (root / "models").mkdir(parents=True, exist_ok=True)
    (root / "embeddings").mkdir(parents=True, exist_ok=True)
    for r in results:
        for name, model in r.models.items():
            save_model(model, root / "models" / f"rotation{r.rotation}_{name}.bin")
            dump_embeddings(root / "embeddings" / f"rotation{r.rotation}_{name}.csv",
                            r.eval_keys, r.eval_embeddings[name])
        for kind, transform in r.transforms.items():
            save_transform(transform, root / "models" / f"rotation{r.rotation}_{kind}.bin", names)


def representation_size_sweep(samples: Sequence[Sample], sizes: Sequence[int],
                              submodel: SubModelConfig, **cv_kwargs) -> Dict[int, Tuple[float, float]]:
    """Retrain one sub-model at each embedding size; mean and std of Rank-1 across folds."""
    if any(s < 1 for s in sizes):
        raise ValidationError(f"representation sizes must be >= 1, got {list(sizes)}")
    cv_kwargs.pop("ensemble_cfg", None)
    out = {}
    for size in sizes:
        sm = dataclasses.replace(submodel, name=f"{submodel.name}_{size}", output_dim=int(size))
        report = cross_validate(samples, [sm], **cv_kwargs)
        entry = report.methods[sm.name]
        out[int(size)] = (entry["mean"][0], entry["std"][0])
    return out
