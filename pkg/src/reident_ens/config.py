"""TOML experiment configuration with strict key checking.

Example::

    seed = 0

    [dataset.synthetic]
    n_subjects = 50
    views_per_subject = 5

    [folds]
    k_folds = 5

    [[submodels]]
    name = "color_variance"
    method = "color_variance"

    [ensemble]
    kinds = ["concatenation", "majority_vote"]

Every seed not written explicitly is derived from the top-level ``seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, ValidationError
from .ensemble import KINDS
from .neural import TrainConfig
from .pipeline import AnalysisConfig, EnsembleConfig, SubModelConfig

TOP_KEYS = {"seed", "output_dir", "max_k", "dataset", "folds", "submodels", "ensemble", "analysis"}
DATASET_KEYS = {"manifest", "synthetic"}
SYNTH_KEYS = {"n_subjects", "views_per_subject", "width", "height", "noise_sigma", "shift_max", "seed"}
FOLD_KEYS = {"k_folds", "holdout_fold", "seed", "query_seed"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
SUBMODEL_KEYS = {f.name for f in dataclasses.fields(SubModelConfig)}
ENSEMBLE_KEYS = {"kinds", "train", "budget", "seed", "nn_hidden", "nn_output_dim"}
ANALYSIS_KEYS = {"pairwise", "leave_one_out", "correlation", "correlation_trials",
                 "size_sweep", "size_sweep_model"}

SYNTH_DEFAULTS = {"n_subjects": 50, "views_per_subject": 5, "width": 128, "height": 96,
                  "noise_sigma": 8.0, "shift_max": 4}
ENSEMBLE_TRAIN_DEFAULTS = {"learning_rate": 0.01, "epochs": 200}
CONV_EPOCHS = 30


@dataclass
class ExperimentConfig:
    seed: int
    submodels: List[SubModelConfig]
    ensemble: EnsembleConfig
    analysis: AnalysisConfig
    k_folds: int = 5
    holdout_fold: Optional[int] = None
    fold_seed: int = 0
    query_seed: int = 0
    max_k: int = 10
    manifest: Optional[Path] = None
    synthetic: Optional[Dict[str, Any]] = None
    output_dir: Optional[Path] = None
    size_sweep: List[int] = field(default_factory=list)
    size_sweep_model: Optional[str] = None
    source_path: Optional[Path] = None

    def resolved(self) -> dict:
        """Plain-data echo of every setting, defaults included."""
        def train(cfg: TrainConfig):
            return dataclasses.asdict(cfg)

        subs = []
        for sm in self.submodels:
            d = dataclasses.asdict(sm)
            d["train"] = train(sm.train)
            for key in ("hidden", "quantiles", "pool_after", "resize"):
                if d[key] is not None:
                    d[key] = list(d[key])
            subs.append(d)
        ens = dataclasses.asdict(self.ensemble)
        ens["kinds"] = list(ens["kinds"])
        ens["nn_hidden"] = list(ens["nn_hidden"])
        out = {
            "seed": self.seed,
            "max_k": self.max_k,
            "dataset": ({"manifest": str(self.manifest)} if self.manifest
                        else {"synthetic": dict(self.synthetic)}),
            "folds": {"k_folds": self.k_folds,
                      "holdout_fold": self.k_folds - 1 if self.holdout_fold is None
                      else self.holdout_fold,
                      "seed": self.fold_seed, "query_seed": self.query_seed},
            "submodels": subs,
            "ensemble": ens,
            "analysis": {**dataclasses.asdict(self.analysis), "size_sweep": list(self.size_sweep),
                         "size_sweep_model": self.size_sweep_model},
        }
        return out

    def content_hash(self) -> str:
        """Git-style blob hash of the manifest bytes, or of the synthetic parameters."""
        if self.manifest is not None:
            payload = self.manifest.read_bytes()
        else:
            payload = json.dumps(self.synthetic, sort_keys=True).encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _check_keys(section: str, table: Any, allowed: set) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return table


def _train_config(section: str, table: Optional[dict], seed: int, defaults=None) -> TrainConfig:
    values = dict(defaults or {})
    values["seed"] = seed
    values.update(_check_keys(section, table or {}, TRAIN_KEYS))
    try:
        return TrainConfig(**values)
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(raw: dict, base_dir: Path = Path("."), seed_override: Optional[int] = None,
                 check_files: bool = True) -> ExperimentConfig:
    _check_keys("top level", raw, TOP_KEYS)
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)

    dataset = _check_keys("dataset", raw.get("dataset", {}), DATASET_KEYS)
    if ("manifest" in dataset) == ("synthetic" in dataset):
        raise ConfigError("[dataset] needs exactly one of 'manifest' or 'synthetic'")
    manifest = synthetic = None
    if "manifest" in dataset:
        manifest = Path(dataset["manifest"])
        if not manifest.is_absolute():
            manifest = base_dir / manifest
        if check_files and not manifest.is_file():
            raise ConfigError(f"manifest not found: {manifest}")
    else:
        synth = _check_keys("dataset.synthetic", dataset["synthetic"], SYNTH_KEYS)
        synthetic = {**SYNTH_DEFAULTS, "seed": seed, **synth}

    folds = _check_keys("folds", raw.get("folds", {}), FOLD_KEYS)

    subs_raw = raw.get("submodels", [])
    if not isinstance(subs_raw, list) or not subs_raw:
        raise ConfigError("at least one sub-model required")
    submodels = []
    for i, sub in enumerate(subs_raw):
        sub = dict(_check_keys(f"submodels[{i}]", sub, SUBMODEL_KEYS))
        if "method" not in sub:
            raise ConfigError(f"submodels[{i}]: 'method' is required")
        sub.setdefault("name", sub["method"])
        method = sub["method"]
        train_defaults = {"epochs": CONV_EPOCHS} if method == "raw_image" else {}
        sub["train"] = _train_config(f"submodels[{i}].train", sub.get("train"),
                                     seed + 100 + i, train_defaults)
        for key in ("hidden", "quantiles", "pool_after", "resize"):
            if key in sub:
                sub[key] = tuple(sub[key])
        if method == "raw_image":
            sub.setdefault("hidden", (100, 100))
            sub.setdefault("output_dim", 100)
            sub.setdefault("input_norm", "scale")
        if sub.get("features_path"):
            path = Path(sub["features_path"])
            if not path.is_absolute():
                path = base_dir / path
            if check_files and not path.is_file():
                raise ConfigError(f"submodels[{i}]: features_path not found: {path}")
            sub["features_path"] = str(path)
        try:
            submodels.append(SubModelConfig(**sub))
        except (TypeError, ValidationError) as exc:
            raise ConfigError(f"submodels[{i}]: {exc}") from exc
    names = [s.name for s in submodels]
    if len(set(names)) != len(names):
        raise ConfigError(f"sub-model names must be unique, got {names}")

    ens_raw = dict(_check_keys("ensemble", raw.get("ensemble", {}), ENSEMBLE_KEYS))
    ens_train = _train_config("ensemble.train", ens_raw.pop("train", None), seed + 300,
                              ENSEMBLE_TRAIN_DEFAULTS)
    kinds = tuple(ens_raw.pop("kinds", KINDS))
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"[ensemble] unknown kinds {bad}; choose from {list(KINDS)}")
    try:
        ensemble = EnsembleConfig(kinds=kinds, train=ens_train,
                                  budget=int(ens_raw.get("budget", 200)),
                                  seed=int(ens_raw.get("seed", seed + 200)),
                                  nn_hidden=tuple(ens_raw.get("nn_hidden", (100,))),
                                  nn_output_dim=int(ens_raw.get("nn_output_dim", 50)))
    except ValidationError as exc:
        raise ConfigError(f"[ensemble]: {exc}") from exc

    an = dict(_check_keys("analysis", raw.get("analysis", {}), ANALYSIS_KEYS))
    size_sweep = [int(s) for s in an.pop("size_sweep", [])]
    size_sweep_model = an.pop("size_sweep_model", None)
    if size_sweep_model is not None and size_sweep_model not in names:
        raise ConfigError(f"[analysis] size_sweep_model {size_sweep_model!r} is not a sub-model")
    analysis = AnalysisConfig(**an)

    k_folds = int(folds.get("k_folds", 5))
    if k_folds < 3:
        raise ConfigError(f"[folds] k_folds must be >= 3, got {k_folds}")
    holdout = folds.get("holdout_fold")
    if holdout is not None and not 0 <= int(holdout) < k_folds:
        raise ConfigError(f"[folds] holdout_fold {holdout} outside [0, {k_folds})")
    out_dir = raw.get("output_dir")
    return ExperimentConfig(
        seed=seed, submodels=submodels, ensemble=ensemble, analysis=analysis,
        k_folds=k_folds, holdout_fold=None if holdout is None else int(holdout),
        fold_seed=int(folds.get("seed", seed)), query_seed=int(folds.get("query_seed", seed + 1)),
        max_k=int(raw.get("max_k", 10)), manifest=manifest, synthetic=synthetic,
        output_dir=(base_dir / out_dir) if out_dir else None,
        size_sweep=size_sweep, size_sweep_model=size_sweep_model)


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = parse_config(raw, path.parent, seed_override)
    cfg.source_path = path
    return cfg
