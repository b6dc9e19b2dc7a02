"""Command-line entry point: ``reident-ens {run,synth,compare,correlate,ablate}``.

Data products are written to files. Only ``compare`` prints to stdout.
Exit codes: 0 success, 1 runtime failure (or differences for ``compare``),
2 configuration or schema error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .data import generate_synthetic, load_dataset, subjects_in_order, write_manifest
from .errors import ConfigError, ReidentError
from .evaluation import correlation_matrix
from .features import import_features
from .pipeline import AnalysisConfig, EnsembleConfig, cross_validate, representation_size_sweep
from .storage import load_embeddings

log = logging.getLogger("reident_ens")

LOG_ENV = "REIDENT_ENS_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
REPORT_FORMAT = "reident-ens-report/1"


def _setup_logging() -> None:
    value = os.environ.get(LOG_ENV, "info").strip().lower()
    level = LOG_LEVELS.get(value)
    logging.basicConfig(stream=sys.stderr, level=level or logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if level is None:
        log.warning("%s=%r not in %s; using info", LOG_ENV, value, sorted(LOG_LEVELS))


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n",
                    encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_matrix_csv(path: Path, block: dict) -> None:
    names = block["names"]
    _write_csv(path, ["model"] + names,
               ([n] + [_fmt(v) for v in row] for n, row in zip(names, block["matrix"])))


def _output_dir(args, cfg: Optional[ExperimentConfig] = None) -> Path:
    out = args.out or (cfg.output_dir if cfg else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_samples(cfg: ExperimentConfig):
    if cfg.manifest is not None:
        return load_dataset(cfg.manifest)
    return generate_synthetic(**cfg.synthetic)


def _load_imported(cfg: ExperimentConfig) -> Dict[str, dict]:
    return {sm.name: import_features(sm.features_path, sm.name)
            for sm in cfg.submodels if sm.method == "imported"}


def _provenance(cfg: ExperimentConfig, samples) -> dict:
    return {
        "config": cfg.resolved(),
        "dataset": {"source": "manifest" if cfg.manifest else "synthetic",
                    "content_hash": cfg.content_hash(),
                    "n_samples": len(samples),
                    "n_subjects": len(subjects_in_order(samples))},
        "seeds": {"master": cfg.seed, "folds": cfg.fold_seed, "query": cfg.query_seed,
                  "ensemble": cfg.ensemble.seed, "ensemble_train": cfg.ensemble.train.seed,
                  "submodels": {sm.name: sm.train.seed for sm in cfg.submodels}},
    }


def _cv_kwargs(cfg: ExperimentConfig, threads: int) -> dict:
    return {"k_folds": cfg.k_folds, "holdout_fold": cfg.holdout_fold,
            "fold_seed": cfg.fold_seed, "query_seed": cfg.query_seed,
            "max_k": cfg.max_k, "threads": threads, "imported": _load_imported(cfg)}


def _write_run_manifest(out: Path, args, cfg: ExperimentConfig, files: List[str]) -> None:
    _dump_json(out / "run_manifest.json", {
        "command": args.command,
        "config_path": str(cfg.source_path) if cfg.source_path else None,
        "resolved_config": cfg.resolved(),
        "content_hash": cfg.content_hash(),
        "threads": args.threads,
        "stable_output": args.stable_output,
        "versions": {"reident_ens": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "files": sorted(files),
    })


def _write_figures(fig: Path, report, stable: bool) -> None:
    fig.mkdir(parents=True, exist_ok=True)
    rows = []
    fold_rows = []
    rel_rows = []
    for name, entry in report.methods.items():
        for k, (m, s) in enumerate(zip(entry["mean"], entry["std"]), start=1):
            rows.append([name, entry["kind"], k, _fmt(m), _fmt(s)])
        for r, curve in zip(report.rotations, entry["per_fold"]):
            fold_rows += [[name, r, k, _fmt(v)] for k, v in enumerate(curve, start=1)]
        rel = entry["relative_uncertainty"]
        rel_rows.append([name] + [_fmt(rel[key]) for key in sorted(rel)])
    _write_csv(fig / "cmc.csv", ["method", "kind", "k", "mean", "std"], rows)
    _write_csv(fig / "cmc_per_fold.csv", ["method", "rotation", "k", "accuracy"], fold_rows)
    rel_keys = sorted(next(iter(report.methods.values()))["relative_uncertainty"])
    _write_csv(fig / "relative_uncertainty.csv", ["method"] + rel_keys, rel_rows)
    if report.weights:
        names = [n for n, e in report.methods.items() if e["kind"] == "submodel"]
        _write_csv(fig / "weights.csv", ["ensemble", "rotation", "model", "alpha"],
                   ([kind, r, names[i], _fmt(a)]
                    for kind, per_rot in report.weights.items()
                    for r, alphas in zip(report.rotations, per_rot)
                    for i, a in enumerate(alphas)))
    if report.pairwise is not None:
        _write_matrix_csv(fig / "pairwise_improvement.csv", report.pairwise)
    if report.leave_one_out is not None:
        _write_csv(fig / "leave_one_out.csv", ["model", "delta_rank1"],
                   ([n, _fmt(d)] for n, d in report.leave_one_out["delta"].items()))
    if report.correlation is not None:
        _write_matrix_csv(fig / "correlation.csv", report.correlation)
    if not stable:
        _write_csv(fig / "timing.csv", ["phase", "seconds"],
                   ([k, _fmt(v)] for k, v in sorted(report.timings.items())))


def _listing(out: Path) -> List[str]:
    return [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()]


def cmd_run(args) -> int:
    cfg = load_config(_require_config(args), args.seed)
    out = _output_dir(args, cfg)
    samples = _load_samples(cfg)
    log.info("run: %d samples, %d sub-models, kinds %s", len(samples), len(cfg.submodels),
             list(cfg.ensemble.kinds))
    report = cross_validate(samples, cfg.submodels, cfg.ensemble, analysis=cfg.analysis,
                            artifacts_dir=out, **_cv_kwargs(cfg, args.threads))
    doc = {"format": REPORT_FORMAT, **_provenance(cfg, samples),
           **report.to_dict(include_timings=not args.stable_output)}
    _dump_json(out / "report.json", doc)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    _write_figures(out / "figures", report, args.stable_output)
    _write_run_manifest(out, args, cfg, _listing(out) + ["run_manifest.json"])
    log.info("run: wrote %s", out / "report.json")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(_require_config(args), args.seed)
    out = _output_dir(args, cfg)
    samples = _load_samples(cfg)
    analysis = AnalysisConfig(pairwise=True, leave_one_out=True,
                              correlation=cfg.analysis.correlation,
                              correlation_trials=cfg.analysis.correlation_trials)
    kwargs = _cv_kwargs(cfg, args.threads)
    doc = {"format": REPORT_FORMAT, **_provenance(cfg, samples)}
    if len(cfg.submodels) >= 2:
        report = cross_validate(samples, cfg.submodels, EnsembleConfig(kinds=()),
                                analysis=analysis, **kwargs)
        doc.update(report.to_dict(include_timings=not args.stable_output))
        _write_figures(out / "figures", report, args.stable_output)
    else:
        log.warning("ablate: pairwise and leave-one-out need two sub-models; skipped")
    sizes = _parse_sizes(args.sizes) if args.sizes else cfg.size_sweep
    if sizes:
        target = cfg.size_sweep_model or cfg.submodels[0].name
        sm = next(s for s in cfg.submodels if s.name == target)
        sweep = representation_size_sweep(samples, sizes, sm, **kwargs)
        doc["size_sweep"] = {"model": target,
                             "results": [{"size": s, "mean_rank1": m, "std_rank1": sd}
                                         for s, (m, sd) in sweep.items()]}
        (out / "figures").mkdir(parents=True, exist_ok=True)
        _write_csv(out / "figures" / "size_sweep.csv", ["size", "mean_rank1", "std_rank1"],
                   ([s, _fmt(m), _fmt(sd)] for s, (m, sd) in sweep.items()))
    _dump_json(out / "ablation.json", doc)
    _write_run_manifest(out, args, cfg, _listing(out) + ["run_manifest.json"])
    return 0


def _parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers, got {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise ConfigError(f"--sizes must list positive integers, got {text!r}")
    return sizes


def cmd_synth(args) -> int:
    params = {"n_subjects": args.subjects, "views_per_subject": args.views,
              "width": args.width, "height": args.height,
              "noise_sigma": args.noise, "shift_max": args.shift,
              "seed": 0 if args.seed is None else args.seed}
    if args.config:
        cfg = load_config(args.config, args.seed)
        if cfg.synthetic is None:
            raise ConfigError(f"{args.config}: dataset is not synthetic")
        params = dict(cfg.synthetic)
    out = _output_dir(args)
    samples = generate_synthetic(**params)
    manifest = write_manifest(samples, out)
    _dump_json(out / "synth_params.json", params)
    log.info("synth: %d images, manifest %s", len(samples), manifest)
    return 0


def cmd_compare(args) -> int:
    try:
        a = json.loads(Path(args.report_a).read_text(encoding="utf-8"))
        b = json.loads(Path(args.report_b).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"compare: cannot read report: {exc}", file=sys.stderr)
        return 2
    problems = []
    ma, mb = a.get("methods"), b.get("methods")
    if not isinstance(ma, dict) or not isinstance(mb, dict):
        problems.append("report lacks a 'methods' table")
    else:
        for name in sorted(set(ma) ^ set(mb)):
            problems.append(f"method {name!r} present in only one report")
        for name in sorted(set(ma) & set(mb)):
            if len(ma[name].get("mean", [])) != len(mb[name].get("mean", [])):
                problems.append(f"method {name!r}: different number of ranks")
    if problems:
        for p in problems:
            print(f"compare: schema mismatch: {p}", file=sys.stderr)
        return 2
    diffs = 0
    for name in sorted(ma):
        for k, (va, vb) in enumerate(zip(ma[name]["mean"], mb[name]["mean"]), start=1):
            if abs(va - vb) > args.tolerance:
                print(f"{name}\trank-{k}\t{va:.6f}\t{vb:.6f}\t{vb - va:+.6f}")
                diffs += 1
    return 1 if diffs else 0


def cmd_correlate(args) -> int:
    paths = [Path(p) for p in args.embeddings]
    if len(paths) < 2:
        raise ConfigError("correlate needs at least two embedding files")
    names = args.names.split(",") if args.names else [p.stem for p in paths]
    if len(names) != len(paths) or len(set(names)) != len(names):
        raise ConfigError("--names must give one distinct name per embedding file")
    out = _output_dir(args)
    dumps = [load_embeddings(p) for p in paths]
    keys = list(dumps[0])
    for name, dump in zip(names, dumps):
        if set(dump) != set(keys):
            raise ReidentError(f"embedding file for {name!r} covers a different sample set")
    embs = {n: np.vstack([d[key] for key in keys]) for n, d in zip(names, dumps)}
    seed = 0 if args.seed is None else args.seed
    _, mat = correlation_matrix(embs, args.trials, seed)
    block = {"names": names,
             "matrix": [[None if np.isnan(v) else float(v) for v in row] for row in mat]}
    _write_matrix_csv(out / "correlation.csv", block)
    _dump_json(out / "correlation.json", {"trials": args.trials, "seed": seed,
                                          "n_samples": len(keys), **block})
    return 0


def _require_config(args) -> str:
    if not args.config:
        raise ConfigError(f"{args.command} requires --config PATH")
    return args.config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (TOML)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="parallel fold rotations (default 1)")
    common.add_argument("--seed", type=int, default=None, metavar="K",
                        help="override the master seed")
    common.add_argument("--stable-output", action="store_true",
                        help="omit timings so reruns are byte-identical")

    parser = argparse.ArgumentParser(prog="reident-ens",
                                     description="Siamese sub-model ensembles for re-identification.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="cross-validated experiment from a config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and manifest")
    p.add_argument("--subjects", type=int, default=50)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--noise", type=float, default=8.0)
    p.add_argument("--shift", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", parents=[common], help="diff the accuracies of two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--tolerance", type=float, default=0.0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("correlate", parents=[common],
                       help="triplet-correlation matrix from embedding dumps")
    p.add_argument("embeddings", nargs="+", help="embedding CSV files")
    p.add_argument("--names", help="comma-separated model names (default: file stems)")
    p.add_argument("--trials", type=int, default=100_000)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("ablate", parents=[common],
                       help="pairwise-improvement, leave-one-out and size sweeps")
    p.add_argument("--sizes", help="comma-separated representation sizes to sweep")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ReidentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
