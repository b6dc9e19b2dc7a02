"""Binary container for models and fitted transforms, plus embedding CSV dumps.

Layout::

    magic      8 bytes   b"REIDENS\\0"
    version    uint32 LE
    header_len uint64 LE
    header     UTF-8 JSON: {"kind": ..., "meta": {...}, "arrays": [[shape], ...]}
    payload    float64 LE arrays, C order, in header order
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import IngestError
from .neural import EmbeddingModel, NetworkSpec

MAGIC = b"REIDENS\0"
VERSION = 1


def write_container(path, kind: str, meta: dict, arrays: Sequence[np.ndarray]) -> None:
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in arrays]
    header = json.dumps({"kind": kind, "meta": meta,
                         "arrays": [list(a.shape) for a in arrays]},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(a.tobytes(order="C"))


def read_container(path) -> Tuple[str, dict, List[np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise IngestError(f"{path}: not a model container (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise IngestError(f"{path}: unsupported container version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    pos = start + hlen
    arrays = []
    for shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise IngestError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
                      .reshape(shape).astype(np.float64))
        pos += nbytes
    if pos != len(raw):
        raise IngestError(f"{path}: {len(raw) - pos} trailing bytes")
    return header["kind"], header["meta"], arrays


def save_model(model: EmbeddingModel, path) -> None:
    write_container(path, "embedding_model",
                    {"spec": model.spec.to_dict(), "train_log": list(model.train_log)},
                    model.weights)


def load_model(path) -> EmbeddingModel:
    kind, meta, arrays = read_container(path)
    if kind != "embedding_model":
        raise IngestError(f"{path}: holds a {kind!r}, not an embedding model")
    spec = NetworkSpec.from_dict(meta["spec"])
    expected = spec.param_shapes()
    if [tuple(a.shape) for a in arrays] != [tuple(s) for s in expected]:
        raise IngestError(f"{path}: weight shapes do not match the stored spec")
    return EmbeddingModel(spec, arrays, list(meta.get("train_log", [])))


def dump_embeddings(path, keys: Sequence[Tuple[str, str]], embeddings: np.ndarray) -> None:
    """``subject_id,view_id,e0..e{d-1}`` with round-trippable floats."""
    embeddings = np.asarray(embeddings)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "view_id"] + [f"e{i}" for i in range(embeddings.shape[1])])
        for (sid, vid), row in zip(keys, embeddings):
            w.writerow([sid, vid] + [repr(float(v)) for v in row])


def load_embeddings(path) -> Dict[Tuple[str, str], np.ndarray]:
    out: Dict[Tuple[str, str], np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["subject_id", "view_id"]:
            raise IngestError(f"{path}: header must start with subject_id,view_id")
        d = len(header) - 2
        for row_no, row in enumerate(reader, start=1):
            if len(row) - 2 != d:
                raise IngestError(f"{path}: row {row_no} has {len(row) - 2} values, expected {d}")
            out[(row[0], row[1])] = np.array([float(v) for v in row[2:]])
    return out


def save_transform(transform, path, model_names: Sequence[str] = ()) -> None:
    """Store a fitted ``EnsembleTransform``: z-score stats, then its payload."""
    arrays: List[np.ndarray] = []
    meta = {"ensemble_kind": transform.kind, "model_names": list(model_names)}
    if transform.stats is not None:
        meta["n_models"] = len(transform.stats.means)
        meta["epsilon"] = transform.stats.epsilon
        arrays += list(transform.stats.means) + list(transform.stats.stds)
    if transform.weights is not None:
        w = transform.weights
        meta["objective"] = w.objective
        meta["baseline_objective"] = w.baseline_objective
        arrays.append(w.alphas)
    if transform.model is not None:
        meta["spec"] = transform.model.spec.to_dict()
        meta["train_log"] = list(transform.model.train_log)
        arrays += transform.model.weights
    write_container(path, "ensemble_transform", meta, arrays)


def load_transform(path):
    from .ensemble import EnsembleTransform, WeightVector, ZScoreStats

    kind, meta, arrays = read_container(path)
    if kind != "ensemble_transform":
        raise IngestError(f"{path}: holds a {kind!r}, not an ensemble transform")
    ens_kind = meta["ensemble_kind"]
    stats = weights = model = None
    rest = arrays
    if "n_models" in meta:
        m = meta["n_models"]
        stats = ZScoreStats(rest[:m], rest[m:2 * m], meta["epsilon"])
        rest = rest[2 * m:]
    if ens_kind in ("weighted_triplet", "weighted_accuracy"):
        weights = WeightVector(rest[0], meta.get("objective"), meta.get("baseline_objective"))
        rest = rest[1:]
    if ens_kind == "nn_triplet":
        model = EmbeddingModel(NetworkSpec.from_dict(meta["spec"]), list(rest),
                               list(meta.get("train_log", [])))
    return EnsembleTransform(ens_kind, stats, weights, model)
