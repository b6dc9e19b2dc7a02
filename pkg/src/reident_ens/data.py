"""Dataset ingestion, synthetic corpora and subject-disjoint splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import IngestError, ValidationError

MANIFEST_HEADER = ["path", "subject_id", "view_id", "tag"]
MIN_SIDE = 16

# view jitter of the synthetic generator; pinned so regression baselines hold
SYNTH_BRIGHTNESS_RANGE = 10.0
SYNTH_TEXTURE = {
    "luminance": 2.5, "chroma": 2.5, "coarse_sigma": 2.0,
    "grain": 2.5, "grain_sigma": 0.7, "contrast_mod": 0.1, "contrast_sigma": 1.5,
}


@dataclass(frozen=True)
class Sample:
    """One RGB image of a subject.

    ``pixels`` is a ``(height, width, 3)`` uint8 array in row-major order.
    """

    pixels: np.ndarray
    subject_id: str
    view_id: str
    tag: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"pixels must be HxWx3, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValidationError(f"pixels must be uint8, got {px.dtype}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValidationError(
                f"image {self.key} is {px.shape[1]}x{px.shape[0]}, "
                f"smaller than one {MIN_SIDE}x{MIN_SIDE} patch")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def key(self):
        return (self.subject_id, self.view_id)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_subject: Dict[str, int]
    k_folds: int
    eval_fold: int
    holdout_fold: int

    def __post_init__(self):
        _check_fold_indices(self.k_folds, self.eval_fold, self.holdout_fold)

    def subjects_in(self, fold: int) -> List[str]:
        return [s for s, f in self.fold_of_subject.items() if f == fold]

    @property
    def training_folds(self) -> List[int]:
        return [f for f in range(self.k_folds)
                if f not in (self.eval_fold, self.holdout_fold)]

    def training_subjects(self) -> set:
        train = set(self.training_folds)
        return {s for s, f in self.fold_of_subject.items() if f in train}

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.k_folds
        for f in self.fold_of_subject.values():
            sizes[f] += 1
        return sizes

    def with_eval_fold(self, eval_fold: int) -> "FoldAssignment":
        return FoldAssignment(dict(self.fold_of_subject), self.k_folds,
                              eval_fold, self.holdout_fold)


@dataclass(frozen=True)
class QueryGallerySplit:
    query: List[Sample] = field(default_factory=list)
    gallery: List[Sample] = field(default_factory=list)


def _check_fold_indices(k_folds, eval_fold, holdout_fold):
    if k_folds < 3:
        raise ValidationError(
            f"k_folds must be >= 3 (eval + holdout + >= 1 training fold), got {k_folds}")
    for name, idx in (("eval_fold", eval_fold), ("holdout_fold", holdout_fold)):
        if not 0 <= idx < k_folds:
            raise ValidationError(f"{name}={idx} outside [0, {k_folds})")
    if eval_fold == holdout_fold:
        raise ValidationError(f"eval_fold and holdout_fold are both {eval_fold}")


def _decode_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def load_dataset(manifest_path) -> List[Sample]:
    """Read a ``path,subject_id,view_id,tag`` manifest into Samples.

    Relative image paths are resolved against the manifest's directory.
    Rows are 1-indexed in error messages, not counting the header.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples: List[Sample] = []
    seen = {}
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            return samples
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise IngestError(
                f"manifest header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 4:
                raise IngestError(
                    f"manifest row {row_no}: expected 4 fields, got {len(row)} "
                    "(paths containing commas are not supported)")
            rel, subject_id, view_id, tag = (c.strip() for c in row)
            path = Path(rel)
            if not path.is_absolute():
                path = root / path
            if not path.is_file():
                raise IngestError(f"manifest row {row_no}: image not found: {path}")
            try:
                pixels = _decode_rgb(path)
            except (UnidentifiedImageError, OSError) as exc:
                raise IngestError(f"manifest row {row_no}: cannot decode {path}: {exc}") from exc
            key = (subject_id, view_id)
            if key in seen:
                raise ValidationError(
                    f"manifest row {row_no}: duplicate (subject_id, view_id) {key}, "
                    f"first seen in row {seen[key]}")
            seen[key] = row_no
            try:
                samples.append(Sample(pixels, subject_id, view_id, tag))
            except ValidationError as exc:
                raise ValidationError(f"manifest row {row_no}: {exc}") from exc
    return samples


def write_manifest(samples: Sequence[Sample], out_dir, image_format: str = "png") -> Path:
    """Write samples as image files plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(MANIFEST_HEADER) + "\n")
        for s in samples:
            name = f"{s.subject_id}_{s.view_id}.{image_format}"
            if "," in name or "," in s.tag:
                raise ValidationError(f"comma in identifier or tag of sample {s.key}")
            Image.fromarray(s.pixels).save(img_dir / name)
            fh.write(f"images/{name},{s.subject_id},{s.view_id},{s.tag}\n")
    return manifest


def _unit_field(rng: np.random.Generator, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return f / max(f.std(), 1e-12)


def _subject_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    # luminance, zero-sum chroma and a contrast-modulated fine grain, each a
    # few intensity units so the sigma=8 view noise keeps subjects confusable
    p = SYNTH_TEXTURE
    lum = p["luminance"] * _unit_field(rng, (height, width), p["coarse_sigma"])
    chroma = p["chroma"] * _unit_field(rng, (height, width, 3), (p["coarse_sigma"],) * 2 + (0,))
    chroma -= chroma.mean(axis=2, keepdims=True)
    contrast = np.clip(1.0 + p["contrast_mod"] * _unit_field(rng, (height, width), p["contrast_sigma"]),
                       0.0, None)
    grain = p["grain"] * _unit_field(rng, (height, width, 3), (p["grain_sigma"],) * 2 + (0,))
    return 128.0 + lum[..., None] + chroma + contrast[..., None] * grain


def generate_synthetic(n_subjects: int, views_per_subject: int, width: int = 128,
                       height: int = 96, noise_sigma: float = 8.0, shift_max: int = 4,
                       seed: int = 0) -> List[Sample]:
    """Seeded desk-scale re-identification corpus.

    Each subject owns a smooth random colour texture; every view of it is a
    wrap-around translation by up to ``shift_max`` px per axis plus a global
    brightness offset in [-10, 10] and i.i.d. Gaussian pixel noise.
    """
    if n_subjects < 2:
        raise ValidationError(f"n_subjects must be >= 2, got {n_subjects}")
    if views_per_subject < 2:
        raise ValidationError(f"views_per_subject must be >= 2, got {views_per_subject}")
    if width < 32 or height < 32:
        raise ValidationError(f"width and height must be >= 32, got {width}x{height}")
    if noise_sigma < 0 or shift_max < 0:
        raise ValidationError("noise_sigma and shift_max must be non-negative")

    samples = []
    for s in range(n_subjects):
        tex_rng = np.random.default_rng([seed, s, 0])
        view_rng = np.random.default_rng([seed, s, 1])
        texture = _subject_texture(tex_rng, height, width)
        for v in range(views_per_subject):
            dy, dx = view_rng.integers(-shift_max, shift_max + 1, size=2)
            offset = view_rng.uniform(-SYNTH_BRIGHTNESS_RANGE, SYNTH_BRIGHTNESS_RANGE)
            img = np.roll(texture, shift=(int(dy), int(dx)), axis=(0, 1)) + offset
            if noise_sigma > 0:
                img = img + view_rng.normal(0.0, noise_sigma, size=img.shape)
            pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            samples.append(Sample(pixels, f"s{s:04d}", str(v), f"shift={dx}:{dy}"))
    return samples


def subjects_in_order(samples: Sequence[Sample]) -> List[str]:
    seen = {}
    for s in samples:
        seen.setdefault(s.subject_id, None)
    return list(seen)


def assign_folds(samples: Sequence[Sample], k_folds: int, eval_fold: int = 0,
                 holdout_fold: Optional[int] = None, seed: int = 0) -> FoldAssignment:
    """Shuffle subjects with a seeded permutation and deal them round-robin.

    ``holdout_fold`` defaults to the last fold.
    """
    if holdout_fold is None:
        holdout_fold = k_folds - 1
    _check_fold_indices(k_folds, eval_fold, holdout_fold)
    counts: Dict[str, int] = {}
    for s in samples:
        counts[s.subject_id] = counts.get(s.subject_id, 0) + 1
    single = [sid for sid, n in counts.items() if n < 2]
    if single:
        raise ValidationError(f"subjects with fewer than 2 views: {single[:5]}")
    subjects = subjects_in_order(samples)
    order = np.random.default_rng(seed).permutation(len(subjects))
    fold_of = {subjects[j]: pos % k_folds for pos, j in enumerate(order)}
    return FoldAssignment(fold_of, k_folds, eval_fold, holdout_fold)


def build_query_gallery(samples: Sequence[Sample], assignment: FoldAssignment,
                        seed: int = 0) -> QueryGallerySplit:
    """One seeded-random view per eval-fold subject is the query; the rest is gallery."""
    by_subject: Dict[str, List[Sample]] = {}
    order = {s.key: i for i, s in enumerate(samples)}
    for s in samples:
        if s.subject_id not in assignment.fold_of_subject:
            raise ValidationError(f"subject {s.subject_id!r} has no fold assignment")
        if assignment.fold_of_subject[s.subject_id] == assignment.eval_fold:
            by_subject.setdefault(s.subject_id, []).append(s)
    rng = np.random.default_rng(seed)
    chosen = set()
    query = []
    for sid, views in by_subject.items():
        if len(views) < 2:
            raise ValidationError(f"eval subject {sid!r} has a single view; cannot split")
        pick = views[int(rng.integers(len(views)))]
        chosen.add(pick.key)
        query.append(pick)
    gallery = [s for views in by_subject.values() for s in views if s.key not in chosen]
    gallery.sort(key=lambda s: order[s.key])
    return QueryGallerySplit(query, gallery)
