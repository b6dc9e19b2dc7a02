"""Hand-crafted per-image feature extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Sample
from .errors import IngestError, ValidationError

METHODS = ("brightness", "avg_color", "color_variance", "column_quantile",
           "raw_image", "imported")
PATCH_MODES = ("brightness", "avg_color", "color_variance")
DEFAULT_QUANTILES = (0.2, 0.5, 0.8)

# 33 x 24 patch grid at stride 8
DEFAULT_PATCH_RESIZE = (264, 200)
IMAGE_RESIZE_FULL = (400, 230)
IMAGE_RESIZE_TEST = (100, 58)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown feature method {self.method!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"{self.method} feature vector has non-finite entries")

    @property
    def dims(self) -> int:
        return int(self.values.shape[0])


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_pixels(pixels: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array, returned as float64 (unrounded)."""
    h, w = pixels.shape[:2]
    img = pixels.astype(np.float64)
    if (h, w) == (target_h, target_w):
        return img
    y0, y1, fy = _bilinear_axis(h, target_h)
    x0, x1, fx = _bilinear_axis(w, target_w)
    rows = img[y0] * (1.0 - fy)[:, None, None] + img[y1] * fy[:, None, None]
    return rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def resize_image(sample: Sample, target_w: int, target_h: int) -> Sample:
    """Resize to a fixed ``target_w x target_h`` (aspect ratio not preserved).

    Pixel centres are aligned (half-pixel convention), borders are clamped and
    the result is rounded half-up back to uint8.
    """
    if target_w < 16 or target_h < 16:
        raise ValidationError(f"resize target must be >= 16x16, got {target_w}x{target_h}")
    out = resize_pixels(sample.pixels, target_w, target_h)
    out = np.floor(np.clip(out, 0.0, 255.0) + 0.5).astype(np.uint8)
    return Sample(out, sample.subject_id, sample.view_id, sample.tag)


def patch_grid(height: int, width: int, patch: int = 16, stride: int = 8) -> Tuple[int, int]:
    """Number of (rows, cols) of patches fitting inside the image."""
    if height < patch or width < patch:
        raise ValidationError(f"image {width}x{height} smaller than one {patch}px patch")
    return (height - patch) // stride + 1, (width - patch) // stride + 1


def _stride_of(patch: int, overlap_fraction: float) -> int:
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValidationError(f"overlap_fraction must lie in [0, 1), got {overlap_fraction}")
    stride = patch * (1.0 - overlap_fraction)
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise ValidationError(f"patch {patch} with overlap {overlap_fraction} gives "
                              f"non-integer stride {stride}")
    return int(round(stride))


def patch_statistics(pixels: np.ndarray, mode: str, patch: int = 16,
                     overlap_fraction: float = 0.5) -> np.ndarray:
    if mode not in PATCH_MODES:
        raise ValidationError(f"mode must be one of {PATCH_MODES}, got {mode!r}")
    stride = _stride_of(patch, overlap_fraction)
    patch_grid(pixels.shape[0], pixels.shape[1], patch, stride)
    img = pixels.astype(np.float64)
    # (rows, cols, 3, patch, patch)
    win = sliding_window_view(img, (patch, patch), axis=(0, 1))[::stride, ::stride]
    if mode == "brightness":
        stats = win.mean(axis=(2, 3, 4))
    elif mode == "avg_color":
        stats = win.mean(axis=(3, 4))
    else:
        stats = win.std(axis=(3, 4))
    return stats.reshape(-1)


def extract_patch_features(sample: Sample, mode: str, patch: int = 16,
                           overlap_fraction: float = 0.5) -> FeatureVector:
    """Per-patch statistics over a top-left anchored grid of square patches.

    ``brightness`` yields one mean per patch, ``avg_color`` a mean per channel
    and ``color_variance`` a population standard deviation per channel.
    Values are ordered rows-outer, columns-inner, channels-innermost.
    """
    return FeatureVector(patch_statistics(sample.pixels, mode, patch, overlap_fraction), mode)


def column_quantiles(pixels: np.ndarray, quantiles: Sequence[float] = DEFAULT_QUANTILES) -> np.ndarray:
    qs = np.asarray(sorted(quantiles), dtype=np.float64)
    if qs.size == 0 or np.any(qs < 0.0) or np.any(qs > 1.0):
        raise ValidationError(f"quantiles must lie in [0, 1], got {list(quantiles)}")
    h, w, c = pixels.shape
    cols = pixels.astype(np.float64).transpose(1, 0, 2).reshape(w, h * c)
    # numpy's "linear" method is a[q*(n-1)] with linear interpolation
    out = np.quantile(cols, qs, axis=1, method="linear")  # (nq, w)
    return out.T.reshape(-1)


def extract_column_quantiles(sample: Sample,
                             quantiles: Sequence[float] = DEFAULT_QUANTILES) -> FeatureVector:
    """Quantiles of each pixel column, pooled over rows and channels."""
    return FeatureVector(column_quantiles(sample.pixels, quantiles), "column_quantile")


def image_tensor(pixels: np.ndarray) -> np.ndarray:
    """HxWx3 pixels -> flattened 3xHxW tensor scaled to [0, 1]."""
    return (pixels.astype(np.float64) / 255.0).transpose(2, 0, 1).reshape(-1)


def extract(sample: Sample, method: str, resize: Optional[Tuple[int, int]] = None,
            **options) -> FeatureVector:
    """Dispatch one extraction method on one sample.

    ``resize`` is an optional ``(width, height)`` applied before extraction.
    ``raw_image`` always resizes (to the test resolution when unset).
    """
    if method == "raw_image" and resize is None:
        resize = IMAGE_RESIZE_TEST
    pixels = sample.pixels
    if resize is not None:
        w, h = resize
        if (sample.width, sample.height) != (w, h):
            pixels = resize_image(sample, w, h).pixels
    if method in PATCH_MODES:
        values = patch_statistics(pixels, method, options.get("patch", 16),
                                  options.get("overlap_fraction", 0.5))
    elif method == "column_quantile":
        values = column_quantiles(pixels, options.get("quantiles", DEFAULT_QUANTILES))
    elif method == "raw_image":
        values = image_tensor(pixels)
    elif method == "imported":
        raise ValidationError("imported features come from import_features, not extract")
    else:
        raise ValidationError(f"unknown feature method {method!r}")
    return FeatureVector(values, method)


def extract_matrix(samples: Sequence[Sample], method: str,
                   resize: Optional[Tuple[int, int]] = None, **options) -> np.ndarray:
    """Stack ``extract`` over samples into an ``(n, dims)`` array."""
    rows = [extract(s, method, resize, **options).values for s in samples]
    if not rows:
        return np.zeros((0, 0))
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise ValidationError(
            f"{method} produced differing dims {sorted(dims)}; set a common resize target")
    return np.stack(rows)


def import_features(path, method_label: str = "imported") -> Dict[Tuple[str, str], FeatureVector]:
    """Read ``subject_id,view_id,f0,...`` rows into FeatureVectors keyed by sample key.

    ``method_label`` names the channel in reports; the vectors are tagged
    ``imported``.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"feature file not found: {path}")
    out: Dict[Tuple[str, str], FeatureVector] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["subject_id", "view_id"] or len(header) < 3:
            raise IngestError(f"{path}: header must be subject_id,view_id,f0,...")
        dims = len(header) - 2
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) - 2 != dims:
                raise IngestError(f"{path} ({method_label}): row {row_no} has {len(row) - 2} "
                                  f"values, expected {dims}")
            try:
                values = np.array([float(v) for v in row[2:]])
            except ValueError as exc:
                raise IngestError(f"{path}: row {row_no}: {exc}") from exc
            key = (row[0], row[1])
            if key in out:
                raise IngestError(f"{path}: row {row_no}: duplicate key {key}")
            out[key] = FeatureVector(values, "imported")
    return out


def join_features(samples: Sequence[Sample],
                  imported: Dict[Tuple[str, str], FeatureVector]) -> np.ndarray:
    """Align imported vectors to ``samples``; every key must match both ways."""
    known = {s.key for s in samples}
    unknown = [k for k in imported if k not in known]
    if unknown:
        raise ValidationError(f"imported features for samples absent from the dataset: {unknown[:5]}")
    missing = [s.key for s in samples if s.key not in imported]
    if missing:
        raise ValidationError(f"no imported features for samples: {missing[:5]}")
    if not samples:
        return np.zeros((0, 0))
    return np.stack([imported[s.key].values for s in samples])


def dump_features(path, keys: Iterable[Tuple[str, str]], matrix: np.ndarray,
                  prefix: str = "f") -> None:
    """Write ``subject_id,view_id,<prefix>0..`` CSV; floats keep full precision."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "view_id"] + [f"{prefix}{i}" for i in range(matrix.shape[1])])
        for (sid, vid), row in zip(keys, matrix):
            writer.writerow([sid, vid] + [repr(float(v)) for v in row])
