"""Inference products: change intensity, thresholding, binary maps.

Change intensity is 1 - cosine similarity between per-pixel feature vectors
of the two acquisitions, so identical features score 0 and anti-aligned ones
score 2. Binarization uses Rosin's unimodal corner rule by default, with Otsu
and a fixed threshold as alternatives.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import data as data_io
from .errors import InputError, ParameterError, ShapeError
from .model import FeatureMap, TeacherBundle

DEFAULT_BINS = 256


def _as_array(f) -> np.ndarray:
    if isinstance(f, FeatureMap):
        f = f.values
    if isinstance(f, torch.Tensor):
        f = f.detach().cpu().numpy()
    return np.asarray(f, dtype=np.float64)


def intensity_map(f1, f2) -> np.ndarray:
    """Per-pixel 1 - cosine distance grid for two (D, H, W) feature maps.

    Pixels where either vector is zero get intensity 1 (maximal ignorance).
    """
    a, b = _as_array(f1), _as_array(f2)
    if a.ndim == 4 and a.shape[0] == 1:
        a, b = a[0], b[0]
    if a.shape != b.shape:
        raise ShapeError(f"feature maps disagree: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ShapeError(f"expected (D, H, W) feature maps, got {a.shape}")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    dot = (a * b).sum(axis=0)
    denom = na * nb
    cos = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(1.0 - cos, 0.0, 2.0)


def make_histogram(values: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Histogram over [min, max] of the observed values.

    Inputs whose spread is below 1e-9 (constant up to rounding jitter) get a
    unit-wide range starting at the minimum, putting all mass in the first bin.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InputError("cannot histogram an empty array")
    if bins < 3:
        raise ParameterError(f"need at least 3 bins, got {bins}")
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-9:
        counts = np.zeros(bins, dtype=np.int64)
        counts[0] = v.size
        return counts, lo + np.linspace(0.0, 1.0, bins + 1)
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return counts.astype(np.int64), edges


def bin_centers(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    return 0.5 * (edges[:-1] + edges[1:])


def rosin_threshold(counts: np.ndarray, edges: np.ndarray) -> float:
    """Unimodal corner threshold.

    Draws the line from the histogram peak (first max-count bin) to the last
    non-empty bin and returns the center of the bin between them with maximal
    perpendicular distance to that line; ties go to the larger bin index. When
    the peak is the last non-empty bin the histogram is degenerate and the
    peak bin's upper edge is returned with a warning.

    Distances are measured after mapping the peak-to-tail span onto the unit
    square (so the corner does not depend on the absolute pixel count or the
    intensity units); in those coordinates the line is the diagonal and the
    perpendicular distance is |u - v| / sqrt(2). If every candidate bin holds
    the same count as the peak the vertical deviation is used instead.
    Comparisons use exact rational arithmetic, so ties are decided exactly
    regardless of float rounding.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size < 3:
        raise ParameterError(f"need >= 3 bins, got {counts.size}")
    if counts.sum() <= 0:
        raise InputError("histogram is empty")
    centers = bin_centers(edges)
    peak = int(np.argmax(counts))
    last = int(np.flatnonzero(counts)[-1])
    if last <= peak:
        warnings.warn("degenerate histogram: peak is the last non-empty bin; "
                      "returning the peak bin's upper edge", stacklevel=2)
        return float(edges[peak + 1])
    x = [Fraction(float(v)) for v in centers]
    y = [Fraction(float(v)) for v in counts]
    dx, dy = x[last] - x[peak], y[last] - y[peak]
    best_i, best_d = peak, Fraction(-1)
    for i in range(peak, last + 1):
        if dy != 0:
            u = (x[i] - x[peak]) / dx
            v = (y[i] - y[peak]) / dy
            d = abs(u - v)
        else:
            d = y[peak] - y[i]
        if d >= best_d:  # ties resolve toward the larger index
            best_i, best_d = i, d
    return float(centers[best_i])


def otsu_threshold(counts: np.ndarray, edges: np.ndarray) -> float:
    """Bin edge maximizing between-class variance.

    Scans every split boundary with exact rational arithmetic; among tied
    maxima the middle boundary is returned (floor on even ties, so adjacent
    ties resolve to the lower one).
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.count_nonzero(counts) < 2:
        raise InputError("Otsu needs at least two non-empty bins")
    centers = bin_centers(edges)
    x = [Fraction(float(v)) for v in centers]
    c = [Fraction(float(v)) for v in counts]
    n_total = sum(c)
    s_total = sum(ci * xi for ci, xi in zip(c, x))
    n0 = Fraction(0)
    s0 = Fraction(0)
    best_score = None
    ties: list[int] = []
    for k in range(len(c) - 1):
        n0 += c[k]
        s0 += c[k] * x[k]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        score = (s0 * n1 - (s_total - s0) * n0) ** 2 / (n0 * n1)
        if best_score is None or score > best_score:
            best_score, ties = score, [k]
        elif score == best_score:
            ties.append(k)
    k = ties[(len(ties) - 1) // 2]
    return float(edges[k + 1])


def pick_threshold(counts: np.ndarray, edges: np.ndarray, method: str,
                   fixed: float | None = None) -> float:
    if method == "rosin":
        return rosin_threshold(counts, edges)
    if method == "otsu":
        return otsu_threshold(counts, edges)
    if method == "fixed":
        if fixed is None:
            raise ParameterError("fixed method requires an explicit threshold")
        return float(fixed)
    raise ParameterError(f"unknown threshold method {method!r}")


@dataclass
class ChangeProduct:
    intensity: np.ndarray              # (H, W) in [0, 2]
    threshold: float
    method: str
    binary: np.ndarray                 # (H, W) bool, intensity > threshold
    logvar: np.ndarray | None = None   # (H, W), student runs only
    histogram: tuple[np.ndarray, np.ndarray] | None = None


def _prep_batch(image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got {arr.shape}")
    return torch.from_numpy(arr)[None]


def make_change_product(bundle, image_m: np.ndarray, image_n: np.ndarray,
                        method: str = "rosin", fixed_threshold: float | None = None,
                        gate_uncertainty: bool | None = None,
                        feature_source: str = "backbone",
                        bins: int = DEFAULT_BINS) -> ChangeProduct:
    """Run the full inference path: features, intensity, threshold, binary map.

    bundle is a TeacherBundle or StudentBundle (or a checkpoint path). With a
    student bundle the per-pixel log-variance map is attached and, unless
    gate_uncertainty is False, pixels whose log-variance exceeds the Rosin
    threshold of its own histogram have their intensity attenuated by
    exp(-(s - s_thresh)) before thresholding.
    """
    if isinstance(bundle, (str, Path)):
        from .model import load_checkpoint
        bundle = load_checkpoint(bundle)
    if np.asarray(image_m).shape != np.asarray(image_n).shape:
        raise ShapeError(f"bi-temporal pair disagrees: "
                         f"{np.asarray(image_m).shape} vs {np.asarray(image_n).shape}")
    x_m, x_n = _prep_batch(image_m), _prep_batch(image_n)

    logvar = None
    if isinstance(bundle, TeacherBundle):
        f_m = bundle.features(x_m, source=feature_source)
        f_n = bundle.features(x_n, source=feature_source)
        if gate_uncertainty is None:
            gate_uncertainty = False
        if gate_uncertainty:
            raise ParameterError("uncertainty gating requires a student checkpoint")
    else:
        f_m, _ = bundle.features(x_m)
        f_n, logvar_t = bundle.features(x_n)
        logvar = logvar_t[0, 0].numpy()
        if gate_uncertainty is None:
            gate_uncertainty = True

    inten = intensity_map(f_m, f_n)
    if gate_uncertainty and logvar is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s_counts, s_edges = make_histogram(logvar, bins)
            s_thresh = rosin_threshold(s_counts, s_edges)
        unreliable = logvar > s_thresh
        inten = np.where(unreliable, inten * np.exp(-(logvar - s_thresh)), inten)

    counts, hist_edges = make_histogram(inten, bins)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        threshold = pick_threshold(counts, hist_edges, method, fixed_threshold)
    return ChangeProduct(intensity=inten, threshold=threshold, method=method,
                         binary=inten > threshold, logvar=logvar,
                         histogram=(counts, hist_edges))


def save_product(product: ChangeProduct, outdir) -> None:
    """Write rasters plus the sidecar text report and JSON summary."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    data_io.save_raster(product.intensity.astype(np.float32), out / "intensity.ckr")
    data_io.save_raster(product.binary.astype(np.uint8), out / "binary.ckr")
    if product.logvar is not None:
        data_io.save_raster(product.logvar.astype(np.float32), out / "logvar.ckr")

    counts, edges = product.histogram if product.histogram is not None else (None, None)
    summary = {
        "method": product.method,
        "threshold": product.threshold,
        "changed_fraction": float(product.binary.mean()),
        "intensity_min": float(product.intensity.min()),
        "intensity_max": float(product.intensity.max()),
        "intensity_mean": float(product.intensity.mean()),
        "has_logvar": product.logvar is not None,
    }
    if counts is not None:
        summary["histogram_bins"] = int(counts.size)
        summary["histogram_peak_bin"] = int(np.argmax(counts))
        summary["histogram_mass"] = int(counts.sum())
    (out / "summary.json").write_text(json.dumps(summary, indent=2))

    lines = ["change product report",
             f"method: {summary['method']}",
             f"threshold: {summary['threshold']:.6g}",
             f"changed fraction: {summary['changed_fraction']:.4f}",
             f"intensity range: [{summary['intensity_min']:.4g}, "
             f"{summary['intensity_max']:.4g}], mean {summary['intensity_mean']:.4g}"]
    if counts is not None:
        lines.append(f"histogram: {summary['histogram_bins']} bins, "
                     f"peak bin {summary['histogram_peak_bin']}, "
                     f"mass {summary['histogram_mass']}")
    lines.append(f"log-variance map: {'yes' if product.logvar is not None else 'no'}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
