"""Metric harness: Frechet feature-distribution distance, perceptual patch
similarity over pluggable extractors, and mask-localization IoU.

Absolute values from full-scale pretrained extractors are out of scope;
formulas are implemented exactly and verified on toy extractors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .features import FeatureExtractor
from .images import ActivationMask, Image, ShapeError

EIG_CLIP_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit of a feature set."""

    mean: np.ndarray  # [F]
    covariance: np.ndarray  # [F, F]
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"inconsistent stats shapes: {mean.shape}, {cov.shape}")
        if self.count < 2:
            raise ValueError("need at least 2 samples")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", (cov + cov.T) / 2.0)

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        """[n, F] sample matrix -> Gaussian fit (Bessel-corrected covariance)."""
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"need [n>=2, F] features, got {arr.shape}")
        return cls(arr.mean(axis=0), np.cov(arr, rowvar=False, ddof=1), arr.shape[0])


def _clipped_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    if vals.min() < -EIG_CLIP_TOLERANCE:
        raise ValueError(f"matrix indefinite beyond tolerance: min eig {vals.min()}")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross square root uses the symmetric form
    (S_a S_b)^{1/2} ~ (sqrt(S_a) S_b sqrt(S_a))^{1/2}, computed by
    eigendecomposition with small negative eigenvalues clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    vals_a, vecs_a = _clipped_eigh(a.covariance)
    sqrt_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    inner = sqrt_a @ b.covariance @ sqrt_a
    vals_cross, _ = _clipped_eigh(inner)
    tr_cross = np.sqrt(vals_cross).sum()
    return float(
        diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_cross
    )


def perceptual_similarity(a: Image, b: Image, extractor: FeatureExtractor) -> float:
    """RMS feature difference averaged over the extractor's tap layers.

    Zero iff the tap features agree; with an identity extractor this is the
    RMS pixel distance.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shapes differ: {a.data.shape} vs {b.data.shape}")
    ta = a.to_tensor().unsqueeze(0)
    tb = b.to_tensor().unsqueeze(0)
    with torch.no_grad():
        taps_a = extractor.taps(ta)
        taps_b = extractor.taps(tb)
    dists = [
        torch.sqrt(torch.mean((fa - fb) ** 2)).item() for fa, fb in zip(taps_a, taps_b)
    ]
    return float(np.mean(dists))


def mask_iou(pred: ActivationMask, truth: ActivationMask, threshold: float = 0.5) -> float:
    """IoU of the thresholded masks; 1.0 when both threshold to empty."""
    if pred.data.shape != truth.data.shape:
        raise ShapeError(f"shapes differ: {pred.data.shape} vs {truth.data.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    p = pred.data >= threshold
    t = truth.data >= threshold
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def embed_images(images: list[Image], extractor: FeatureExtractor) -> np.ndarray:
    """[n, F] pooled embeddings for distribution metrics."""
    batch = torch.stack([im.to_tensor() for im in images])
    with torch.no_grad():
        emb = extractor.embed(batch)
    return emb.numpy().astype(np.float64)


def write_metric_report(
    path, metric: str, value: float, dataset_ids: list[str], extractor_id: str
) -> dict:
    """Structured-text metric record; returns the written document."""
    doc = {
        "metric": metric,
        "value": value,
        "dataset_ids": dataset_ids,
        "extractor_id": extractor_id,
    }
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc
