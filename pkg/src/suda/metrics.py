"""Distribution distances, accuracy, and gate diagnostics.

Feature clouds are plain (count, dim) float arrays. The two distances are
deliberately modest: a biased Gaussian-kernel MMD with the median
heuristic, and the Frechet distance between Gaussian moment fits. Both are
meant for tracking relative movement during training, not for publication
quality numbers on their own.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from . import transformer
from .errors import DataError, DimensionError, NumericError

_EIG_CLAMP = 1e-12
_COV_SHRINKAGE = 1e-6


def _as_cloud(x, name: str, min_count: int = 1) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be (count, dim), got shape {arr.shape}")
    if arr.shape[0] < min_count:
        raise DataError(
            f"{name} needs at least {min_count} rows, got {arr.shape[0]}"
        )
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    norms = np.sum(np.square(x), axis=1)
    sq = norms[:, None] + norms[None, :] - 2.0 * (x @ x.T)
    return np.maximum(sq, 0.0)


def mmd(a, b) -> float:
    """Gaussian-kernel maximum mean discrepancy between two clouds.

    Biased V-statistic (diagonal terms kept, so the estimate is always
    nonnegative), bandwidth set to the median pairwise distance of the
    pooled cloud, and the square root of the squared discrepancy returned.
    """
    a = _as_cloud(a, "a")
    b = _as_cloud(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DataError(
            f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    pooled = np.concatenate([a, b], axis=0)
    sq = _pairwise_sq_dists(pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    median = float(np.median(np.sqrt(sq[iu]))) if iu[0].size else 0.0
    sigma_sq = max(median * median, 1e-24)
    kernel = np.exp(-sq / (2.0 * sigma_sq))
    n = a.shape[0]
    mmd_sq = (
        kernel[:n, :n].mean()
        + kernel[n:, n:].mean()
        - 2.0 * kernel[:n, n:].mean()
    )
    return float(np.sqrt(max(mmd_sq, 0.0)))


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _psd_root(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(_symmetrize(cov))
    w = np.where(w < _EIG_CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_from_moments(mean_a, cov_a, mean_b, cov_b) -> float:
    """Frechet distance between two Gaussians given their exact moments.

    Returns ``|mean_a - mean_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^1/2)``
    with the cross square root taken through an eigendecomposition of the
    symmetrized congruence ``sqrt(cov_a) cov_b sqrt(cov_a)``. No shrinkage
    is applied here; callers with empirical covariances should regularize
    first (see :func:`frechet_distance`).
    """
    mean_a = np.asarray(mean_a, dtype=np.float64).ravel()
    mean_b = np.asarray(mean_b, dtype=np.float64).ravel()
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    dim = mean_a.shape[0]
    if mean_b.shape[0] != dim:
        raise DimensionError(
            f"mean dims differ: {dim} vs {mean_b.shape[0]}"
        )
    for name, cov in (("cov_a", cov_a), ("cov_b", cov_b)):
        if cov.shape != (dim, dim):
            raise DimensionError(f"{name} must be ({dim}, {dim}), got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise DataError(f"{name} contains non-finite entries")

    try:
        root_a = _psd_root(cov_a)
        product = _symmetrize(root_a @ _symmetrize(cov_b) @ root_a)
        eigs = np.linalg.eigvalsh(product)
    except np.linalg.LinAlgError as exc:
        scale = max(float(np.abs(cov_a).max()), float(np.abs(cov_b).max()), 1.0)
        raise NumericError(
            f"matrix square root failed to converge (covariance scale {scale:g})"
        ) from exc
    top = float(eigs[-1])
    bottom = float(eigs[0])
    if bottom < -1e-8 * max(top, 1.0):
        positive = eigs[eigs > _EIG_CLAMP]
        cond = top / float(positive.min()) if positive.size else float("inf")
        raise NumericError(
            "matrix square root produced negative spectrum "
            f"(min {bottom:g}, max {top:g}, condition {cond:g})"
        )
    eigs = np.where(eigs < _EIG_CLAMP, 0.0, eigs)
    delta = mean_a - mean_b
    value = (
        float(delta @ delta)
        + float(np.trace(cov_a))
        + float(np.trace(cov_b))
        - 2.0 * float(np.sum(np.sqrt(eigs)))
    )
    return max(value, 0.0)


def frechet_distance(a, b) -> float:
    """Frechet distance between Gaussian fits of two feature clouds.

    Sample covariances (ddof 1) get a small ridge (1e-6 on the diagonal)
    so rank-deficient clouds still yield a defined, comparable value.
    """
    a = _as_cloud(a, "a", min_count=2)
    b = _as_cloud(b, "b", min_count=2)
    if a.shape[1] != b.shape[1]:
        raise DataError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    ridge = _COV_SHRINKAGE * np.eye(dim)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1)) + ridge
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1)) + ridge
    return frechet_from_moments(a.mean(axis=0), cov_a, b.mean(axis=0), cov_b)


def accuracy(preds, labels) -> float:
    """Exact-match fraction of two equal-length label vectors."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DataError(
            f"preds {preds.shape} and labels {labels.shape} must be equal 1-D"
        )
    if preds.size == 0:
        raise DataError("empty prediction batch")
    return float(np.mean(preds == labels))


@dataclasses.dataclass(frozen=True)
class GateBandReport:
    """Per-band mean gate weights plus the variant/invariant summary."""

    band_means: np.ndarray
    variant_bands: tuple[int, ...]
    variant_mean: float
    invariant_mean: float

    def rows(self):
        """(band, mean_gate, group) tuples in band order, for CSV export."""
        variant = set(self.variant_bands)
        return [
            (b, float(self.band_means[b]),
             "variant" if b in variant else "invariant")
            for b in range(self.band_means.shape[0])
        ]


def gate_band_report(images, params, config, masks, variant_bands,
                     gate_override=None, batch_size: int = 64) -> GateBandReport:
    """Mean gate weight per band over a stack of images.

    ``variant_bands`` is the ground-truth set of shifted bands (from the
    dataset's embedded shift description); the summary compares the mean
    gate over those bands against the mean over all others. An optional
    ``gate_override`` of shape (channels, n_bands) replaces the learned
    gate, which is useful for verifying the report itself.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DataError(f"images must be (count, C, H, W), got {images.shape}")
    count = images.shape[0]
    if count < 1:
        raise DataError("need at least one image")
    n_bands = config.n_bands
    variant = tuple(sorted(set(int(b) for b in variant_bands)))
    for b in variant:
        if not 0 <= b < n_bands:
            raise DataError(f"variant band {b} outside [0, {n_bands})")

    totals = np.zeros(n_bands)
    for start in range(0, count, batch_size):
        chunk = images[start:start + batch_size]
        override = None
        if gate_override is not None:
            override = np.broadcast_to(
                np.asarray(gate_override, dtype=np.float64),
                (chunk.shape[0], transformer.CHANNELS, n_bands),
            )
        _, gate = transformer.st_apply(
            chunk, params, config, masks, gate_override=override
        )
        totals += gate.data.sum(axis=(0, 1))
    band_means = totals / (count * transformer.CHANNELS)
    invariant = [b for b in range(n_bands) if b not in set(variant)]
    variant_mean = float(band_means[list(variant)].mean()) if variant else float("nan")
    invariant_mean = float(band_means[invariant].mean()) if invariant else float("nan")
    return GateBandReport(
        band_means=band_means,
        variant_bands=variant,
        variant_mean=variant_mean,
        invariant_mean=invariant_mean,
    )


def export_embeddings(path, clouds) -> None:
    """Write feature clouds to CSV: sample_id, domain, f0..f{dim-1}.

    ``clouds`` maps a domain name to its (count, dim) array; rows keep the
    mapping's order and sample ids run consecutively across the whole file.
    """
    items = [(str(name), _as_cloud(arr, str(name))) for name, arr in clouds.items()]
    if not items:
        raise DataError("no clouds to export")
    dim = items[0][1].shape[1]
    for name, arr in items:
        if arr.shape[1] != dim:
            raise DataError(
                f"cloud {name!r} has dim {arr.shape[1]}, expected {dim}"
            )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "domain"] + [f"f{i}" for i in range(dim)])
        sample_id = 0
        for name, arr in items:
            for row in arr:
                writer.writerow([sample_id, name] + [repr(float(v)) for v in row])
                sample_id += 1
