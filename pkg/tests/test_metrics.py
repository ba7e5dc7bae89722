"""Tests for distribution distances, accuracy, and gate diagnostics."""

import csv

import numpy as np
import pytest

from suda import metrics, spectral, transformer
from suda.errors import DataError, DimensionError
from suda.rng import stream


def gaussian_cloud(seed, label, n, dim, mean=0.0, scale=1.0):
    g = stream(seed, label)
    return mean + scale * g.standard_normal((n, dim))


# ---------------------------------------------------------------------------
# MMD.
# ---------------------------------------------------------------------------

def test_mmd_identical_clouds_is_zero():
    x = gaussian_cloud(0, "x", 40, 6)
    assert metrics.mmd(x, x) <= 1e-9


def test_mmd_same_distribution_small():
    for seed in range(5):
        a = gaussian_cloud(seed, "a", 500, 4)
        b = gaussian_cloud(seed, "b", 500, 4)
        assert metrics.mmd(a, b) < 0.05


def test_mmd_separated_means_larger_every_seed():
    for seed in range(5):
        a = gaussian_cloud(seed, "a", 200, 4)
        same = gaussian_cloud(seed, "b", 200, 4)
        apart = gaussian_cloud(seed, "b", 200, 4)
        apart[:, 0] += 3.0
        assert metrics.mmd(a, apart) > metrics.mmd(a, same)


def test_mmd_symmetric():
    for seed in range(10):
        a = gaussian_cloud(seed, "a", 60, 5)
        b = gaussian_cloud(seed, "b", 45, 5, mean=0.5)
        assert abs(metrics.mmd(a, b) - metrics.mmd(b, a)) < 1e-12


def test_mmd_permutation_invariant():
    a = gaussian_cloud(3, "a", 50, 4)
    b = gaussian_cloud(3, "b", 50, 4, mean=1.0)
    perm = stream(3, "perm").permutation(50)
    assert abs(metrics.mmd(a, b) - metrics.mmd(a[perm], b[perm])) < 1e-12


def test_mmd_nonnegative_and_validation():
    a = gaussian_cloud(1, "a", 30, 3)
    b = gaussian_cloud(1, "b", 30, 3, mean=0.2)
    assert metrics.mmd(a, b) >= 0.0
    with pytest.raises(DataError):
        metrics.mmd(np.zeros((0, 3)), b)
    with pytest.raises(DataError):
        metrics.mmd(a, gaussian_cloud(1, "c", 10, 4))
    with pytest.raises(DataError):
        metrics.mmd(np.array([[np.nan, 0.0]]), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# Frechet distance.
# ---------------------------------------------------------------------------

def brute_frechet(mean_a, cov_a, mean_b, cov_b):
    """Independent route: eigendecompose the raw (non-symmetric) product."""
    eigs = np.linalg.eig(cov_a @ cov_b).eigenvalues
    cross = np.sum(np.sqrt(np.maximum(eigs.real, 0.0)))
    delta = mean_a - mean_b
    return float(delta @ delta + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)


def test_frechet_identical_clouds_zero():
    x = gaussian_cloud(0, "x", 50, 5)
    assert metrics.frechet_distance(x, x) < 1e-6


def test_frechet_analytic_identity_covs():
    dim = 7
    delta = np.arange(dim, dtype=np.float64) / 3.0
    got = metrics.frechet_from_moments(
        np.zeros(dim), np.eye(dim), delta, np.eye(dim)
    )
    assert got == pytest.approx(float(delta @ delta), abs=1e-12)


def test_frechet_matches_eigendecomposition_oracle():
    for seed in range(12):
        g = stream(seed, "fd")
        dim = 5
        base_a = g.standard_normal((dim, dim))
        base_b = g.standard_normal((dim, dim))
        cov_a = base_a @ base_a.T + 0.3 * np.eye(dim)
        cov_b = base_b @ base_b.T + 0.3 * np.eye(dim)
        mean_a = g.standard_normal(dim)
        mean_b = g.standard_normal(dim)
        got = metrics.frechet_from_moments(mean_a, cov_a, mean_b, cov_b)
        want = brute_frechet(mean_a, cov_a, mean_b, cov_b)
        assert got == pytest.approx(want, abs=1e-8)


def test_frechet_cloud_route_matches_moment_route():
    a = gaussian_cloud(2, "a", 400, 4)
    b = gaussian_cloud(2, "b", 400, 4, mean=0.7, scale=1.3)
    ridge = 1e-6 * np.eye(4)
    want = metrics.frechet_from_moments(
        a.mean(axis=0), np.cov(a, rowvar=False, ddof=1) + ridge,
        b.mean(axis=0), np.cov(b, rowvar=False, ddof=1) + ridge,
    )
    assert metrics.frechet_distance(a, b) == pytest.approx(want, rel=1e-12)


def test_frechet_symmetric_and_permutation_invariant():
    a = gaussian_cloud(4, "a", 80, 6)
    b = gaussian_cloud(4, "b", 80, 6, mean=0.4)
    fwd = metrics.frechet_distance(a, b)
    assert fwd == pytest.approx(metrics.frechet_distance(b, a), abs=1e-9)
    perm = stream(4, "perm").permutation(80)
    assert fwd == pytest.approx(metrics.frechet_distance(a[perm], b), abs=1e-9)


def test_frechet_rank_deficient_cloud_defined():
    # Fewer samples than dimensions: covariance is singular. The ridge
    # keeps the value finite, but its deficient directions land right at
    # the eigenvalue clamp, leaving a small positive floor instead of 0.
    x = gaussian_cloud(5, "x", 6, 20)
    val = metrics.frechet_distance(x, x)
    assert np.isfinite(val) and 0.0 <= val < 1e-3


def test_frechet_grows_with_mean_offset():
    a = gaussian_cloud(6, "a", 300, 5)
    near = gaussian_cloud(6, "b", 300, 5, mean=0.1)
    far = gaussian_cloud(6, "b", 300, 5, mean=2.0)
    assert metrics.frechet_distance(a, far) > metrics.frechet_distance(a, near)


def test_frechet_validation():
    x = gaussian_cloud(0, "x", 10, 3)
    with pytest.raises(DataError):
        metrics.frechet_distance(x[:1], x)
    with pytest.raises(DataError):
        metrics.frechet_distance(x, gaussian_cloud(0, "y", 10, 4))
    with pytest.raises(DimensionError):
        metrics.frechet_from_moments(np.zeros(3), np.eye(3), np.zeros(4), np.eye(4))
    with pytest.raises(DimensionError):
        metrics.frechet_from_moments(np.zeros(3), np.eye(2), np.zeros(3), np.eye(3))


# ---------------------------------------------------------------------------
# Accuracy.
# ---------------------------------------------------------------------------

def test_accuracy_all_right():
    labels = np.array([0, 1, 2, 3])
    assert metrics.accuracy(labels, labels) == 1.0


def test_accuracy_all_wrong():
    assert metrics.accuracy(np.array([1, 2, 3]), np.array([0, 0, 0])) == 0.0


def test_accuracy_half():
    preds = np.array([0, 0, 1, 1])
    labels = np.array([0, 0, 0, 0])
    assert metrics.accuracy(preds, labels) == 0.5


def test_accuracy_validation():
    with pytest.raises(DataError):
        metrics.accuracy(np.array([0, 1]), np.array([0]))
    with pytest.raises(DataError):
        metrics.accuracy(np.array([]), np.array([]))


# ---------------------------------------------------------------------------
# Gate band report.
# ---------------------------------------------------------------------------

TINY = transformer.AsaConfig(n_bands=4, n_heads=2)
MASKS = spectral.make_band_masks(8, 8, 4)


def tiny_images(seed, count):
    return stream(seed, "imgs").uniform(0.0, 1.0, size=(count, 3, 8, 8))


def test_zero_init_gate_reports_half_everywhere():
    params = transformer.SpectrumTransformerParams.zeros(TINY)
    report = metrics.gate_band_report(
        tiny_images(0, 5), params, TINY, MASKS, variant_bands=(1, 2)
    )
    assert np.allclose(report.band_means, 0.5, atol=1e-12)
    assert report.variant_mean == pytest.approx(0.5)
    assert report.invariant_mean == pytest.approx(0.5)


def test_forced_gate_pattern_reproduced_exactly():
    params = transformer.SpectrumTransformerParams.zeros(TINY)
    pattern = np.array([
        [0.1, 0.2, 0.3, 0.4],
        [0.1, 0.2, 0.3, 0.4],
        [0.1, 0.2, 0.3, 0.4],
    ])
    report = metrics.gate_band_report(
        tiny_images(1, 7), params, TINY, MASKS, variant_bands=(0, 3),
        gate_override=pattern,
    )
    assert np.allclose(report.band_means, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    assert report.variant_mean == pytest.approx((0.1 + 0.4) / 2.0)
    assert report.invariant_mean == pytest.approx((0.2 + 0.3) / 2.0)


def test_report_batching_consistent():
    params = transformer.SpectrumTransformerParams.init(TINY, seed=3)
    imgs = tiny_images(2, 9)
    a = metrics.gate_band_report(imgs, params, TINY, MASKS, (1,), batch_size=3)
    b = metrics.gate_band_report(imgs, params, TINY, MASKS, (1,), batch_size=64)
    assert np.allclose(a.band_means, b.band_means, atol=1e-12)


def test_report_rows_cover_all_bands():
    params = transformer.SpectrumTransformerParams.zeros(TINY)
    report = metrics.gate_band_report(
        tiny_images(0, 3), params, TINY, MASKS, variant_bands=(2,)
    )
    rows = report.rows()
    assert [r[0] for r in rows] == [0, 1, 2, 3]
    assert rows[2][2] == "variant" and rows[0][2] == "invariant"


def test_report_validation():
    params = transformer.SpectrumTransformerParams.zeros(TINY)
    with pytest.raises(DataError):
        metrics.gate_band_report(np.zeros((3, 8, 8)), params, TINY, MASKS, ())
    with pytest.raises(DataError):
        metrics.gate_band_report(tiny_images(0, 2), params, TINY, MASKS, (9,))


# ---------------------------------------------------------------------------
# Embedding export.
# ---------------------------------------------------------------------------

def test_export_embeddings_round_trip(tmp_path):
    a = gaussian_cloud(0, "a", 3, 4)
    b = gaussian_cloud(0, "b", 2, 4)
    path = tmp_path / "emb.csv"
    metrics.export_embeddings(path, {"source": a, "target": b})
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample_id", "domain", "f0", "f1", "f2", "f3"]
    assert len(rows) == 6
    assert [r[1] for r in rows[1:]] == ["source"] * 3 + ["target"] * 2
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3, 4]
    back = np.array([[float(v) for v in r[2:]] for r in rows[1:4]])
    assert np.array_equal(back, a)


def test_export_embeddings_validation(tmp_path):
    with pytest.raises(DataError):
        metrics.export_embeddings(tmp_path / "x.csv", {})
    with pytest.raises(DataError):
        metrics.export_embeddings(
            tmp_path / "x.csv",
            {"a": np.zeros((2, 3)), "b": np.zeros((2, 4))},
        )
