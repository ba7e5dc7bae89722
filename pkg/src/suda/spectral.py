"""Centered 2-D DFT, radial band masks, and band decompose/recompose.

Conventions, fixed once and relied on everywhere:

- forward transform is unnormalized, inverse carries the 1/(H*W) factor;
- spectra are stored center-shifted, DC at bin (H//2, W//2);
- band masks are hard annuli, even in normalized radius, pairwise disjoint
  and covering every bin, with the DC bin in band 0.

Under these choices a constant image c maps to a single DC bin of value
c*H*W, and summing the N band components reproduces the image exactly up
to float rounding.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ConsistencyError, DimensionError, NumericError
from .imageio import write_pgm


@dataclass(frozen=True)
class Spectrum:
    """Center-shifted complex spectrum of a channels-first image."""

    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DimensionError(f"Spectrum: real {self.real.shape} vs imag {self.imag.shape}")
        if self.real.ndim != 3:
            raise DimensionError(f"Spectrum: expected channels x H x W, got {self.real.shape}")

    @property
    def shape(self):
        return self.real.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


@dataclass(frozen=True)
class BandMaskSet:
    """N disjoint binary masks partitioning the shifted frequency plane."""

    masks: np.ndarray  # (N, H, W) bool

    def __post_init__(self):
        if self.masks.ndim != 3:
            raise DimensionError(f"BandMaskSet: expected N x H x W, got {self.masks.shape}")

    def is_symmetric(self) -> bool:
        """True when every mask is conjugate-symmetric (m[-u, -v] = m[u, v]
        in unshifted coordinates), which radial masks always are."""
        cached = getattr(self, "_symmetric", None)
        if cached is None:
            un = np.fft.ifftshift(self.masks, axes=(-2, -1))
            flipped = np.roll(un[..., ::-1, ::-1], shift=(1, 1), axis=(-2, -1))
            cached = bool(np.array_equal(un, flipped))
            object.__setattr__(self, "_symmetric", cached)
        return cached

    def half_masks(self) -> np.ndarray:
        """(N, H, W//2 + 1) float masks over the unshifted rfft2 half plane."""
        cached = getattr(self, "_half_masks", None)
        if cached is None:
            un = np.fft.ifftshift(self.masks, axes=(-2, -1))
            cached = np.ascontiguousarray(
                un[..., : self.width // 2 + 1].astype(np.float64)
            )
            object.__setattr__(self, "_half_masks", cached)
        return cached

    @property
    def n_bands(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]


def _as_image_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] == 0 or arr.shape[-2] == 0:
        raise DimensionError(f"expected an image with H, W >= 1, got shape {arr.shape}")
    return arr


def _shifted_fft(arr: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(arr, axes=(-2, -1)), axes=(-2, -1))


def _inverse_from_shifted(spec: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), axes=(-2, -1))


def fft2(x) -> Spectrum:
    """Forward transform of a (C, H, W) image, center-shifted, unnormalized."""
    arr = _as_image_array(x)
    if arr.ndim != 3:
        raise DimensionError(f"fft2: expected channels x H x W, got {arr.shape}")
    spec = _shifted_fft(arr)
    return Spectrum(real=np.ascontiguousarray(spec.real),
                    imag=np.ascontiguousarray(spec.imag))


IMAG_RESIDUE_LIMIT = 1e-9


def ifft2(s: Spectrum) -> np.ndarray:
    """Inverse transform back to a real image.

    The imaginary residue of the inverse is checked against the scale of
    the result; a residue at or above 1e-9 (relative to max(1, |image|))
    means the spectrum was not conjugate-symmetric, i.e. not the spectrum
    of any real image.
    """
    spec = s.real.astype(np.complex128)
    spec += 1j * s.imag
    out = _inverse_from_shifted(spec)
    scale = max(1.0, float(np.max(np.abs(out.real))) if out.size else 0.0)
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue >= IMAG_RESIDUE_LIMIT * scale:
        raise ConsistencyError(
            f"ifft2: imaginary residue {residue:.3e} exceeds the real-image limit; "
            "the input is not the spectrum of a real image")
    return np.ascontiguousarray(out.real)


def make_band_masks(height: int, width: int, n_bands: int) -> BandMaskSet:
    """Partition the shifted frequency plane into N radial annuli.

    A bin at shifted coordinates (u, v) has normalized radius
    r = dist((u,v), center) / dist(corner, center) and goes to band
    min(floor(r*N), N-1), so each band covers an even slice of radius,
    band 0 holds DC and band N-1 reaches the corner.
    """
    if height < 1 or width < 1:
        raise DimensionError(f"make_band_masks: H, W must be >= 1, got {height}x{width}")
    cu, cv = height // 2, width // 2
    du = np.arange(height)[:, None] - cu
    dv = np.arange(width)[None, :] - cv
    dist_sq = du * du + dv * dv
    distinct = np.unique(dist_sq).size
    if not 1 <= n_bands <= distinct:
        raise ConfigError(f"make_band_masks: N must lie in [1, {distinct}] "
                          f"for a {height}x{width} grid, got {n_bands}")
    corner_sq = float(cu * cu + cv * cv)
    if corner_sq == 0.0:  # 1x1 grid, DC only
        band = np.zeros((height, width), dtype=np.int64)
    else:
        radius = np.sqrt(dist_sq.astype(np.float64) / corner_sq)
        band = np.minimum(np.floor(radius * n_bands).astype(np.int64), n_bands - 1)
    masks = band[None, :, :] == np.arange(n_bands)[:, None, None]
    return BandMaskSet(masks=masks)


def _check_mask_dims(arr: np.ndarray, masks: BandMaskSet, op: str) -> None:
    if arr.shape[-2] != masks.height or arr.shape[-1] != masks.width:
        raise DimensionError(f"{op}: image {arr.shape} vs masks "
                             f"{masks.height}x{masks.width}")


def _filter_bands(arr: np.ndarray, masks: BandMaskSet) -> np.ndarray:
    """(..., H, W) -> (..., N, H, W): per-band filtered spatial components.

    Radial masks are conjugate-symmetric, so each component of a real
    input is real; the symmetric case runs on the rfft2 half plane, which
    computes the identical values at roughly half the transform cost.
    """
    if masks.is_symmetric():
        spec = np.fft.rfft2(arr, axes=(-2, -1))
        banded = spec[..., None, :, :] * masks.half_masks()
        return np.fft.irfft2(banded, s=arr.shape[-2:], axes=(-2, -1))
    spec = _shifted_fft(arr)
    banded = spec[..., None, :, :] * masks.masks
    return np.ascontiguousarray(_inverse_from_shifted(banded).real)


def _filter_sum(arr: np.ndarray, masks: BandMaskSet) -> np.ndarray:
    """(..., N, H, W) -> (..., H, W): apply band n's filter to slice n, sum.

    This is the adjoint of :func:`_filter_bands` (each band filter is
    self-adjoint, being diagonal and real in the frequency basis).
    """
    if masks.is_symmetric():
        spec = np.fft.rfft2(arr, axes=(-2, -1))
        combined = np.sum(spec * masks.half_masks(), axis=-3)
        return np.fft.irfft2(combined, s=arr.shape[-2:], axes=(-2, -1))
    spec = _shifted_fft(arr)
    combined = np.sum(spec * masks.masks, axis=-3)
    return np.ascontiguousarray(_inverse_from_shifted(combined).real)


def decompose(x, masks: BandMaskSet) -> Tensor:
    """Split an image into N band-limited spatial components.

    Accepts (C, H, W) or any leading batch axes; the band axis is inserted
    before the two spatial axes.  Differentiable: the adjoint applies the
    same self-adjoint band filters to the incoming gradient slices.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    arr = _as_image_array(x)
    _check_mask_dims(arr, masks, "decompose")
    out = _filter_bands(arr, masks)
    return ad.custom_op([x], out, lambda g: (_filter_sum(g, masks),))


def recompose(stack, weights, gain_map=None) -> Tensor:
    """Weighted band sum: x_hat[..., c] = sum_n weights[..., c, n] * stack[..., c, n].

    ``stack`` has shape (..., C, N, H, W) and ``weights`` must match its
    leading (..., C, N) axes.  The optional ``gain_map`` multiplies
    pointwise before the band sum; it is either (H, W) or the full stack
    shape.  Built from primitive ops, so gradients flow to the stack, the
    weights, and the map.
    """
    stack = stack if isinstance(stack, Tensor) else Tensor(stack)
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    if stack.data.ndim < 4:
        raise DimensionError(f"recompose: stack must be (..., C, N, H, W), got {stack.shape}")
    lead = stack.shape[:-2]
    if weights.shape != lead:
        raise DimensionError(f"recompose: weights {weights.shape} must match "
                             f"stack leading axes {lead}")
    if not np.all(np.isfinite(weights.data)):
        raise NumericError("recompose: non-finite gain")
    full = stack.shape
    w_full = ad.expand(ad.reshape(weights, lead + (1, 1)), full)
    scaled = ad.mul(stack, w_full)
    if gain_map is not None:
        gain_map = gain_map if isinstance(gain_map, Tensor) else Tensor(gain_map)
        if not np.all(np.isfinite(gain_map.data)):
            raise NumericError("recompose: non-finite gain map")
        if gain_map.shape == full[-2:]:
            flat = ad.reshape(gain_map, (1,) * (len(full) - 2) + full[-2:])
            gain_map = ad.expand(flat, full)
        elif gain_map.shape != full:
            raise DimensionError(f"recompose: gain map {gain_map.shape} must be "
                                 f"{full[-2:]} or {full}")
        scaled = ad.mul(scaled, gain_map)
    return ad.reduce_sum(scaled, axes=len(full) - 3)


def apply_band_weights(x: np.ndarray, weights: np.ndarray, masks: BandMaskSet) -> np.ndarray:
    """Fast non-differentiable path: recompose(decompose(x), weights).

    Collapses the band sum into a single spectral multiply by the combined
    per-bin gain; used by evaluation where no gradients are needed.
    """
    arr = _as_image_array(x)
    _check_mask_dims(arr, masks, "apply_band_weights")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != arr.shape[:-2] + (masks.n_bands,):
        raise DimensionError(f"apply_band_weights: weights {weights.shape} vs "
                             f"image {arr.shape} with N={masks.n_bands}")
    if masks.is_symmetric():
        gain = np.tensordot(weights, masks.half_masks(), axes=([-1], [0]))
        spec = np.fft.rfft2(arr, axes=(-2, -1)) * gain
        return np.fft.irfft2(spec, s=arr.shape[-2:], axes=(-2, -1))
    gain = np.tensordot(weights, masks.masks.astype(np.float64), axes=([-1], [0]))
    spec = _shifted_fft(arr) * gain
    return np.ascontiguousarray(_inverse_from_shifted(spec).real)


def band_energy(x, masks: BandMaskSet) -> np.ndarray:
    """Sum of squared spectral magnitudes under each mask: (..., C, N)."""
    arr = _as_image_array(x)
    _check_mask_dims(arr, masks, "band_energy")
    spec = _shifted_fft(arr)
    power = spec.real * spec.real + spec.imag * spec.imag
    return np.tensordot(power, masks.masks.astype(np.float64), axes=([-2, -1], [-2, -1]))


def dump_band_magnitudes(x, masks: BandMaskSet, out_dir) -> list:
    """Write per-band log-magnitude spectra as 8-bit PGM files.

    One file per (band, channel), named ``band_{n}_{channel}.pgm``; all
    files share a single normalization so magnitudes are comparable.
    Returns the written paths in (band, channel) order.
    """
    arr = _as_image_array(x)
    if arr.ndim != 3:
        raise DimensionError(f"dump_band_magnitudes: expected channels x H x W, got {arr.shape}")
    _check_mask_dims(arr, masks, "dump_band_magnitudes")
    os.makedirs(out_dir, exist_ok=True)
    spec = fft2(arr)
    log_mag = np.log1p(spec.magnitude())
    peak = float(np.max(log_mag))
    norm = log_mag / peak if peak > 0 else log_mag
    paths = []
    for n in range(masks.n_bands):
        banded = norm * masks.masks[n]
        for c in range(arr.shape[0]):
            path = os.path.join(out_dir, f"band_{n}_{c}.pgm")
            write_pgm(path, banded[c])
            paths.append(path)
    return paths
