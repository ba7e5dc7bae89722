"""Synthetic two-domain image benchmark with frequency-localized domain shift.

Images are small RGB squares built from four class-structured pattern
families (oriented bars, checkerboards, concentric rings, blob clusters).
The source domain ships the patterns untouched; the target domain adds a
perturbation synthesized directly inside a chosen set of radial frequency
bands, so the set of domain-variant bands is known exactly and can be used
as ground truth by the evaluation code.

Source and target samples with the same index share the same base image
(both are drawn from the same per-index random stream), which makes the
band-energy difference between the domains equal to the injected shift
alone. The final [0, 1] clamp can leak a little energy across bands, so
generation can be run with ``clamp=False`` where exactness matters.
"""

from __future__ import annotations

import dataclasses
import math
import struct

import numpy as np

from . import rng, spectral
from .errors import ConfigError, DataError, FormatError

_MAGIC = b"SUDADATA"
_VERSION = 1
_CHANNELS = 3

# Base-image composition constants. Patterns are peak-normalized and zero
# mean, so source pixels stay inside [0, 1] except for rare noise tails.
_PATTERN_CONTRAST = 0.32
_BASE_NOISE = 0.02
_N_FAMILIES = 4


@dataclasses.dataclass(frozen=True)
class DomainShiftSpec:
    """Description of the target-domain perturbation.

    Three additive components, each confined to its own set of radial
    frequency bands, plus a per-channel brightness offset (which only
    touches the band containing the zero-frequency bin):

    * ``illumination``: one smooth field shared by all three channels.
    * ``texture``: one mid-frequency field with per-channel gains.
    * ``noise``: independent per-channel high-frequency noise.

    Band fields are synthesized at unit RMS and scaled by their amplitude,
    so amplitudes are in pixel-value units.

    Every target image additionally draws one severity factor, uniform on
    ``[severity_min, severity_max]``, that multiplies all three components
    and the channel offset together. Coupling the components through a
    single per-image draw mimics haze-like degradations, where stronger
    brightening comes with stronger texture wash-out and sensor noise: the
    visible brightness shift of an image predicts how badly its mid and
    high bands were disturbed, so an input-conditioned band re-weighting
    can out-perform any fixed one.
    """

    illumination_bands: tuple[int, ...] = (0, 1)
    illumination_amp: float = 0.18
    texture_bands: tuple[int, ...] = (12, 13, 14, 15)
    texture_amp: float = 0.22
    noise_bands: tuple[int, ...] = (28, 29, 30, 31)
    noise_amp: float = 0.16
    channel_offset: tuple[float, float, float] = (0.10, -0.02, -0.08)
    severity_min: float = 0.6
    severity_max: float = 1.5

    def __post_init__(self) -> None:
        for name in ("illumination_bands", "texture_bands", "noise_bands"):
            bands = getattr(self, name)
            object.__setattr__(self, name, tuple(int(b) for b in bands))
            for b in getattr(self, name):
                if b < 0:
                    raise ConfigError(f"{name} contains negative index {b}")
        for name in ("illumination_amp", "texture_amp", "noise_amp"):
            amp = float(getattr(self, name))
            object.__setattr__(self, name, amp)
            if not math.isfinite(amp) or amp < 0.0:
                raise ConfigError(f"{name} must be finite and >= 0, got {amp}")
        off = tuple(float(v) for v in self.channel_offset)
        if len(off) != _CHANNELS:
            raise ConfigError(
                f"channel_offset needs {_CHANNELS} entries, got {len(off)}"
            )
        if not all(math.isfinite(v) for v in off):
            raise ConfigError(f"channel_offset must be finite, got {off}")
        object.__setattr__(self, "channel_offset", off)
        lo, hi = float(self.severity_min), float(self.severity_max)
        object.__setattr__(self, "severity_min", lo)
        object.__setattr__(self, "severity_max", hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ConfigError(f"severity range must be finite, got [{lo}, {hi}]")
        if lo < 0.0 or hi < lo:
            raise ConfigError(
                f"severity range needs 0 <= min <= max, got [{lo}, {hi}]"
            )

    def perturbed_bands(self) -> tuple[int, ...]:
        """Sorted union of every band this spec touches.

        A nonzero channel offset shifts the image mean, which lives in the
        zero-frequency bin, hence in band 0.
        """
        bands: set[int] = set()
        if self.illumination_amp > 0.0:
            bands.update(self.illumination_bands)
        if self.texture_amp > 0.0:
            bands.update(self.texture_bands)
        if self.noise_amp > 0.0:
            bands.update(self.noise_bands)
        if any(v != 0.0 for v in self.channel_offset):
            bands.add(0)
        return tuple(sorted(bands))

    def scaled(self, factor: float) -> "DomainShiftSpec":
        """Return a copy with all amplitudes and offsets multiplied.

        The severity range is relative and stays put; scaling acts on the
        base amplitudes it multiplies.
        """
        factor = float(factor)
        if not math.isfinite(factor) or factor < 0.0:
            raise ConfigError(f"scale factor must be finite and >= 0, got {factor}")
        return dataclasses.replace(
            self,
            illumination_amp=self.illumination_amp * factor,
            texture_amp=self.texture_amp * factor,
            noise_amp=self.noise_amp * factor,
            channel_offset=tuple(v * factor for v in self.channel_offset),
        )

    def is_zero(self) -> bool:
        return (
            self.illumination_amp == 0.0
            and self.texture_amp == 0.0
            and self.noise_amp == 0.0
            and all(v == 0.0 for v in self.channel_offset)
        )


@dataclasses.dataclass
class Dataset:
    """In-memory dataset: float32 images, optional labels, provenance.

    ``perturbed_bands`` is empty for source datasets and records the
    ground-truth domain-variant bands for target datasets. Evaluation code
    may read it; the training loop never does.
    """

    images: np.ndarray
    labels: np.ndarray | None
    seed: int
    perturbed_bands: tuple[int, ...]

    def __post_init__(self) -> None:
        img = np.asarray(self.images)
        if img.ndim != 4 or img.shape[1] != _CHANNELS:
            raise DataError(
                f"images must be (count, {_CHANNELS}, H, W), got {img.shape}"
            )
        if img.dtype != np.float32:
            img = img.astype(np.float32)
        self.images = img
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (img.shape[0],):
                raise DataError(
                    f"labels must be ({img.shape[0]},), got {lab.shape}"
                )
            self.labels = lab.astype(np.int64)
        self.perturbed_bands = tuple(int(b) for b in self.perturbed_bands)
        self.seed = int(self.seed)

    @property
    def count(self) -> int:
        return int(self.images.shape[0])

    @property
    def height(self) -> int:
        return int(self.images.shape[2])

    @property
    def width(self) -> int:
        return int(self.images.shape[3])

    def without_labels(self) -> "Dataset":
        """Copy of this dataset with labels stripped (for target training)."""
        return Dataset(
            images=self.images,
            labels=None,
            seed=self.seed,
            perturbed_bands=self.perturbed_bands,
        )


def _centered_fft2(field: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(field, axes=(-2, -1)), axes=(-2, -1))


def _centered_ifft2(spec: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), axes=(-2, -1)).real


def _band_union(masks: spectral.BandMaskSet, bands: tuple[int, ...]) -> np.ndarray:
    union = np.zeros((masks.height, masks.width), dtype=bool)
    for b in bands:
        union |= masks.masks[b]
    return union


def _bandpass_unit_rms(field: np.ndarray, union: np.ndarray) -> np.ndarray:
    """Keep only the frequencies under ``union`` and normalize to unit RMS."""
    out = _centered_ifft2(_centered_fft2(field) * union)
    rms = np.sqrt(np.mean(np.square(out), axis=(-2, -1), keepdims=True))
    return out / np.maximum(rms, 1e-12)


def _base_pattern(class_id: int, class_count: int, gen: np.random.Generator,
                  size: int) -> np.ndarray:
    """Zero-mean, peak-one grayscale pattern for one class instance.

    The four families are assigned round-robin over class ids; classes past
    the first four reuse a family at a slightly higher carrier frequency.
    All carriers sit around 3 to 6 cycles per image, comfortably between
    the default illumination bands and the default texture bands.
    """
    del class_count
    family = class_id % _N_FAMILIES
    tier = min(class_id // _N_FAMILIES, 2)
    bump = 0.7 * tier
    cols = (np.arange(size) - size / 2.0) / size
    u = cols[None, :]
    v = cols[:, None]

    if family == 0:
        # Oriented bars: a single plane wave.
        theta = gen.uniform(0.0, math.pi)
        phase = gen.uniform(0.0, 2.0 * math.pi)
        freq = gen.uniform(3.0, 5.0) + bump
        t = u * math.cos(theta) + v * math.sin(theta)
        pattern = np.cos(2.0 * math.pi * freq * t + phase)
    elif family == 1:
        # Checkerboard: product of two axis-aligned waves.
        phase_u = gen.uniform(0.0, 2.0 * math.pi)
        phase_v = gen.uniform(0.0, 2.0 * math.pi)
        freq_u = gen.uniform(3.0, 4.5) + bump
        freq_v = gen.uniform(3.0, 4.5) + bump
        pattern = np.cos(2.0 * math.pi * freq_u * u + phase_u) * np.cos(
            2.0 * math.pi * freq_v * v + phase_v
        )
    elif family == 2:
        # Concentric rings around a jittered center.
        cx = gen.uniform(-0.12, 0.12)
        cy = gen.uniform(-0.12, 0.12)
        phase = gen.uniform(0.0, 2.0 * math.pi)
        freq = gen.uniform(3.5, 5.5) + bump
        r = np.sqrt(np.square(u - cx) + np.square(v - cy))
        pattern = np.cos(2.0 * math.pi * freq * r + phase)
    else:
        # Blob cluster: difference-of-Gaussian bumps, which keeps the
        # spectrum off the lowest bands without reaching the noise bands.
        n_blobs = 3
        centers = gen.uniform(-0.35, 0.35, size=(n_blobs, 2))
        signs = np.where(gen.uniform(size=n_blobs) < 0.5, -1.0, 1.0)
        sigma1 = (1.3 + 0.25 * tier) / size
        sigma2 = 2.0 * sigma1
        pattern = np.zeros((size, size))
        for k in range(n_blobs):
            d2 = np.square(u - centers[k, 0]) + np.square(v - centers[k, 1])
            pattern += signs[k] * (
                np.exp(-d2 / (2.0 * sigma1 * sigma1))
                - np.exp(-d2 / (2.0 * sigma2 * sigma2))
            )

    pattern = pattern - pattern.mean()
    peak = np.max(np.abs(pattern))
    return pattern / max(peak, 1e-12)


def _base_image(class_id: int, class_count: int, gen: np.random.Generator,
                size: int) -> np.ndarray:
    """Gray background plus a tinted class pattern and faint pixel noise."""
    pattern = _base_pattern(class_id, class_count, gen, size)
    tint = gen.uniform(0.6, 1.0, size=_CHANNELS)
    noise = gen.standard_normal((_CHANNELS, size, size))
    img = 0.5 + _PATTERN_CONTRAST * tint[:, None, None] * pattern[None, :, :]
    return img + _BASE_NOISE * noise


def _perturbation(gen: np.random.Generator, shift: DomainShiftSpec,
                  unions: dict[str, np.ndarray], size: int) -> np.ndarray:
    """Additive target-domain shift, built strictly inside the spec's bands.

    Draws come from ``gen`` in a fixed order (severity, illumination field,
    texture field and gains, noise field); zero-amplitude components are
    skipped entirely so a fully zero spec leaves the base image untouched.
    """
    severity = gen.uniform(shift.severity_min, shift.severity_max)
    pert = np.zeros((_CHANNELS, size, size))
    if shift.illumination_amp > 0.0 and shift.illumination_bands:
        field = _bandpass_unit_rms(
            gen.standard_normal((size, size)), unions["illumination"]
        )
        pert += shift.illumination_amp * field[None, :, :]
    if shift.texture_amp > 0.0 and shift.texture_bands:
        field = _bandpass_unit_rms(
            gen.standard_normal((size, size)), unions["texture"]
        )
        gains = gen.uniform(0.6, 1.4, size=_CHANNELS)
        pert += shift.texture_amp * gains[:, None, None] * field[None, :, :]
    if shift.noise_amp > 0.0 and shift.noise_bands:
        fields = _bandpass_unit_rms(
            gen.standard_normal((_CHANNELS, size, size)), unions["noise"]
        )
        pert += shift.noise_amp * fields
    offset = np.asarray(shift.channel_offset)
    if np.any(offset != 0.0):
        pert += offset[:, None, None]
    return severity * pert


def _check_bands(shift: DomainShiftSpec, n_bands: int) -> None:
    for name in ("illumination_bands", "texture_bands", "noise_bands"):
        for b in getattr(shift, name):
            if not 0 <= b < n_bands:
                raise ConfigError(
                    f"{name} index {b} outside [0, {n_bands}) for this mask set"
                )


def generate(class_count: int, source_count: int, target_count: int,
             image_size: int, shift: DomainShiftSpec, seed: int, *,
             n_bands: int = 32, index_offset: int = 0,
             clamp: bool = True) -> tuple[Dataset, Dataset]:
    """Build one source/target dataset pair.

    Sample ``i`` of both domains shares a base image drawn from the stream
    named ``base.<index_offset + i>``; the target adds the shift from the
    stream ``shift.<index_offset + i>``. Labels follow the global index
    modulo ``class_count``, so class priors match across domains exactly
    whenever the counts are multiples of ``class_count``. The returned
    target dataset carries its held-out labels; strip them with
    ``Dataset.without_labels()`` before handing it to a training loop.

    ``index_offset`` lets separate calls (train and eval splits, say) use
    disjoint per-sample streams under one seed. ``clamp=False`` skips the
    final [0, 1] clip for diagnostics that need exact band containment.
    """
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    if source_count < 1 or target_count < 1:
        raise ConfigError(
            f"counts must be >= 1, got {source_count} and {target_count}"
        )
    if image_size < 4:
        raise ConfigError(f"image_size must be >= 4, got {image_size}")
    if index_offset < 0:
        raise ConfigError(f"index_offset must be >= 0, got {index_offset}")
    masks = spectral.make_band_masks(image_size, image_size, n_bands)
    _check_bands(shift, n_bands)
    unions = {
        "illumination": _band_union(masks, shift.illumination_bands),
        "texture": _band_union(masks, shift.texture_bands),
        "noise": _band_union(masks, shift.noise_bands),
    }
    apply_shift = not shift.is_zero()

    n_pairs = max(source_count, target_count)
    src = np.empty((source_count, _CHANNELS, image_size, image_size))
    tgt = np.empty((target_count, _CHANNELS, image_size, image_size))
    labels = np.empty(n_pairs, dtype=np.int64)
    for i in range(n_pairs):
        gidx = index_offset + i
        labels[i] = gidx % class_count
        base = _base_image(
            int(labels[i]), class_count,
            rng.stream(seed, f"base.{gidx}"), image_size,
        )
        if i < source_count:
            src[i] = base
        if i < target_count:
            if apply_shift:
                pert = _perturbation(
                    rng.stream(seed, f"shift.{gidx}"), shift, unions, image_size
                )
                tgt[i] = base + pert
            else:
                tgt[i] = base

    if clamp:
        np.clip(src, 0.0, 1.0, out=src)
        np.clip(tgt, 0.0, 1.0, out=tgt)
    source = Dataset(
        images=src.astype(np.float32),
        labels=labels[:source_count].copy(),
        seed=seed,
        perturbed_bands=(),
    )
    target = Dataset(
        images=tgt.astype(np.float32),
        labels=labels[:target_count].copy(),
        seed=seed,
        perturbed_bands=shift.perturbed_bands() if apply_shift else (),
    )
    return source, target


# ---------------------------------------------------------------------------
# Binary dataset files.
#
# Little-endian layout:
#   magic "SUDADATA" (8 bytes), u16 version = 1, u32 count, u16 H, u16 W,
#   u16 C = 3, u8 has_labels, u64 seed, u16 perturbed-band count followed by
#   that many u16 band indices, count*C*H*W float32 pixels, and, when
#   has_labels is set, count u16 labels.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sHIHHHBQ")


def save_dataset(path, dataset: Dataset) -> None:
    """Write ``dataset`` to ``path`` in the binary format above."""
    img = dataset.images
    if not np.all(np.isfinite(img)):
        raise DataError("refusing to save non-finite pixels")
    if dataset.labels is not None:
        lab = dataset.labels
        if np.any(lab < 0) or np.any(lab >= 1 << 16):
            raise DataError("labels must fit in u16")
    bands = tuple(sorted(set(dataset.perturbed_bands)))
    if bands and (bands[0] < 0 or bands[-1] >= 1 << 16):
        raise DataError("perturbed band indices must fit in u16")
    count, _, height, width = img.shape
    parts = [
        _HEADER.pack(
            _MAGIC, _VERSION, count, height, width, _CHANNELS,
            1 if dataset.labels is not None else 0, dataset.seed,
        ),
        struct.pack(f"<H{len(bands)}H", len(bands), *bands),
        np.ascontiguousarray(img, dtype="<f4").tobytes(),
    ]
    if dataset.labels is not None:
        parts.append(dataset.labels.astype("<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _need(data: bytes, cursor: int, nbytes: int, what: str) -> None:
    if cursor + nbytes > len(data):
        raise FormatError(f"truncated dataset file while reading {what}",
                          offset=len(data))


def load_dataset(path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`.

    Raises :class:`FormatError` (with a byte offset) on bad magic, version,
    truncation, or trailing bytes; nothing partial is ever returned.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    cursor = 0
    _need(data, cursor, _HEADER.size, "header")
    magic, version, count, height, width, channels, has_labels, seed = (
        _HEADER.unpack_from(data, cursor)
    )
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    if channels != _CHANNELS:
        raise FormatError(f"unsupported channel count {channels}", offset=18)
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels must be 0 or 1, got {has_labels}",
                          offset=20)
    if count < 1 or height < 1 or width < 1:
        raise FormatError(
            f"bad dimensions count={count} H={height} W={width}", offset=10
        )
    cursor = _HEADER.size
    _need(data, cursor, 2, "band count")
    (n_bands,) = struct.unpack_from("<H", data, cursor)
    cursor += 2
    _need(data, cursor, 2 * n_bands, "band indices")
    bands = struct.unpack_from(f"<{n_bands}H", data, cursor)
    cursor += 2 * n_bands
    n_pix = count * _CHANNELS * height * width
    _need(data, cursor, 4 * n_pix, "pixels")
    images = (
        np.frombuffer(data, dtype="<f4", count=n_pix, offset=cursor)
        .reshape(count, _CHANNELS, height, width)
        .copy()
    )
    cursor += 4 * n_pix
    labels = None
    if has_labels:
        _need(data, cursor, 2 * count, "labels")
        labels = (
            np.frombuffer(data, dtype="<u2", count=count, offset=cursor)
            .astype(np.int64)
        )
        cursor += 2 * count
    if cursor != len(data):
        raise FormatError(
            f"{len(data) - cursor} trailing bytes after dataset", offset=cursor
        )
    if not np.all(np.isfinite(images)):
        raise DataError(f"non-finite pixels in {path}")
    return Dataset(images=images, labels=labels, seed=seed,
                   perturbed_bands=tuple(int(b) for b in bands))


# ---------------------------------------------------------------------------
# Domain probe.
# ---------------------------------------------------------------------------

_PROBE_BANDS = 8


def _probe_features(images: np.ndarray) -> np.ndarray:
    """Spectral summary of each image: channel means + log band energies.

    A fixed radial split into (at most) eight bands per channel turns
    energy-level differences, which have no fixed pixel-space direction
    and are invisible to any linear map of raw pixels, into plain feature
    shifts a linear classifier can pick up.
    """
    arr = np.asarray(images, dtype=np.float64)
    n, _, height, width = arr.shape
    masks = spectral.make_band_masks(
        height, width, min(_PROBE_BANDS, height, width)
    )
    energies = spectral.band_energy(arr, masks).reshape(n, -1)
    means = arr.mean(axis=(-2, -1))
    return np.concatenate([means, np.log(energies + 1e-12)], axis=1)


def domain_probe_accuracy(source_images: np.ndarray,
                          target_images: np.ndarray, seed: int = 0, *,
                          train_fraction: float = 0.5, iterations: int = 400,
                          learning_rate: float = 0.05) -> float:
    """Held-out accuracy of a logistic regression separating the domains.

    Each raw image is summarized by :func:`_probe_features`; the features
    are standardized by training-set statistics and a logistic regression
    is trained by plain full-batch gradient descent from a zero start.
    Sample indices are split so that the source and target images that
    share an index land on the same side; with identical domains every
    held-out pair then contributes exactly one right and one wrong
    prediction, pinning the accuracy at 1/2.
    """
    n = min(source_images.shape[0], target_images.shape[0])
    if n < 4:
        raise DataError(f"need at least 4 paired samples, got {n}")
    xs = _probe_features(source_images[:n])
    xt = _probe_features(target_images[:n])

    order = rng.stream(seed, "probe.split").permutation(n)
    n_train = max(2, int(round(train_fraction * n)))
    n_train = min(n_train, n - 2)
    tr, ev = order[:n_train], order[n_train:]

    x_train = np.concatenate([xs[tr], xt[tr]], axis=0)
    y_train = np.concatenate([np.zeros(len(tr)), np.ones(len(tr))])
    x_eval = np.concatenate([xs[ev], xt[ev]], axis=0)
    y_eval = np.concatenate([np.zeros(len(ev)), np.ones(len(ev))])

    mean = x_train.mean(axis=0)
    std = np.maximum(x_train.std(axis=0), 1e-8)
    x_train = (x_train - mean) / std
    x_eval = (x_eval - mean) / std

    w = np.zeros(x_train.shape[1])
    b = 0.0
    m = x_train.shape[0]
    for _ in range(iterations):
        z = x_train @ w + b
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                     np.exp(z) / (1.0 + np.exp(z)))
        err = p - y_train
        w -= learning_rate * (x_train.T @ err) / m
        b -= learning_rate * float(err.mean())

    score = x_eval @ w + b
    pred = (score > 0.0).astype(np.float64)
    return float(np.mean(pred == y_eval))
