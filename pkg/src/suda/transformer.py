"""Attention-gated spectrum transformer.

One forward pass: pool the band-decomposed image into a descriptor of
length d = 3N, run H heads of scaled dot-product attention, concatenate
and project back to length d, squash through a learned sigmoid gate, and
re-weight the band components with the resulting per-(channel, band)
gains.

In the default "faithful" mode the descriptor is a single sequence
element, so each head's softmax collapses to 1 and the head output equals
its V slice exactly; this mode reproduces the reference parameter count
(36,864 attention weights at N=32, H=8).  "token" mode instead treats the
d descriptor entries as tokens with a shared per-head scalar lift, giving
genuine d x d attention at a different parameter count; it is experimental
and excluded from acceptance checks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError
from .rng import stream
from .spectral import BandMaskSet, decompose, recompose

CHANNELS = 3

# Attention projections are drawn at this multiple of Xavier scale; see
# SpectrumTransformerParams.init for why plain Xavier is too timid here.
_ATTN_GAIN = 6.0

FAITHFUL = "faithful"
TOKEN = "token"


@dataclass(frozen=True)
class AsaConfig:
    """Shape configuration of one spectrum transformer."""

    n_bands: int = 32
    n_heads: int = 8
    mode: str = FAITHFUL

    def __post_init__(self):
        if self.n_bands < 1:
            raise ConfigError(f"n_bands must be >= 1, got {self.n_bands}")
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.descriptor_len % self.n_heads != 0:
            raise ConfigError(f"head count {self.n_heads} must divide "
                              f"descriptor length {self.descriptor_len}")
        if self.mode not in (FAITHFUL, TOKEN):
            raise ConfigError(f"unknown attention mode '{self.mode}'")

    @property
    def descriptor_len(self) -> int:
        return CHANNELS * self.n_bands

    @property
    def head_width(self) -> int:
        return self.descriptor_len // self.n_heads


class SpectrumTransformerParams:
    """All learnable values of one spectrum transformer.

    ``p_kvq[h]`` projects the descriptor to that head's (K, V, Q) triple,
    ``p_out`` merges the concatenated heads back to length d, and
    ``gate_w`` / ``gate_b`` parameterize the sigmoid gate.  ``flatten``
    serializes in the fixed order p_kvq[0..H-1], p_out, gate_w, gate_b,
    row-major each, and is bit-exactly invertible via ``unflatten``.
    """

    def __init__(self, config: AsaConfig, p_kvq, p_out, gate_w, gate_b):
        d, dh, heads = config.descriptor_len, config.head_width, config.n_heads
        in_rows = d if config.mode == FAITHFUL else 1
        out_cols = d if config.mode == FAITHFUL else 1
        if len(p_kvq) != heads:
            raise DimensionError(f"expected {heads} head projections, got {len(p_kvq)}")
        for h, p in enumerate(p_kvq):
            if p.shape != (in_rows, 3 * dh):
                raise DimensionError(f"head {h} projection has shape {p.shape}, "
                                     f"expected {(in_rows, 3 * dh)}")
        if p_out.shape != (heads * dh, out_cols):
            raise DimensionError(f"output projection has shape {p_out.shape}, "
                                 f"expected {(heads * dh, out_cols)}")
        if gate_w.shape != (d, d) or gate_b.shape != (d,):
            raise DimensionError(f"gate parameters have shapes {gate_w.shape}, "
                                 f"{gate_b.shape}, expected {(d, d)} and {(d,)}")
        self.config = config
        self.p_kvq = list(p_kvq)
        self.p_out = p_out
        self.gate_w = gate_w
        self.gate_b = gate_b

    @classmethod
    def zeros(cls, config: AsaConfig) -> "SpectrumTransformerParams":
        d, dh, heads = config.descriptor_len, config.head_width, config.n_heads
        in_rows = d if config.mode == FAITHFUL else 1
        out_cols = d if config.mode == FAITHFUL else 1
        return cls(config,
                   [Tensor(np.zeros((in_rows, 3 * dh))) for _ in range(heads)],
                   Tensor(np.zeros((heads * dh, out_cols))),
                   Tensor(np.zeros((d, d))),
                   Tensor(np.zeros(d)))

    @classmethod
    def init(cls, config: AsaConfig, seed: int, label: str = "st") -> "SpectrumTransformerParams":
        """Seeded init: wide-scale attention weights, zero gate.

        The zero gate starts every band at weight 0.5 (neutral).  The
        attention projections are drawn uniform at ``_ATTN_GAIN`` times
        Xavier scale and independently per transformer.  At desk scale
        the projections act mostly as a fixed random expansion of the
        pooled descriptor (their own gradients stay small), so the gain
        is what decides how strongly descriptor differences between
        images reach the gate: at plain Xavier scale the image-to-image
        variation arriving at the gate is of order 1e-2 and the gate
        weights would need thousands of steps to pick it up, while the
        widened features make input-conditioned gating trainable within
        a normal run.  Two transformers drawn from different seeds also
        get genuinely different feature geometries, which is what keeps
        their two views of one image distinct while they train.
        """
        d, dh, heads = config.descriptor_len, config.head_width, config.n_heads
        in_rows = d if config.mode == FAITHFUL else 1
        out_cols = d if config.mode == FAITHFUL else 1
        rng = stream(seed, label)

        def draw(shape):
            lim = _ATTN_GAIN * math.sqrt(6.0 / (shape[0] + shape[1]))
            return Tensor(rng.uniform(-lim, lim, size=shape))

        p_kvq = [draw((in_rows, 3 * dh)) for _ in range(heads)]
        p_out = draw((heads * dh, out_cols))
        return cls(config, p_kvq, p_out, Tensor(np.zeros((d, d))), Tensor(np.zeros(d)))

    def named(self):
        """(name, Tensor) pairs in canonical order."""
        pairs = [(f"p_kvq.{h}", p) for h, p in enumerate(self.p_kvq)]
        pairs.append(("p_out", self.p_out))
        pairs.append(("gate_w", self.gate_w))
        pairs.append(("gate_b", self.gate_b))
        return pairs

    def map(self, fn) -> "SpectrumTransformerParams":
        """Apply fn to every tensor (e.g. tape.watch), preserving structure."""
        return SpectrumTransformerParams(
            self.config,
            [fn(p) for p in self.p_kvq],
            fn(self.p_out), fn(self.gate_w), fn(self.gate_b))

    def attention_param_count(self) -> int:
        """Weights in the attention layer proper (projections, not the gate)."""
        return sum(p.size for p in self.p_kvq) + self.p_out.size

    def total_param_count(self) -> int:
        return sum(t.size for _, t in self.named())

    def flatten(self) -> Tensor:
        """Concatenate all parameters into one vector (differentiable)."""
        return ad.concat([ad.reshape(t, (t.size,)) for _, t in self.named()], axis=0)

    @classmethod
    def unflatten(cls, config: AsaConfig, theta) -> "SpectrumTransformerParams":
        vec = theta.data if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
        template = cls.zeros(config)
        expect = sum(t.size for _, t in template.named())
        if vec.shape != (expect,):
            raise DimensionError(f"unflatten: expected vector of length {expect}, "
                                 f"got shape {vec.shape}")
        out = []
        offset = 0
        for _, t in template.named():
            out.append(Tensor(vec[offset:offset + t.size].reshape(t.shape).copy()))
            offset += t.size
        return cls(config, out[:config.n_heads], out[config.n_heads],
                   out[config.n_heads + 1], out[config.n_heads + 2])


def pool(stack) -> Tensor:
    """Spatial mean of every (channel, band) component.

    Input (..., C, N, H, W); output (..., 3N) laid out so that entry
    3n + c is the mean of component (c, n).  Differentiable.
    """
    stack = stack if isinstance(stack, Tensor) else Tensor(stack)
    shape = stack.shape
    if len(shape) < 4 or shape[-4] != CHANNELS:
        raise DimensionError(f"pool: expected (..., {CHANNELS}, N, H, W), got {shape}")
    means = ad.reduce_mean(stack, axes=(len(shape) - 2, len(shape) - 1))
    rank = len(shape) - 2  # (..., C, N)
    perm = tuple(range(rank - 2)) + (rank - 1, rank - 2)
    swapped = ad.transpose(means, perm)  # (..., N, C)
    return ad.reshape(swapped, shape[:-4] + (shape[-4] * shape[-3],))


def _descriptor_rows(desc) -> Tensor:
    """Normalize a descriptor to a (B, d) matrix of row vectors."""
    desc = desc if isinstance(desc, Tensor) else Tensor(desc)
    if len(desc.shape) == 1:
        return ad.reshape(desc, (1, desc.shape[0]))
    if len(desc.shape) == 2:
        return desc
    raise DimensionError(f"descriptor must be (d,) or (B, d), got {desc.shape}")


def attention_head(desc, p_kvq) -> Tensor:
    """One faithful-mode head: split descᵀ·P_kvq into (K, V, Q), score, weight.

    The single-element sequence makes the softmax identically one, so the
    output reduces to the V slice; the full computation is kept so the
    formula, not the shortcut, is what runs.
    """
    rows = _descriptor_rows(desc)
    p_kvq = p_kvq if isinstance(p_kvq, Tensor) else Tensor(p_kvq)
    if len(p_kvq.shape) != 2 or p_kvq.shape[0] != rows.shape[1] or p_kvq.shape[1] % 3:
        raise DimensionError(f"attention_head: projection {p_kvq.shape} does not fit "
                             f"descriptor length {rows.shape[1]}")
    dh = p_kvq.shape[1] // 3
    kvq = ad.matmul(rows, p_kvq)  # (B, 3*dh)
    k = ad.narrow(kvq, 1, 0, dh)
    v = ad.narrow(kvq, 1, dh, dh)
    q = ad.narrow(kvq, 1, 2 * dh, dh)
    score = ad.reduce_sum(ad.mul(q, k), axes=1)  # row-wise QKᵀ, (B,)
    score = ad.scale(ad.reshape(score, (rows.shape[0], 1)), 1.0 / math.sqrt(dh))
    att = ad.softmax(score, axis=1)  # (B, 1), identically 1
    out = ad.mul(ad.expand(att, (rows.shape[0], dh)), v)
    if not isinstance(desc, Tensor) or len(desc.shape) == 1:
        return ad.reshape(out, (dh,))
    return out


def _token_attention(desc_vec, params, config) -> Tensor:
    """Token-mode attention for one descriptor vector of length d."""
    d, dh = config.descriptor_len, config.head_width
    col = ad.reshape(desc_vec, (d, 1))
    heads = []
    for p in params.p_kvq:
        kvq = ad.matmul(col, p)  # (d, 3*dh) via the shared scalar lift
        k = ad.narrow(kvq, 1, 0, dh)
        v = ad.narrow(kvq, 1, dh, dh)
        q = ad.narrow(kvq, 1, 2 * dh, dh)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.softmax(scores, axis=1), v))  # (d, dh)
    merged = ad.concat(heads, axis=1)  # (d, H*dh)
    return ad.reshape(ad.matmul(merged, params.p_out), (d,))  # p_out: (H*dh, 1)


def _gate_from_descriptor(desc_rows, params, config) -> Tensor:
    """(B, d) descriptor rows -> (B, d) gate values in (0, 1)."""
    b, d = desc_rows.shape
    if config.mode == FAITHFUL:
        merged = ad.concat([attention_head(desc_rows, p) for p in params.p_kvq], axis=1)
        projected = ad.matmul(merged, params.p_out)  # (B, d)
    else:
        rows = [_token_attention(ad.narrow(desc_rows, 0, i, 1), params, config)
                for i in range(b)]
        projected = ad.concat([ad.reshape(r, (1, d)) for r in rows], axis=0)
    pre = ad.add(ad.matmul(projected, params.gate_w),
                 ad.expand(ad.reshape(params.gate_b, (1, d)), (b, d)))
    return ad.sigmoid(pre)


def _gate_to_channel_band(gate_rows, batch_shape, config) -> Tensor:
    """(B, d) with layout 3n+c -> (..., C, N)."""
    b, d = gate_rows.shape
    by_band = ad.reshape(gate_rows, (b, config.n_bands, CHANNELS))
    by_channel = ad.transpose(by_band, (0, 2, 1))
    return ad.reshape(by_channel, batch_shape + (CHANNELS, config.n_bands))


def asa_forward(stack, params: SpectrumTransformerParams, config: AsaConfig,
                gate_override=None):
    """Pool, attend, gate, and recompose one spectral stack.

    ``stack`` is (C, N, H, W) or batched (B, C, N, H, W).  Returns
    (x_hat, gate) where gate has shape (C, N) or (B, C, N).  The optional
    ``gate_override`` (same shape as the gate) bypasses the learned gate;
    it exists for inspection and tests, not training.
    """
    stack = stack if isinstance(stack, Tensor) else Tensor(stack)
    shape = stack.shape
    if len(shape) not in (4, 5):
        raise DimensionError(f"asa_forward: expected (C, N, H, W) or (B, C, N, H, W), "
                             f"got {shape}")
    if shape[-3] != config.n_bands or shape[-4] != CHANNELS:
        raise DimensionError(f"asa_forward: stack {shape} does not match config "
                             f"(C={CHANNELS}, N={config.n_bands})")
    batch_shape = shape[:-4]
    if gate_override is not None:
        gate = gate_override if isinstance(gate_override, Tensor) else Tensor(gate_override)
        if gate.shape != batch_shape + (CHANNELS, config.n_bands):
            raise DimensionError(f"gate override {gate.shape} does not match stack {shape}")
    else:
        desc = pool(stack)
        rows = _descriptor_rows(desc)
        gate_rows = _gate_from_descriptor(rows, params, config)
        if not np.all(np.isfinite(gate_rows.data)):
            raise NumericError("asa_forward: non-finite gate")
        gate = _gate_to_channel_band(gate_rows, batch_shape, config)
    return recompose(stack, gate), gate


def st_apply(x, params: SpectrumTransformerParams, config: AsaConfig,
             masks: BandMaskSet, gate_override=None):
    """decompose -> pool -> attention -> gate -> recompose.

    Single entry point used by the trainer for source and target images.
    Accepts (C, H, W) or (B, C, H, W).
    """
    if masks.n_bands != config.n_bands:
        raise DimensionError(f"st_apply: masks have {masks.n_bands} bands, "
                             f"config expects {config.n_bands}")
    stack = decompose(x, masks)
    return asa_forward(stack, params, config, gate_override=gate_override)


def st_gate_weights(x: np.ndarray, params: SpectrumTransformerParams,
                    config: AsaConfig, masks: BandMaskSet) -> np.ndarray:
    """Gate values only, no gradients; accepts single or batched images."""
    _, gate = st_apply(x, params, config, masks)
    return gate.data
