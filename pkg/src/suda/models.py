"""Task classifier and domain discriminator.

Both are small fully-connected stacks over flattened channels-first
images: the classifier is flatten -> 256 -> 128 -> K with rectifier
units and exposes its penultimate 128-d activations as features; the
discriminator is flatten -> 128 -> 64 -> 1 with a sigmoid score where
1 means source and 0 means target.  Hidden widths are configurable so
gradient-check configurations can stay tiny.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .rng import stream


@dataclass(frozen=True)
class ModelConfig:
    """Input geometry and head sizes shared by both models."""

    image_size: int = 32
    channels: int = 3
    classes: int = 4
    classifier_hidden: tuple = (256, 128)
    discriminator_hidden: tuple = (128, 64)

    def __post_init__(self):
        if self.image_size < 1 or self.channels < 1:
            raise ConfigError(f"bad image geometry {self.channels}x{self.image_size}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if len(self.classifier_hidden) != 2 or len(self.discriminator_hidden) != 2:
            raise ConfigError("hidden sizes must be two-layer tuples")

    @property
    def input_dim(self) -> int:
        return self.channels * self.image_size * self.image_size


class MlpParams:
    """Three affine layers; the generic container behind both models."""

    def __init__(self, sizes, tensors=None):
        self.sizes = tuple(int(s) for s in sizes)  # (in, h1, h2, out)
        if len(self.sizes) != 4:
            raise ConfigError(f"expected 4 layer sizes, got {sizes}")
        if tensors is None:
            tensors = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                tensors.append(Tensor(np.zeros((fan_in, fan_out))))
                tensors.append(Tensor(np.zeros(fan_out)))
        self.tensors = list(tensors)
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w, b = self.tensors[2 * i], self.tensors[2 * i + 1]
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise DimensionError(f"layer {i}: got {w.shape}/{b.shape}, "
                                     f"expected {(fan_in, fan_out)}/{(fan_out,)}")

    @classmethod
    def init(cls, sizes, seed: int, label: str) -> "MlpParams":
        """He-style scaled uniform init for the weights, zero biases."""
        rng = stream(seed, label)
        tensors = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            tensors.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out))))
            tensors.append(Tensor(np.zeros(fan_out)))
        return cls(sizes, tensors)

    def named(self):
        names = ("w1", "b1", "w2", "b2", "w3", "b3")
        return list(zip(names, self.tensors))

    def map(self, fn) -> "MlpParams":
        return MlpParams(self.sizes, [fn(t) for t in self.tensors])

    def layer_counts(self) -> dict:
        counts = {}
        for name, t in self.named():
            counts[name] = t.size
        counts["total"] = sum(t.size for _, t in self.named())
        return counts


class ClassifierParams(MlpParams):
    """Parameters of the task model G."""

    @classmethod
    def for_config(cls, config: ModelConfig, seed=None, label: str = "classifier"):
        sizes = (config.input_dim,) + config.classifier_hidden + (config.classes,)
        if seed is None:
            return cls(sizes)
        return cls.init(sizes, seed, label)


class DiscriminatorParams(MlpParams):
    """Parameters of the domain discriminator C_d."""

    @classmethod
    def for_config(cls, config: ModelConfig, seed=None, label: str = "discriminator"):
        sizes = (config.input_dim,) + config.discriminator_hidden + (1,)
        if seed is None:
            return cls(sizes)
        return cls.init(sizes, seed, label)


def _flatten_images(x, input_dim: int, center: bool = False):
    """(C,H,W) or (B,C,H,W) -> ((B, D) tensor, had_batch_axis).

    With ``center`` each flattened row is shifted to zero mean.  Image
    tensors carry a large shared brightness component (pixels live in
    [0, 1], spectral views scale it further); removing it per row keeps
    that single direction from dominating the first affine layer's
    gradients regardless of how the input was produced.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if len(x.shape) == 3:
        flat_dim = x.shape[0] * x.shape[1] * x.shape[2]
        batched = False
        b = 1
    elif len(x.shape) == 4:
        flat_dim = x.shape[1] * x.shape[2] * x.shape[3]
        batched = True
        b = x.shape[0]
    else:
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")
    if flat_dim != input_dim:
        raise DimensionError(f"image {x.shape} flattens to {flat_dim}, "
                             f"model expects {input_dim}")
    rows = ad.reshape(x, (b, input_dim))
    if center:
        row_mean = ad.reshape(ad.reduce_mean(rows, axes=1), (b, 1))
        rows = ad.sub(rows, ad.expand(row_mean, (b, input_dim)))
    return rows, batched


def _mlp_forward(rows, params: MlpParams):
    """Shared trunk: two rectified hidden layers, returns (hidden2, output)."""
    b = rows.shape[0]

    def affine(h, w, bias):
        out_dim = w.shape[1]
        return ad.add(ad.matmul(h, w), ad.expand(ad.reshape(bias, (1, out_dim)), (b, out_dim)))

    t = params.tensors
    h1 = ad.relu(affine(rows, t[0], t[1]))
    h2 = ad.relu(affine(h1, t[2], t[3]))
    return h2, affine(h2, t[4], t[5])


def classify(x, params: ClassifierParams):
    """Forward pass of G.

    Returns (logits, probs, features); for a single (C,H,W) image the
    outputs are vectors, for a batch they keep the batch axis.  With
    all-zero parameters the probabilities are exactly uniform.
    """
    rows, batched = _flatten_images(x, params.sizes[0], center=True)
    features, logits = _mlp_forward(rows, params)
    probs = ad.softmax(logits, axis=1)
    if not batched:
        k, f = params.sizes[3], params.sizes[2]
        return (ad.reshape(logits, (k,)), ad.reshape(probs, (k,)),
                ad.reshape(features, (f,)))
    return logits, probs, features


def discriminator_logits(x, params: DiscriminatorParams):
    """Pre-sigmoid domain score(s); the numerically safe handle for losses."""
    rows, batched = _flatten_images(x, params.sizes[0])
    _, logits = _mlp_forward(rows, params)
    flat = ad.reshape(logits, (rows.shape[0],))
    if not batched:
        return ad.reshape(flat, (1,))
    return flat


def discriminate(x, params: DiscriminatorParams):
    """Domain score(s) in (0,1); 1 = source, 0 = target.

    Shape (B,) for a batch, (1,) for a single image.
    """
    return ad.sigmoid(discriminator_logits(x, params))


def describe(params: MlpParams) -> dict:
    """Per-layer and total parameter counts."""
    return params.layer_counts()
