"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment, blank lines are
ignored. Every key has a default, so an empty file is a valid
configuration; unknown and duplicated keys are hard errors since a
silently ignored typo can waste a long training run.
"""

from __future__ import annotations

import dataclasses
import math
import os

from . import models, train, transformer
from .data import DomainShiftSpec
from .errors import ConfigError

_ATTENTION_MODES = (transformer.FAITHFUL, transformer.TOKEN)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Resolved configuration; field order is the canonical echo order."""

    n_bands: int = 32
    heads: int = 8
    image_size: int = 32
    classes: int = 4
    batch: int = 32
    max_iter: int = 3000
    lr_gen: float = 0.01
    lr_disc: float = 0.01
    momentum: float = 0.9
    lambda_c: float = 0.1
    lambda_s: float = 1.0
    dis_weight: float = 1.0
    sim_weight: float = 1.0
    tier: str = train.TIER_TWO_ST_MSL
    seed: int = 0
    eval_every: int = 200
    train_count: int = 256
    eval_count: int = 128
    shift_scale: float = 1.0
    attention_mode: str = transformer.FAITHFUL
    data_dir: str = "data"
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("n_bands", "heads", "image_size", "classes", "batch",
                     "train_count", "eval_count", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_iter < 0:
            raise ConfigError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.tier not in train.TIERS:
            raise ConfigError(
                f"tier must be one of {', '.join(train.TIERS)}, got {self.tier!r}")
        if self.attention_mode not in _ATTENTION_MODES:
            raise ConfigError(
                f"attention_mode must be one of {', '.join(_ATTENTION_MODES)}, "
                f"got {self.attention_mode!r}")
        for name in ("lr_gen", "lr_disc", "momentum", "lambda_c", "lambda_s",
                     "dis_weight", "sim_weight", "shift_scale"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not 0 <= self.seed < (1 << 64):
            raise ConfigError(f"seed must be an unsigned 64-bit value, got {self.seed}")

    # -- derived objects ----------------------------------------------------

    def model_config(self) -> models.ModelConfig:
        return models.ModelConfig(image_size=self.image_size,
                                  classes=self.classes)

    def asa_config(self) -> transformer.AsaConfig:
        return transformer.AsaConfig(n_bands=self.n_bands,
                                     n_heads=self.heads,
                                     mode=self.attention_mode)

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            model=self.model_config(), asa=self.asa_config(), tier=self.tier,
            max_iter=self.max_iter, batch_size=self.batch,
            lr_gen=self.lr_gen, lr_disc=self.lr_disc, momentum=self.momentum,
            lambda_c=self.lambda_c, lambda_s=self.lambda_s,
            dis_weight=self.dis_weight, sim_weight=self.sim_weight,
            seed=self.seed, eval_every=self.eval_every,
        )

    def shift_spec(self) -> DomainShiftSpec:
        """The domain shift this run generates, adapted to its band count.

        The frozen default layout is defined on 32 bands; other counts
        rescale the band indices proportionally so texture stays mid-
        spectrum and noise stays high-frequency.
        """
        base = DomainShiftSpec()
        if self.n_bands != 32:
            def rescale(bands):
                mapped = sorted({b * self.n_bands // 32 for b in bands})
                return tuple(min(b, self.n_bands - 1) for b in mapped)

            base = dataclasses.replace(
                base,
                illumination_bands=rescale(base.illumination_bands),
                texture_bands=rescale(base.texture_bands),
                noise_bands=rescale(base.noise_bands),
            )
        return base.scaled(self.shift_scale)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str, line_no: int):
    target = _FIELDS[key].type
    if target == "int":
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"line {line_no}: expected an integer for "
                              f"{key!r}, got {raw!r}") from None
    if target == "float":
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"line {line_no}: expected a number for "
                              f"{key!r}, got {raw!r}") from None
        return value
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; raises ConfigError with line numbers."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected 'key = value', "
                              f"got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {line_no}: empty value for {key!r}")
        values[key] = _parse_value(key, raw, line_no)
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(config: RunConfig) -> str:
    """Canonical text form; parse(format(c)) == c."""
    lines = []
    for field in dataclasses.fields(RunConfig):
        value = getattr(config, field.name)
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{field.name} = {rendered}")
    return "\n".join(lines) + "\n"


def echo_config(config: RunConfig, out_dir: str) -> str:
    """Write the resolved configuration into the output directory."""
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(config))
    return path
