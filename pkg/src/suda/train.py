"""Adversarial training loop over spectral views, with ablation tiers.

Each iteration runs two phases. The discriminator phase updates the
domain classifier one step toward maximizing the adversarial loss on
detached spectral views of the current batches. The generator phase then
updates the spectrum transformers and the task model one step on

    L_sup - lambda_c * (confusion term) + lambda_s * (L_dis + L_sim)

where the confusion term is the mean log-sigmoid discriminator score of
the target views: the non-saturating reward for target views that pass
as source. Source views carry no confusion pressure, so supervision and
alignment pull on the shared gates from different batches rather than
fighting over the same ones. The reported ``LossBreakdown.total`` keeps
the conventional form built from the measured adversarial value.

Four ablation tiers gate the moving parts:

    baseline     task model alone on raw source images
    single_st    one spectrum transformer plus the adversarial game
    two_st       two transformers; supervision averages both source views
    two_st_msl   adds the discrepancy and similarity self-supervision
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from . import losses, metrics, models, rng, spectral, transformer
from .autodiff import Tape, Tensor
from .data import Dataset
from .errors import ConfigError, DataError, NumericError

TIER_BASELINE = "baseline"
TIER_SINGLE_ST = "single_st"
TIER_TWO_ST = "two_st"
TIER_TWO_ST_MSL = "two_st_msl"
TIERS = (TIER_BASELINE, TIER_SINGLE_ST, TIER_TWO_ST, TIER_TWO_ST_MSL)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a run besides the datasets."""

    model: models.ModelConfig = models.ModelConfig()
    asa: transformer.AsaConfig = transformer.AsaConfig()
    tier: str = TIER_TWO_ST_MSL
    max_iter: int = 3000
    batch_size: int = 32
    lr_gen: float = 0.01
    lr_disc: float = 0.01
    momentum: float = 0.9
    lambda_c: float = 0.1
    lambda_s: float = 1.0
    dis_weight: float = 1.0
    sim_weight: float = 1.0
    seed: int = 0
    eval_every: int = 200
    disc_steps: int = 1
    eval_batch: int = 32

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ConfigError(f"unknown tier {self.tier!r}, expected one of {TIERS}")
        if self.max_iter < 0:
            raise ConfigError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.disc_steps < 1:
            raise ConfigError(f"disc_steps must be >= 1, got {self.disc_steps}")
        if self.eval_batch < 1:
            raise ConfigError(f"eval_batch must be >= 1, got {self.eval_batch}")
        for name in ("lr_gen", "lr_disc", "momentum", "lambda_c", "lambda_s",
                     "dis_weight", "sim_weight"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v) or v < 0.0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.momentum >= 1.0:
            raise ConfigError(f"momentum must be < 1, got {self.momentum}")
        if not 0 <= int(self.seed) < (1 << 64):
            raise ConfigError(f"seed must be an unsigned 64-bit value, got {self.seed}")

    @property
    def uses_st(self) -> bool:
        return self.tier != TIER_BASELINE

    @property
    def uses_two_st(self) -> bool:
        return self.tier in (TIER_TWO_ST, TIER_TWO_ST_MSL)

    @property
    def uses_msl(self) -> bool:
        return self.tier == TIER_TWO_ST_MSL

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(lambda_c=self.lambda_c, lambda_s=self.lambda_s)

    def make_masks(self) -> spectral.BandMaskSet:
        return spectral.make_band_masks(
            self.model.image_size, self.model.image_size, self.asa.n_bands
        )


@dataclasses.dataclass
class TrainState:
    """All mutable training state; every tier carries all four models so
    checkpoints have one shape regardless of what the tier trains."""

    st1: transformer.SpectrumTransformerParams
    st2: transformer.SpectrumTransformerParams
    g: models.ClassifierParams
    cd: models.DiscriminatorParams
    opt_gen: ad.SgdMomentum
    opt_disc: ad.SgdMomentum
    iteration: int = 0


def init_state(config: TrainConfig) -> TrainState:
    """Fresh seeded state. The two transformers get independent inits so
    their initial parameter vectors are not parallel."""
    return TrainState(
        st1=transformer.SpectrumTransformerParams.init(
            config.asa, config.seed, label="init_st1"),
        st2=transformer.SpectrumTransformerParams.init(
            config.asa, config.seed, label="init_st2"),
        g=models.ClassifierParams.for_config(
            config.model, seed=config.seed, label="init_g"),
        cd=models.DiscriminatorParams.for_config(
            config.model, seed=config.seed, label="init_cd"),
        opt_gen=ad.SgdMomentum(config.lr_gen, config.momentum),
        opt_disc=ad.SgdMomentum(config.lr_disc, config.momentum),
        iteration=0,
    )


def batch_indices(count: int, batch_size: int, seed: int, label: str,
                  iteration: int) -> np.ndarray:
    """Indices of one batch under seeded per-epoch reshuffles.

    Iteration ``i`` consumes slot ``i mod (count // batch_size)`` of the
    permutation for epoch ``i div (count // batch_size)``; the leftover
    tail of each epoch is dropped. Stateless in ``iteration``, so a
    resumed run sees exactly the batches the original would have.
    """
    if batch_size > count:
        raise ConfigError(
            f"batch_size {batch_size} exceeds dataset of {count} samples"
        )
    per_epoch = count // batch_size
    epoch, slot = divmod(iteration, per_epoch)
    perm = rng.stream(seed, f"{label}.epoch.{epoch}").permutation(count)
    return perm[slot * batch_size:(slot + 1) * batch_size]


def _gen_groups(state: TrainState, config: TrainConfig):
    groups = []
    if config.uses_st:
        groups.append(("st1", state.st1))
        if config.uses_two_st:
            groups.append(("st2", state.st2))
    groups.append(("g", state.g))
    return groups


def _named_with_prefix(groups):
    out = []
    for prefix, params in groups:
        for name, tensor in params.named():
            out.append((f"{prefix}.{name}", tensor))
    return out


def _check_finite_params(named, iteration: int) -> None:
    for name, tensor in named:
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(
                f"parameter {name!r} became non-finite at iteration {iteration}"
            )


def _check_finite_term(value: float, term: str, iteration: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"{term} is not finite at iteration {iteration}")
    return value


def discriminator_objective(cd: models.DiscriminatorParams, src_views,
                            tgt_views):
    """(loss to minimize, adversarial value) for the discriminator phase.

    ``src_views``/``tgt_views`` are lists of image batches (already
    detached); the discriminator scores every view of both domains.
    """
    src_logits = ad.concat(
        [models.discriminator_logits(v, cd) for v in src_views], axis=0
    )
    tgt_logits = ad.concat(
        [models.discriminator_logits(v, cd) for v in tgt_views], axis=0
    )
    l_adv = losses.adversarial_loss_from_logits(src_logits, tgt_logits)
    return ad.scale(l_adv, -1.0), l_adv


def _st_views(sts, config: TrainConfig, masks, src_images, tgt_images):
    src_views = [
        transformer.st_apply(src_images, p, config.asa, masks)[0] for p in sts
    ]
    tgt_views = [
        transformer.st_apply(tgt_images, p, config.asa, masks)[0] for p in sts
    ]
    return src_views, tgt_views


def _objective_from_views(src_views, tgt_views, st1, st2, g, cd,
                          config: TrainConfig, src_labels):
    zero = Tensor(0.0)
    sup_terms = []
    for view in src_views:
        _, probs, _ = models.classify(view, g)
        sup_terms.append(losses.supervised_loss(probs, src_labels))
    l_sup = sup_terms[0]
    if len(sup_terms) == 2:
        l_sup = ad.scale(ad.add(sup_terms[0], sup_terms[1]), 0.5)

    src_logits = ad.concat(
        [models.discriminator_logits(v, cd) for v in src_views], axis=0
    )
    tgt_logits = ad.concat(
        [models.discriminator_logits(v, cd) for v in tgt_views], axis=0
    )
    l_adv = losses.adversarial_loss_from_logits(src_logits, tgt_logits)
    confusion = losses.confusion_loss_from_logits(tgt_logits)
    loss = ad.sub(l_sup, ad.scale(confusion, config.lambda_c))

    l_dis = zero
    l_sim = zero
    if config.uses_msl:
        l_dis = losses.discrepancy_loss(st1.flatten(), st2.flatten())
        _, p1, _ = models.classify(tgt_views[0], g)
        _, p2, _ = models.classify(tgt_views[1], g)
        l_sim = losses.similarity_loss(p1, p2)
        l_self = losses.self_supervision_loss(
            l_dis, l_sim, config.dis_weight, config.sim_weight
        )
        loss = ad.add(loss, ad.scale(l_self, config.lambda_s))

    return loss, {"L_sup": l_sup, "L_adv": l_adv, "L_dis": l_dis,
                  "L_sim": l_sim}


def generator_objective(st1, st2, g, cd, config: TrainConfig,
                        masks: spectral.BandMaskSet, src_images, src_labels,
                        tgt_images):
    """Scalar generator-phase loss plus its reported parts.

    Parameter containers may be taped or constant; the discriminator is
    always treated as a frozen constant here. Returns (loss, parts) where
    parts holds the measured L_sup, L_adv, L_dis, L_sim values.
    """
    zero = Tensor(0.0)
    if not config.uses_st:
        _, probs, _ = models.classify(src_images, g)
        l_sup = losses.supervised_loss(probs, src_labels)
        return l_sup, {"L_sup": l_sup, "L_adv": zero, "L_dis": zero,
                       "L_sim": zero}
    sts = [st1, st2] if config.uses_two_st else [st1]
    src_views, tgt_views = _st_views(sts, config, masks, src_images, tgt_images)
    return _objective_from_views(src_views, tgt_views, st1, st2, g, cd,
                                 config, src_labels)


def _grads_by_name(grads, live_named):
    return {name: grads[tensor.nid] for name, tensor in live_named}


def train_step(state: TrainState, src_images, src_labels, tgt_images,
               config: TrainConfig,
               masks: spectral.BandMaskSet | None = None) -> losses.LossBreakdown:
    """One two-phase update. Mutates ``state`` in place and returns the
    generator-phase loss report for this iteration."""
    if masks is None:
        masks = config.make_masks()
    src_images = np.asarray(src_images, dtype=np.float64)
    tgt_images = np.asarray(tgt_images, dtype=np.float64)
    src_labels = np.asarray(src_labels)
    if src_images.ndim != 4 or tgt_images.ndim != 4:
        raise DataError("train_step expects batched (B, C, H, W) images")
    if src_images.shape[0] < 1 or tgt_images.shape[0] < 1:
        raise DataError("train_step batches must be non-empty")
    iteration = state.iteration + 1

    # One taped spectral forward serves both phases: the discriminator
    # trains on its detached values, the generator differentiates through
    # it afterwards (the transformers do not move during phase (a), so the
    # values are exactly what a separate detached pass would produce).
    tape = Tape()
    live = {name: params.map(tape.watch)
            for name, params in _gen_groups(state, config)}
    src_views = tgt_views = None
    if config.uses_st:
        sts = [live["st1"], live["st2"]] if config.uses_two_st else [live["st1"]]
        src_views, tgt_views = _st_views(sts, config, masks, src_images,
                                         tgt_images)
        src_detached = [v.data for v in src_views]
        tgt_detached = [v.data for v in tgt_views]
        for _ in range(config.disc_steps):
            dtape = Tape()
            live_cd = state.cd.map(dtape.watch)
            loss_d, _ = discriminator_objective(
                live_cd, src_detached, tgt_detached
            )
            _check_finite_term(loss_d.item(), "discriminator loss", iteration)
            grads_d = ad.backward(dtape, loss_d)
            state.opt_disc.step(
                _named_with_prefix([("cd", state.cd)]),
                _grads_by_name(grads_d, _named_with_prefix([("cd", live_cd)])),
            )
        _check_finite_params(_named_with_prefix([("cd", state.cd)]), iteration)

    # Phase (b): spectrum transformers and task model against the frozen,
    # freshly updated discriminator.
    if config.uses_st:
        loss_g, parts = _objective_from_views(
            src_views, tgt_views, live["st1"], live.get("st2", state.st2),
            live["g"], state.cd, config, src_labels,
        )
    else:
        loss_g, parts = generator_objective(
            state.st1, state.st2, live["g"], state.cd, config, masks,
            src_images, src_labels, tgt_images,
        )
    reported = {name: _check_finite_term(t.item(), name, iteration)
                for name, t in parts.items()}
    _check_finite_term(loss_g.item(), "generator loss", iteration)
    grads = ad.backward(tape, loss_g)
    live_named = _named_with_prefix(
        [(name, live[name]) for name, _ in _gen_groups(state, config)]
    )
    state.opt_gen.step(
        _named_with_prefix(_gen_groups(state, config)),
        _grads_by_name(grads, live_named),
    )
    _check_finite_params(_named_with_prefix(_gen_groups(state, config)),
                         iteration)

    state.iteration = iteration
    return losses.total_objective(
        reported["L_sup"], reported["L_adv"], reported["L_dis"],
        reported["L_sim"], config.weights(),
    )


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class EvalMetrics:
    """Accuracies and distribution distances on the eval pair."""

    src_acc: float
    tgt_acc_st: float
    tgt_acc_raw: float
    mmd_raw: float
    mmd_st: float
    cdid_raw: float
    cdid_st: float
    idid_s: float
    idid_t: float

    FIELDS = ("src_acc", "tgt_acc_st", "tgt_acc_raw", "mmd_raw", "mmd_st",
              "cdid_raw", "cdid_st", "idid_s", "idid_t")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def _apply_st_chunked(images: np.ndarray, params, config: TrainConfig,
                      masks) -> np.ndarray:
    out = np.empty_like(images)
    for start in range(0, images.shape[0], config.eval_batch):
        chunk = images[start:start + config.eval_batch]
        x_hat, _ = transformer.st_apply(chunk, params, config.asa, masks)
        out[start:start + config.eval_batch] = x_hat.data
    return out


def _predict_chunked(images: np.ndarray, g, config: TrainConfig):
    """Class probabilities and penultimate features, batched over eval_batch."""
    probs_out = None
    feats = None
    for start in range(0, images.shape[0], config.eval_batch):
        chunk = images[start:start + config.eval_batch]
        _, probs, features = models.classify(chunk, g)
        if feats is None:
            probs_out = np.empty((images.shape[0], probs.shape[1]))
            feats = np.empty((images.shape[0], features.shape[1]))
        probs_out[start:start + config.eval_batch] = probs.data
        feats[start:start + config.eval_batch] = features.data
    return probs_out, feats


#: Spatial grid that view images are average-pooled to before the
#: intra-domain distance; 4x4 keeps the cloud dimension (48) below typical
#: evaluation-set sizes so the covariances stay full-rank and the Frechet
#: value for near-identical view pairs is numerically zero.
_IDID_GRID = 4


def _pooled_pixels(images: np.ndarray) -> np.ndarray:
    """Average-pool each channel to a small grid and flatten per sample."""
    b, c, h, w = images.shape
    if h % _IDID_GRID == 0 and w % _IDID_GRID == 0:
        fh, fw = h // _IDID_GRID, w // _IDID_GRID
        pooled = images.reshape(b, c, _IDID_GRID, fh, _IDID_GRID, fw).mean(axis=(3, 5))
    else:
        pooled = images
    return pooled.reshape(b, -1)


def evaluate(state: TrainState, config: TrainConfig, source_eval: Dataset,
             target_eval: Dataset,
             masks: spectral.BandMaskSet | None = None) -> EvalMetrics:
    """Accuracy and distance metrics on held-out data; mutates nothing.

    The headline accuracies (``src_acc``, ``tgt_acc_st``) classify the
    ST1-transformed images for every transformer tier; ST2 exists to
    diversify training, not to vote at inference.  The baseline tier
    falls back to raw images for those columns.  ``tgt_acc_raw`` always
    classifies untransformed target images.  MMD and the cross-domain
    distances compare task-model feature clouds under the current
    parameters, raw versus ST1-transformed; the intra-domain distances
    compare the ST1 and ST2 view images directly (average-pooled and
    flattened) and are 0 for tiers without a second transformer.
    """
    if source_eval.labels is None or target_eval.labels is None:
        raise DataError("evaluation needs labeled source and target sets")
    if masks is None:
        masks = config.make_masks()
    raw_s = np.asarray(source_eval.images, dtype=np.float64)
    raw_t = np.asarray(target_eval.images, dtype=np.float64)

    if config.uses_st:
        st1_s = _apply_st_chunked(raw_s, state.st1, config, masks)
        st1_t = _apply_st_chunked(raw_t, state.st1, config, masks)
    else:
        st1_s, st1_t = raw_s, raw_t

    probs_raw_t, feats_raw_t = _predict_chunked(raw_t, state.g, config)
    _, feats_raw_s = _predict_chunked(raw_s, state.g, config)
    probs_st_s, feats_st_s = _predict_chunked(st1_s, state.g, config)
    probs_st_t, feats_st_t = _predict_chunked(st1_t, state.g, config)

    idid_s = idid_t = 0.0
    if config.uses_two_st:
        st2_s = _apply_st_chunked(raw_s, state.st2, config, masks)
        st2_t = _apply_st_chunked(raw_t, state.st2, config, masks)
        idid_s = metrics.frechet_distance(_pooled_pixels(st1_s),
                                          _pooled_pixels(st2_s))
        idid_t = metrics.frechet_distance(_pooled_pixels(st1_t),
                                          _pooled_pixels(st2_t))

    return EvalMetrics(
        src_acc=metrics.accuracy(np.argmax(probs_st_s, axis=1),
                                 source_eval.labels),
        tgt_acc_st=metrics.accuracy(np.argmax(probs_st_t, axis=1),
                                    target_eval.labels),
        tgt_acc_raw=metrics.accuracy(np.argmax(probs_raw_t, axis=1),
                                     target_eval.labels),
        mmd_raw=metrics.mmd(feats_raw_s, feats_raw_t),
        mmd_st=metrics.mmd(feats_st_s, feats_st_t),
        cdid_raw=metrics.frechet_distance(feats_raw_s, feats_raw_t),
        cdid_st=metrics.frechet_distance(feats_st_s, feats_st_t),
        idid_s=idid_s,
        idid_t=idid_t,
    )


# ---------------------------------------------------------------------------
# Full runs.
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DataBundle:
    """The four datasets a run needs. Target training labels, if present
    in the file, are never read by the loop."""

    source_train: Dataset
    target_train: Dataset
    source_eval: Dataset
    target_eval: Dataset

    def __post_init__(self):
        if self.source_train.labels is None:
            raise DataError("source training set must be labeled")
        if self.source_eval.labels is None or self.target_eval.labels is None:
            raise DataError("both eval sets must be labeled")
        shapes = {ds.images.shape[1:] for ds in (
            self.source_train, self.target_train,
            self.source_eval, self.target_eval)}
        if len(shapes) != 1:
            raise DataError(f"datasets disagree on image shape: {shapes}")


@dataclasses.dataclass(frozen=True)
class RunRecord:
    """One iteration's report; ``eval`` is filled on evaluation rows."""

    iteration: int
    losses: losses.LossBreakdown
    eval: EvalMetrics | None = None


def train_run(bundle: DataBundle, config: TrainConfig,
              state: TrainState | None = None,
              callback=None) -> tuple[TrainState, list[RunRecord]]:
    """Run iterations ``state.iteration + 1 .. max_iter``.

    Evaluates every ``eval_every`` iterations and always on the final one.
    ``callback(record, state)``, when given, fires after each iteration
    (checkpointing, CSV streaming). Returns the final state and the
    records emitted by this call.
    """
    shape = bundle.source_train.images.shape[1:]
    expected = (3, config.model.image_size, config.model.image_size)
    if shape != expected:
        raise DataError(f"datasets are {shape}, config expects {expected}")
    if state is None:
        state = init_state(config)
    masks = config.make_masks()
    records: list[RunRecord] = []
    src_imgs = np.asarray(bundle.source_train.images, dtype=np.float64)
    src_labels = bundle.source_train.labels
    tgt_imgs = np.asarray(bundle.target_train.images, dtype=np.float64)

    while state.iteration < config.max_iter:
        it = state.iteration  # zero-based position of the upcoming batch
        src_idx = batch_indices(src_imgs.shape[0], config.batch_size,
                                config.seed, "batch.src", it)
        tgt_idx = batch_indices(tgt_imgs.shape[0], config.batch_size,
                                config.seed, "batch.tgt", it)
        breakdown = train_step(state, src_imgs[src_idx], src_labels[src_idx],
                               tgt_imgs[tgt_idx], config, masks=masks)
        report = None
        if (state.iteration % config.eval_every == 0
                or state.iteration == config.max_iter):
            report = evaluate(state, config, bundle.source_eval,
                              bundle.target_eval, masks=masks)
        record = RunRecord(iteration=state.iteration, losses=breakdown,
                           eval=report)
        records.append(record)
        if callback is not None:
            callback(record, state)
    return state, records
