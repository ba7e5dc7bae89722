"""Command-line front end: dataset generation, training, evaluation,
and transformer inspection.

Commands write only into their ``--out`` directory, guarded by a lock
file so two runs cannot interleave artifacts.  Everything on disk is a
pure function of (config, seed): rerunning a command reproduces the same
bytes.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import math
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import data, metrics, train, transformer
from .errors import ConfigError, DataError, SudaError
from .imageio import write_ppm

SOURCE_TRAIN = "source_train.suda"
TARGET_TRAIN = "target_train.suda"
SOURCE_EVAL = "source_eval.suda"
TARGET_EVAL = "target_eval.suda"
MANIFEST = "manifest.txt"
METRICS_CSV = "metrics.csv"
CKPT_LATEST = "ckpt_latest.bin"
CKPT_FINAL = "ckpt_final.bin"

METRICS_HEADER = ("iter,L_sup,L_adv,L_dis,L_sim,src_acc,tgt_acc_st,"
                  "tgt_acc_raw,mmd_raw,mmd_st,cdid_raw,cdid_st,idid_s,idid_t")


@contextlib.contextmanager
def output_lock(out_dir: str):
    """Exclusive ownership of an output directory for one command."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"{out_dir} is locked by another run (stale? remove {path})"
        ) from None
    os.close(fd)
    try:
        yield
    finally:
        os.unlink(path)


def _fmt(value: float) -> str:
    return repr(float(value))


def _metrics_row(record: train.RunRecord) -> str:
    cells = [str(record.iteration),
             _fmt(record.losses.l_sup), _fmt(record.losses.l_adv),
             _fmt(record.losses.l_dis), _fmt(record.losses.l_sim)]
    if record.eval is not None:
        cells += [_fmt(getattr(record.eval, f))
                  for f in train.EvalMetrics.FIELDS]
    else:
        cells += [""] * len(train.EvalMetrics.FIELDS)
    return ",".join(cells)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _manifest_text(config: cfgmod.RunConfig,
                   shift: data.DomainShiftSpec) -> str:
    lines = [
        f"class_count = {config.classes}",
        f"image_size = {config.image_size}",
        f"n_bands = {config.n_bands}",
        f"seed = {config.seed}",
        f"train_count = {config.train_count}",
        f"eval_count = {config.eval_count}",
        "illumination_bands = " + ",".join(map(str, shift.illumination_bands)),
        f"illumination_amp = {shift.illumination_amp!r}",
        "texture_bands = " + ",".join(map(str, shift.texture_bands)),
        f"texture_amp = {shift.texture_amp!r}",
        "noise_bands = " + ",".join(map(str, shift.noise_bands)),
        f"noise_amp = {shift.noise_amp!r}",
        "channel_offset = " + ",".join(repr(v) for v in shift.channel_offset),
    ]
    return "\n".join(lines) + "\n"


def cmd_gen_data(args) -> int:
    config = cfgmod.load_config(args.config)
    out_dir = args.out or config.data_dir
    shift = config.shift_spec().scaled(args.shift_amplitude)
    with output_lock(out_dir):
        src_tr, tgt_tr = data.generate(
            config.classes, config.train_count, config.train_count,
            config.image_size, shift, seed=config.seed,
            n_bands=config.n_bands)
        src_ev, tgt_ev = data.generate(
            config.classes, config.eval_count, config.eval_count,
            config.image_size, shift, seed=config.seed,
            n_bands=config.n_bands, index_offset=config.train_count)
        data.save_dataset(os.path.join(out_dir, SOURCE_TRAIN), src_tr)
        data.save_dataset(os.path.join(out_dir, TARGET_TRAIN),
                          tgt_tr.without_labels())
        data.save_dataset(os.path.join(out_dir, SOURCE_EVAL), src_ev)
        data.save_dataset(os.path.join(out_dir, TARGET_EVAL), tgt_ev)
        with open(os.path.join(out_dir, MANIFEST), "w") as fh:
            fh.write(_manifest_text(config, shift))
    print(f"wrote 4 datasets + manifest to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_bundle(data_dir: str) -> train.DataBundle:
    def load(name):
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise DataError(f"missing dataset file {path} (run gen-data first)")
        return data.load_dataset(path)

    return train.DataBundle(
        source_train=load(SOURCE_TRAIN),
        target_train=load(TARGET_TRAIN).without_labels(),
        source_eval=load(SOURCE_EVAL),
        target_eval=load(TARGET_EVAL),
    )


def _truncate_metrics(path: str, iteration: int) -> None:
    """Drop rows past ``iteration`` so appended rows continue the file."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise DataError(f"{path} does not look like a metrics file")
    kept = [lines[0]]
    for line in lines[1:]:
        if int(line.split(",", 1)[0]) <= iteration:
            kept.append(line)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(kept) + "\n")


def cmd_train(args) -> int:
    config = cfgmod.load_config(args.config)
    out_dir = args.out or config.out_dir
    with output_lock(out_dir):
        cfgmod.echo_config(config, out_dir)
        bundle = _load_bundle(args.data or config.data_dir)
        tcfg = config.train_config()

        metrics_path = os.path.join(out_dir, METRICS_CSV)
        latest_path = os.path.join(out_dir, CKPT_LATEST)
        if args.resume:
            if not os.path.exists(latest_path):
                raise ConfigError(
                    f"--resume given but {latest_path} does not exist")
            state = ckpt.restore_state(tcfg, latest_path)
            _truncate_metrics(metrics_path, state.iteration)
            csv_fh = open(metrics_path, "a", newline="")
        else:
            state = None
            csv_fh = open(metrics_path, "w", newline="")
            csv_fh.write(METRICS_HEADER + "\n")

        try:
            def on_record(record, run_state):
                csv_fh.write(_metrics_row(record) + "\n")
                if record.eval is not None:
                    csv_fh.flush()
                    ckpt.save_checkpoint(latest_path, run_state)

            state, records = train.train_run(bundle, tcfg, state=state,
                                             callback=on_record)
        finally:
            csv_fh.close()
        ckpt.save_checkpoint(latest_path, state)
        ckpt.save_checkpoint(os.path.join(out_dir, CKPT_FINAL), state)

    finals = [r.eval for r in records if r.eval is not None]
    if finals:
        e = finals[-1]
        print(f"done: iteration {state.iteration}, src_acc={e.src_acc:.4f}, "
              f"tgt_acc_st={e.tgt_acc_st:.4f}, tgt_acc_raw={e.tgt_acc_raw:.4f}")
    else:
        print(f"done: iteration {state.iteration}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _square_side(pixels: int, what: str) -> int:
    side = math.isqrt(pixels)
    if side * side != pixels:
        raise DataError(f"{what}: flattened size {pixels} is not square")
    return side


def config_from_tensors(tensors: dict, tier: str) -> train.TrainConfig:
    """Rebuild the geometry a checkpoint was trained with.

    Every shape the models need is recoverable from the tensor table:
    head count from the attention slices, band count from the gate
    matrix, image size and hidden widths from the affine layers.
    """
    try:
        heads = sum(1 for name in tensors if name.startswith("st1.p_kvq."))
        d = tensors["st1.gate_w"].shape[0]
        g_in = tensors["g.w1"].shape[0]
        g_hidden = (tensors["g.w1"].shape[1], tensors["g.w2"].shape[1])
        classes = tensors["g.b3"].shape[0]
        d_in = tensors["cd.w1"].shape[0]
        d_hidden = (tensors["cd.w1"].shape[1], tensors["cd.w2"].shape[1])
    except KeyError as missing:
        raise DataError(f"checkpoint lacks tensor {missing}") from None
    if d % 3 != 0:
        raise DataError(f"gate width {d} is not 3 x bands")
    size = _square_side(g_in // 3, "classifier input")
    if d_in != g_in:
        raise DataError("classifier and discriminator disagree on image size")
    from .models import ModelConfig
    from .transformer import AsaConfig
    return train.TrainConfig(
        model=ModelConfig(image_size=size, classes=classes,
                          classifier_hidden=g_hidden,
                          discriminator_hidden=d_hidden),
        asa=AsaConfig(n_bands=d // 3, n_heads=max(heads, 1)),
        tier=tier,
    )


def _state_from_checkpoint(path: str, tier: str) -> tuple:
    _, tensors = ckpt.load_checkpoint(path)
    config = config_from_tensors(tensors, tier)
    state = ckpt.restore_state(config, path)
    return state, config


def _load_eval_set(data_dir: str, name: str) -> data.Dataset:
    path = os.path.join(data_dir, name)
    if not os.path.exists(path):
        raise DataError(f"missing dataset file {path} (run gen-data first)")
    return data.load_dataset(path)


def cmd_eval(args) -> int:
    state, config = _state_from_checkpoint(args.checkpoint, args.tier)
    src_ev = _load_eval_set(args.data, SOURCE_EVAL)
    tgt_ev = _load_eval_set(args.data, TARGET_EVAL)
    result = train.evaluate(state, config, src_ev, tgt_ev)
    print("iter," + ",".join(train.EvalMetrics.FIELDS))
    print(str(state.iteration) + ","
          + ",".join(_fmt(getattr(result, f))
                     for f in train.EvalMetrics.FIELDS))
    return 0


# ---------------------------------------------------------------------------
# inspect-st
# ---------------------------------------------------------------------------

def cmd_inspect_st(args) -> int:
    state, config = _state_from_checkpoint(args.checkpoint, "two_st_msl")
    tgt_ev = _load_eval_set(args.data, TARGET_EVAL)
    masks = config.make_masks()
    images = np.asarray(tgt_ev.images, dtype=np.float64)

    with output_lock(args.out):
        views, gates = transformer.st_apply(images, state.st1, config.asa,
                                            masks)
        views = views.data
        gates = gates.data

        with open(os.path.join(args.out, "gates.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "channel", "band", "gate_weight"])
            for i in range(gates.shape[0]):
                for c in range(gates.shape[1]):
                    for b in range(gates.shape[2]):
                        writer.writerow([i, c, b, repr(float(gates[i, c, b]))])

        report = metrics.gate_band_report(images, state.st1, config.asa,
                                          masks, tgt_ev.perturbed_bands)
        with open(os.path.join(args.out, "gate_band_report.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["band", "mean_gate", "group"])
            for band, mean_gate, group in report.rows():
                writer.writerow([band, repr(mean_gate), group])

        from .spectral import dump_band_magnitudes
        dump_band_magnitudes(images[0], masks, args.out)

        for i in range(min(4, images.shape[0])):
            write_ppm(os.path.join(args.out, f"sample_{i}_before.ppm"),
                      images[i])
            write_ppm(os.path.join(args.out, f"sample_{i}_after.ppm"),
                      views[i])

    print(f"wrote gate report and images for {images.shape[0]} samples "
          f"to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="suda",
        description="spectral domain adaptation on the synthetic benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the paired-domain datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (default: config data_dir)")
    p.add_argument("--shift-amplitude", type=float, default=1.0,
                   help="extra scale on the domain shift (0 disables it)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (default: config out_dir)")
    p.add_argument("--data", default=None,
                   help="dataset directory (default: config data_dir)")
    p.add_argument("--resume", action="store_true",
                   help="continue from ckpt_latest.bin in the output dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tier", default="two_st_msl", choices=train.TIERS,
                   help="inference pipeline to apply (default two_st_msl)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-st", help="dump gate weights and views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_st)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SudaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
