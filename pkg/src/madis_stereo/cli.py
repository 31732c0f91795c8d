"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 runtime or data error.
Configuration precedence: explicit flags > ``--config`` YAML file > defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import analysis, data, metrics, trainer
from .distillation import make_masks
from .model import ModelConfig
from .tensor import no_grad

log = logging.getLogger("madis_stereo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_taps(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in str(text).split(","))


def _config_fields():
    """(name, type) for every TrainConfig/ModelConfig field, shared names once."""
    seen = {}
    for cls in (trainer.TrainConfig, ModelConfig):
        for f in fields(cls):
            if f.name in seen:
                continue
            default = getattr(cls(), f.name)
            if f.name == "fusion_taps":
                kind = _parse_taps
            elif isinstance(default, bool):
                kind = _parse_bool
            else:
                kind = type(default)
            seen[f.name] = kind
    return seen


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of TrainConfig/ModelConfig keys")
    group = p.add_argument_group("configuration overrides")
    for name, kind in _config_fields().items():
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", type=kind, default=None)


def load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        values = yaml.safe_load(f) or {}
    if not isinstance(values, dict):
        raise UsageError(f"{path}: config must be a key-value mapping")
    known = _config_fields()
    unknown = set(values) - set(known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        out[k] = known[k](v) if k == "fusion_taps" and isinstance(v, str) else v
    return out


def resolve_config(args) -> tuple[trainer.TrainConfig, ModelConfig]:
    values = load_config_file(getattr(args, "config", None))
    for name in _config_fields():
        flag = getattr(args, f"cfg_{name}", None)
        if flag is not None:
            values[name] = flag
    if "fusion_taps" in values and values["fusion_taps"] is not None:
        values["fusion_taps"] = tuple(values["fusion_taps"])
    train_keys = {f.name for f in fields(trainer.TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)}
    tcfg = trainer.TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
    mvals = {k: v for k, v in values.items() if k in model_keys}
    mvals.setdefault("mask_ratio", tcfg.mask_ratio)
    return tcfg, ModelConfig(**mvals)


def _load_split(root, split):
    samples = data.load_dataset(root, split)
    if not samples:
        raise FileNotFoundError(f"no samples in {Path(root) / split}")
    return samples


def _default_eval_split(root) -> str:
    return "val" if (Path(root) / "val").is_dir() else "train"


# -- commands -----------------------------------------------------------------


def cmd_synth_data(args) -> int:
    params = data.SceneParams(max_disparity=args.max_disparity)
    rng = np.random.default_rng(args.seed)
    splits = [("train", args.count)] + ([("val", args.val_count)] if args.val_count else [])
    for split, count in splits:
        samples = []
        for _ in range(count):
            s = data.synth_generate(int(rng.integers(2**31)), args.height, args.width, params)
            if args.keep_fraction < 1.0:
                s = data.sparsify_gt(s, args.keep_fraction, int(rng.integers(2**31)))
            samples.append(s)
        folder = data.save_dataset(samples, args.out, split)
        print(f"wrote {count} samples to {folder}")
    return 0


def cmd_train(args) -> int:
    tcfg, mcfg = resolve_config(args)
    train_set = _load_split(args.data, "train")
    val_dir = Path(args.data) / "val"
    eval_set = data.load_dataset(args.data, "val") if val_dir.is_dir() else None
    if args.resume:
        tr = trainer.Trainer.load(args.resume, train_set)
    else:
        tr = trainer.Trainer(tcfg, mcfg, train_set)
    tr.run(num_steps=args.steps, eval_set=eval_set, out_dir=args.out)
    last = tr.reports[-1] if tr.reports else None
    if last:
        print(f"step={tr.step} loss_total={last.loss_total:.6f} loss_disp={last.loss_disp:.6f}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint_last.npz'}")
    return 0


def _format_row(row: dict, keys) -> str:
    return " ".join(f"{row[k]:.3f}" for k in keys)


def cmd_eval(args) -> int:
    split = args.split or _default_eval_split(args.data)
    samples = _load_split(args.data, split)
    if args.predictions:
        folder = Path(args.predictions)
        ids = sorted(p.name[: -len("_left.png")] for p in (Path(args.data) / split).glob("*_left.png"))
        preds = [data.read_pfm(folder / f"{i}_pred.pfm") for i in ids]
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        model, teacher_enc, _ = trainer.load_model(args.checkpoint)
        encoder = teacher_enc if args.path == "teacher" and teacher_enc is not None else None
        preds = list(trainer.predict_dataset(model, samples, encoder))
    row = trainer.evaluate_predictions(preds, samples)
    keys = list(metrics.METRIC_COLUMNS)
    if args.d1:
        d = np.concatenate([np.asarray(p).ravel() for p in preds])
        gt = np.concatenate([s.d_gt_dense.ravel() for s in samples])
        valid = np.concatenate([s.valid.ravel() for s in samples])
        row["D1"] = metrics.d1(d, gt, valid & (gt > 0))
        keys.append("D1")
    print(" ".join(keys))
    print(_format_row(row, keys))
    return 0


def cmd_ablate(args) -> int:
    tcfg, mcfg = resolve_config(args)
    train_set = _load_split(args.data, "train")
    val_dir = Path(args.data) / "val"
    eval_set = data.load_dataset(args.data, "val") if val_dir.is_dir() else None
    arms = args.arms.split(",") if args.arms else None
    rows = trainer.ablate(args.mode, tcfg, train_set, mcfg, eval_set, csv_path=args.out, arms=arms)
    sys.stdout.write(trainer.rows_to_csv(rows))
    return 0


def cmd_analyze_attention(args) -> int:
    model, teacher_enc, _ = trainer.load_model(args.checkpoint)
    split = args.split or _default_eval_split(args.data)
    samples = _load_split(args.data, split)
    encoder = teacher_enc if args.path == "teacher" and teacher_enc is not None else None
    rows = analysis.collect_and_emit(model, samples, args.out, kind=args.kind, encoder=encoder)
    for layer, value in analysis.layer_means(rows).items():
        print(f"layer {layer}: {value:.3f} px")
    return 0


def cmd_reconstruct_demo(args) -> int:
    model, _, _ = trainer.load_model(args.checkpoint)
    split = args.split or _default_eval_split(args.data)
    samples = _load_split(args.data, split)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} outside 0..{len(samples) - 1}")
    s = samples[args.index]
    cfg = model.cfg
    ratio = cfg.mask_ratio if args.mask_ratio is None else args.mask_ratio
    lm, rm = make_masks(cfg.num_patches, ratio, 1, args.seed)
    with no_grad():
        out = model.forward_student(s.left[None], s.right[None], lm, rm)
    pix = lm[0].pixel_mask(cfg.patch_size, cfg.grid_h, cfg.grid_w)[:, :, None]
    masked = np.where(pix, 0.5, s.left)
    recon = np.clip(out.recon_left.data[0], 0.0, 1.0)
    pasted = np.where(pix, recon, s.left)
    data.write_image(args.out, np.concatenate([s.left, masked, recon, pasted], axis=1))
    print(f"wrote {args.out} (original | masked | reconstruction | reconstruction pasted into visible)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="madis-stereo", description="Masked stereo transformer with EMA-teacher distillation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic stereo dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--val-count", type=int, default=0)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--max-disparity", type=int, default=14)
    s.add_argument("--keep-fraction", type=float, default=1.0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    s.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or saved predictions")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="directory of {idx}_pred.pfm files")
    s.add_argument("--split")
    s.add_argument("--path", choices=("teacher", "student"), default="teacher")
    s.add_argument("--d1", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run an ablation sweep and write CSV")
    s.add_argument("--mode", required=True, choices=trainer.ABLATION_MODES)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--arms", help="comma-separated subset of arm labels")
    _add_config_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("analyze-attention", help="per-layer/head attention distance CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--kind", choices=("cross", "self"), default="cross")
    s.add_argument("--path", choices=("teacher", "student"), default="teacher")
    s.set_defaults(func=cmd_analyze_attention)

    s = sub.add_parser("reconstruct-demo", help="save original/masked/reconstructed strip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mask-ratio", type=float, default=None)
    s.set_defaults(func=cmd_reconstruct_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(f"madis-stereo: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"madis-stereo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
