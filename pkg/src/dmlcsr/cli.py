"""Command line entry point: generate-data, edges, train, eval, infer, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from .ablation import ARMS, markdown_table, run_ablation, synthetic_splits, train_run
from .config import CLASS_NAMES, HELEN_GROUPS, ConfigError, RunConfig, SceneConfig
from .csr import TrainingDiverged
from .data import SplitData, generate_sample, inject_label_noise
from .edge_labels import binary_edges, category_edges
from .estimator import FaceParser
from .metrics import confusion_matrix, summarize
from .model import CheckpointError
from .validation import check_images, check_label_maps

EXIT_CONFIG = 2  # bad config, or checkpoint that does not fit the model
EXIT_DIVERGED = 3
EXIT_INPUT = 4  # missing or malformed input files
EXIT_CHECKPOINT = 5  # unreadable checkpoint file
EXIT_USAGE = 6

# 19 overlay colors in the extended face taxonomy order (background first).
OVERLAY_CLASSES = ("background", "skin", "nose", "glasses", "left_eye", "right_eye", "left_brow", "right_brow",
                   "left_ear", "right_ear", "inner_mouth", "upper_lip", "lower_lip", "hair", "hat", "earring",
                   "necklace", "neck", "cloth")
OVERLAY_PALETTE = np.array([
    (0, 0, 0), (204, 0, 0), (76, 153, 0), (204, 204, 0), (51, 51, 255), (204, 0, 204), (0, 255, 255),
    (255, 204, 204), (102, 51, 0), (255, 0, 0), (102, 204, 0), (255, 255, 0), (0, 0, 153), (0, 0, 204),
    (255, 51, 153), (0, 204, 204), (0, 51, 0), (255, 153, 51), (0, 204, 0)], dtype=np.uint8)
CLASS_COLORS = OVERLAY_PALETTE[[OVERLAY_CLASSES.index(name) for name in CLASS_NAMES]]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}", EXIT_USAGE)


def _env_seed(default: int = 0) -> int:
    raw = os.environ.get("DMLCSR_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"DMLCSR_SEED must be an integer, got {raw!r}", EXIT_CONFIG) from None


def _run_config(args) -> RunConfig:
    """Preset, then environment seed, then config file, then ``--set`` overrides."""
    base = config_mod.preset(args.preset)
    base.seed = base.data.seed = _env_seed(base.seed)
    cfg = config_mod.from_text(Path(args.config).read_text(), base) if args.config else base
    config_mod.apply_overrides(cfg, args.set or [])
    cfg.validate()
    return cfg


# --- image I/O ---------------------------------------------------------------

def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {path}: {exc}", EXIT_INPUT) from None
    return rgb


def _read_labels(path, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ValueError(f"expected a single-channel label PNG, got mode {im.mode}")
            labels = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read label map {path}: {exc}", EXIT_INPUT) from None
    try:
        return check_label_maps(labels, num_classes)[0].astype(np.uint8)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None


def _write_png(path, array: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path)


def _to_uint8_rgb(image_chw: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image_chw, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)


def load_dataset_dir(root) -> tuple[np.ndarray, np.ndarray]:
    """Images and labels listed in a ``manifest.tsv`` written by generate-data."""
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise CliError(f"{manifest} not found (run generate-data or pass --synth)", EXIT_INPUT)
    images, labels = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            images.append(_read_image(root / row["image"]))
            labels.append(_read_labels(root / row["label"]))
    if not images:
        raise CliError(f"{manifest} lists no samples", EXIT_INPUT)
    try:
        return check_images(np.stack(images)), np.stack(labels)
    except ValueError as exc:
        raise CliError(f"{root}: {exc}", EXIT_INPUT) from None


def _dataset(cfg: RunConfig, synth: bool) -> SplitData:
    if synth:
        return synthetic_splits(cfg)
    if not cfg.data_dir:
        raise CliError("no dataset: set data_dir (with train/ and val/ from generate-data) or pass --synth",
                       EXIT_INPUT)
    tx, ty = load_dataset_dir(Path(cfg.data_dir) / "train")
    vx, vy = load_dataset_dir(Path(cfg.data_dir) / "val")
    return SplitData(tx, ty, ty, vx, vy)


# --- subcommands ---------------------------------------------------------------

def cmd_generate_data(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed()
    if args.count < 1:
        raise CliError("--count must be positive", EXIT_CONFIG)
    if not 0.0 <= args.noise_rate <= 1.0:
        raise CliError("--noise-rate must lie in [0, 1]", EXIT_CONFIG)
    scene = SceneConfig(image_size=args.size)
    out = Path(args.out)
    rows = []
    for i in range(args.count):
        sample_seed = 1_000_003 * seed + i
        sample = generate_sample(sample_seed, scene)
        labels = inject_label_noise(sample.labels, args.noise_rate, sample_seed)
        image_rel, label_rel = f"images/{i:06d}.png", f"labels/{i:06d}.png"
        _write_png(out / image_rel, _to_uint8_rgb(sample.image))
        _write_png(out / label_rel, labels.astype(np.uint8))
        rows.append((i, image_rel, label_rel, sample_seed))
    with open(out / "manifest.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(("index", "image", "label", "seed"))
        writer.writerows(rows)
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_edges(args) -> int:
    labels = _read_labels(args.labels, args.num_classes)
    prefix = args.out_prefix
    _write_png(f"{prefix}_binary.png", binary_edges(labels, args.thickness) * 255)
    for j, plane in enumerate(category_edges(labels, args.num_classes, args.thickness)):
        _write_png(f"{prefix}_class_{j:02d}.png", plane * 255)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out or cfg.out_dir)
    cfg.out_dir = str(out)
    data = _dataset(cfg, args.synth)
    result = train_run(cfg, data, out)
    print(f"best mean F1 {result.best_metric:.4f}; outputs in {out}")
    return 0


def _format_report(report: dict) -> str:
    lines = [f"{'class':<14}{'F1':>8}{'IoU':>8}"]
    for row in report["per_class"]:
        iou = "-" if row["iou"] is None else f"{row['iou']:.4f}"
        lines.append(f"{row['class']:<14}{row['f1']:>8.4f}{iou:>8}")
    lines.append(f"mean F1     {report['mean_f1']:.4f}")
    if "overall_f1" in report:
        lines.append(f"overall F1  {report['overall_f1']:.4f}")
    lines.append(f"mIoU        {report['miou']:.4f}")
    return "\n".join(lines)


def _load_parser(path) -> FaceParser:
    try:
        return FaceParser.from_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found", EXIT_INPUT) from None
    except CheckpointError as exc:
        code = EXIT_CONFIG if "mismatch" in str(exc) or "lacks" in str(exc) else EXIT_CHECKPOINT
        raise CliError(str(exc), code) from None
    except (TypeError, ConfigError) as exc:
        raise CliError(f"checkpoint {path} has an unusable model description: {exc}", EXIT_CONFIG) from None


def cmd_eval(args) -> int:
    parser = _load_parser(args.checkpoint)
    if args.data:
        images, labels = load_dataset_dir(args.data)
    else:
        cfg = _run_config(args)
        data = synthetic_splits(cfg)
        images, labels = data.val_images, data.val_labels
    pred = parser.predict(images)
    report = summarize(confusion_matrix(pred, labels, len(CLASS_NAMES)), HELEN_GROUPS, CLASS_NAMES)
    print(json.dumps(report, sort_keys=True) if args.json else _format_report(report))
    return 0


def overlay(image_rgb: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    colors = CLASS_COLORS[labels].astype(np.float32)
    return np.round((1 - alpha) * image_rgb.astype(np.float32) + alpha * colors).astype(np.uint8)


def cmd_infer(args) -> int:
    parser = _load_parser(args.checkpoint)
    rgb = _read_image(args.image)
    try:
        labels = parser.predict(rgb[None])[0]
    except ValueError as exc:
        raise CliError(f"{args.image}: {exc}", EXIT_INPUT) from None
    out = Path(args.out)
    _write_png(out, labels)
    overlay_path = Path(args.overlay) if args.overlay else out.with_name(out.stem + "_overlay.png")
    _write_png(overlay_path, overlay(rgb, labels))
    print(f"wrote {out} and {overlay_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out or cfg.out_dir)
    rows = run_ablation(cfg, out, arms=args.arms or tuple(ARMS))
    print(markdown_table(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmlcsr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic labelled face corpus as PNGs")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help="defaults to $DMLCSR_SEED, then 0")
    g.add_argument("--noise-rate", type=float, default=0.0)
    g.add_argument("--size", type=int, default=96)
    g.set_defaults(func=cmd_generate_data)

    e = sub.add_parser("edges", help="binary and per-class edge maps of a label PNG")
    e.add_argument("--labels", required=True)
    e.add_argument("--out-prefix", required=True)
    e.add_argument("--num-classes", type=int, default=len(CLASS_NAMES))
    e.add_argument("--thickness", type=int, default=1)
    e.set_defaults(func=cmd_edges)

    def add_config_args(sp):
        sp.add_argument("config", nargs="?", help="flat 'section.key = value' config file")
        sp.add_argument("--preset", default="desk", choices=("desk", "full"))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="train and write checkpoints, log and final_metrics.json")
    add_config_args(t)
    t.add_argument("--synth", action="store_true", help="train on generated data instead of data_dir")
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("checkpoint")
    add_config_args(v)
    v.add_argument("--data", help="generate-data directory (default: the synthetic validation split)")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="parse one image")
    i.add_argument("checkpoint")
    i.add_argument("image")
    i.add_argument("--out", required=True, help="class-index PNG")
    i.add_argument("--overlay", help="color overlay PNG (default: <out>_overlay.png)")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train the four ablation arms")
    add_config_args(a)
    a.add_argument("--out")
    a.add_argument("--arms", nargs="+", choices=tuple(ARMS))
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"ERROR: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"ERROR: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
