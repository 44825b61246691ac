"""Command-line interface.

Subcommands: ``synth``, ``augment``, ``train``, ``predict``, ``evaluate`` and
``ablate``. Exit codes: 0 ok, 1 config/usage error, 2 I/O error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .augment import AugmentConfig, RegionExhaustedError, extract_training_set, frame_rng
from .config import ConfigError, RunConfig, load_run_config
from .fcnnet import (
    CheckpointError,
    NumericalError,
    build_network,
    load_checkpoint,
    predict_probmap,
    save_checkpoint,
    stack_samples,
    train,
)
from .imagecore import (
    Image,
    ImageFormatError,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from .metrics import evaluate_dataset, format_table
from .postproc import binarize, connected_components, largest_component, otsu_threshold
from .synthdata import generate_dataset, read_manifest

log = logging.getLogger("polypfcn")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

PATCH_MANIFEST_COLUMNS = 7

ABLATION_ROWS = (
    ("a_smart_norotation", "Image + Patch Selection Method", "smart", False),
    ("b_polyp_only_rotation", "Image + Rotation + Patches of Polyps", "polyp_only", True),
    ("c_smart_rotation", "Image + Rotation + Patch Selection Method", "smart", True),
)


class DataError(RuntimeError):
    """Input data inconsistent with what a command needs."""


def echo_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config.to_ini())


def _angle_tag(angle) -> str:
    return str(int(angle)) if float(angle).is_integer() else f"{float(angle):g}"


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(config: RunConfig, out_dir: Path) -> int:
    manifests = generate_dataset(config.synth, out_dir)
    echo_config(config, out_dir)
    print(
        f"wrote {len(manifests['all'])} frames to {out_dir} "
        f"(train {len(manifests['train'])}, test {len(manifests['test'])})"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment / training data
# ---------------------------------------------------------------------------

def _iter_frame_patches(manifest: Path, aug: AugmentConfig):
    for i, (img_path, mask_path) in enumerate(read_manifest(manifest)):
        image, mask = load_image(img_path), load_mask(mask_path)
        try:
            samples = extract_training_set(image, mask, aug, frame_rng(aug.seed, i))
        except RegionExhaustedError as exc:
            raise DataError(f"frame {img_path.stem}: {exc}") from None
        yield img_path.stem, samples


def cmd_augment(config: RunConfig, manifest: Path, out_dir: Path) -> int:
    patch_dir = out_dir / "patches"
    patch_dir.mkdir(parents=True, exist_ok=True)
    echo_config(config, out_dir)
    counts = {"inside": 0, "background": 0, "boundary": 0}
    lines = []
    per_angle = config.augment.patches_per_image
    for frame, samples in _iter_frame_patches(manifest, config.augment):
        for j, s in enumerate(samples):
            stem = f"{frame}_{_angle_tag(s.angle)}_{j % per_angle}_{s.region}"
            save_image(s.image_patch, patch_dir / f"{stem}.ppm")
            save_mask(s.mask_patch, patch_dir / f"{stem}.pgm")
            counts[s.region] += 1
            lines.append(
                f"patches/{stem}.ppm\tpatches/{stem}.pgm\t{s.region}\t{s.center[0]}\t{s.center[1]}"
                f"\t{_angle_tag(s.angle)}\t{int(s.flipped)}\n"
            )
    (out_dir / "patches.txt").write_text("".join(lines))
    total = sum(counts.values())
    print(f"{total} patches: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _manifest_columns(manifest: Path) -> int:
    for line in manifest.read_text().splitlines():
        if line.strip():
            return len(line.split("\t"))
    raise DataError(f"{manifest}: empty manifest")


def load_training_arrays(manifest: Path, config: RunConfig):
    """Patch arrays from a patch manifest or, for a frame manifest, by
    running the patch selection in memory."""
    dtype = config.train.dtype
    columns = _manifest_columns(manifest)
    if columns == PATCH_MANIFEST_COLUMNS:
        base = manifest.parent
        images, targets = [], []
        for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != PATCH_MANIFEST_COLUMNS:
                raise DataError(f"{manifest}:{lineno}: expected {PATCH_MANIFEST_COLUMNS} columns")
            images.append(load_image(base / cols[0]).data.transpose(2, 0, 1).astype(dtype))
            targets.append(load_mask(base / cols[1]).data)
        return np.stack(images), np.stack(targets)
    if columns != 2:
        raise DataError(f"{manifest}: unrecognised manifest with {columns} columns")
    images, targets = [], []
    for _, samples in _iter_frame_patches(manifest, config.augment):
        im, tg = stack_samples(samples, dtype)
        images.append(im)
        targets.append(tg)
    return np.concatenate(images), np.concatenate(targets)


def cmd_train(config: RunConfig, manifest: Path, out_dir: Path) -> int:
    echo_config(config, out_dir)
    images, targets = load_training_arrays(manifest, config)
    network = build_network(config.network, np.random.default_rng(config.train.seed), config.train.dtype)
    log_path = out_dir / "epoch_log.txt"
    log_path.write_text("")
    best = {"loss": float("inf")}

    def on_epoch(record, net):
        with log_path.open("a") as fh:
            fh.write(f"epoch={record.epoch} loss={record.loss:.9g} batches={record.batches}\n")
        if record.loss < best["loss"]:
            best["loss"] = record.loss
            save_checkpoint(net, out_dir / "best.ckpt")
        log.info("epoch %d loss %.6f", record.epoch, record.loss)

    try:
        train(network, images, targets, config.train, on_epoch)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(network, out_dir / "final.ckpt")
    if not (out_dir / "best.ckpt").exists():
        save_checkpoint(network, out_dir / "best.ckpt")
    print(f"trained on {len(images)} patches; checkpoint {out_dir / 'final.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict / evaluate
# ---------------------------------------------------------------------------

def cmd_predict(config: RunConfig, ckpt: Path, manifest: Path, out_dir: Path) -> int:
    network = load_checkpoint(ckpt)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(config, out_dir)
    pp = config.postproc
    frames = read_manifest(manifest)
    for img_path, _ in frames:
        prob = predict_probmap(network, load_image(img_path))
        raw = binarize(prob, otsu_threshold(prob, pp.bins))
        post = largest_component(connected_components(raw, pp.connectivity))
        stem = img_path.stem
        save_image(Image(prob.data), out_dir / f"{stem}_prob.pgm")
        save_mask(raw, out_dir / f"{stem}_otsu.pgm")
        save_mask(post, out_dir / f"{stem}_post.pgm")
    print(f"predicted {len(frames)} frames into {out_dir}")
    return EXIT_OK


def evaluate_predictions(config: RunConfig, pred_dir: Path, manifest: Path):
    """``(raw_report, post_report)`` for the Otsu and post-processed masks."""
    triples = {"otsu": [], "post": []}
    for img_path, mask_path in read_manifest(manifest):
        gt = load_mask(mask_path)
        for kind in triples:
            pred_path = pred_dir / f"{img_path.stem}_{kind}.pgm"
            if not pred_path.exists():
                raise DataError(f"missing prediction {pred_path} for frame {img_path.stem}")
            triples[kind].append((img_path.stem, load_mask(pred_path), gt))
    mc = config.metrics
    raw = evaluate_dataset(triples["otsu"], mc.connectivity, mc.min_iou, label="fcn_otsu")
    post = evaluate_dataset(triples["post"], mc.connectivity, mc.min_iou, label="postprocessed")
    return raw, post


def cmd_evaluate(config: RunConfig, pred_dir: Path, manifest: Path, out_dir: Path | None) -> int:
    raw, post = evaluate_predictions(config, pred_dir, manifest)
    out_dir = out_dir or pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_table(
        [("FCN + Otsu", raw.row()), ("FCN + Otsu + largest CC", post.row())], title="Output"
    )
    (out_dir / "report.txt").write_text(table)
    (out_dir / "report.jsonl").write_text(raw.to_jsonl() + post.to_jsonl())
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(config: RunConfig, out_dir: Path) -> int:
    data_dir = out_dir / "data"
    generate_dataset(config.synth, data_dir)
    echo_config(config, out_dir)
    rows, records = [], []
    for tag, title, strategy, rotate in ABLATION_ROWS:
        aug = replace(config.augment, strategy=strategy)
        if not rotate:
            aug = replace(aug, angles=(0,))
        row_config = replace(config, augment=aug)
        row_dir = out_dir / tag
        code = cmd_train(row_config, data_dir / "train.txt", row_dir / "model")
        if code != EXIT_OK:
            return code
        cmd_predict(row_config, row_dir / "model" / "final.ckpt", data_dir / "test.txt", row_dir / "pred")
        raw, post = evaluate_predictions(row_config, row_dir / "pred", data_dir / "test.txt")
        (row_dir / "report.jsonl").write_text(raw.to_jsonl() + post.to_jsonl())
        rows.append((title, post.row()))
        records.append({"row": tag, "title": title, "macro": post.macro,
                        "micro": post.micro, "fppf": post.fppf, "raw_macro": raw.macro})
    table = format_table(rows, title="Training Set")
    (out_dir / "ablation.txt").write_text(table)
    (out_dir / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for synth, augment and train")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="polypfcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("augment", parents=[common], help="dump training patches")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--strategy", choices=("smart", "polyp_only"))
    p.add_argument("--angles", help="comma-separated rotation angles in degrees")

    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--manifest", type=Path, required=True, help="frame or patch manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--strategy", choices=("smart", "polyp_only"))
    p.add_argument("--angles")

    p = sub.add_parser("predict", parents=[common], help="probability maps and masks")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="metrics table for predictions")
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("ablate", parents=[common], help="three-row patch-strategy comparison")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--epochs", type=int)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    flag_map = {
        "count": "synth.count",
        "size": "synth.size",
        "strategy": "augment.strategy",
        "angles": "augment.angles",
        "epochs": "train.epochs",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    config = load_run_config(args.config, overrides)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        config = config.with_seed(args.seed)
    return config


def dispatch(args, config: RunConfig) -> int:
    if args.command == "synth":
        return cmd_synth(config, args.out)
    if args.command == "augment":
        return cmd_augment(config, args.manifest, args.out)
    if args.command == "train":
        return cmd_train(config, args.manifest, args.out)
    if args.command == "predict":
        return cmd_predict(config, args.ckpt, args.manifest, args.out)
    if args.command == "evaluate":
        return cmd_evaluate(config, args.pred_dir, args.manifest, args.out)
    if args.command == "ablate":
        return cmd_ablate(config, args.out)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = resolve_config(args)
        with threadpool_limits(limits=args.threads):
            return dispatch(args, config)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
