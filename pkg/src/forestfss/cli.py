"""Command-line entry points: prepare, train, eval, ablation, predict.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, load_run_config
from .dataio import (
    DEEPGLOBE_LABELS,
    LANDCOVER_LABELS,
    ClassMapping,
    DataError,
    Episode,
    LabeledTile,
    ManifestRow,
    decode_color_mask,
    Geography,
    forest_mapping,
    load_tiles,
    qualification_counts,
    read_label_table,
    read_manifest,
    read_mask,
    read_rgb,
    remap_labels,
    resize_tile,
    tile_image,
    write_manifest,
)
from .engine import (
    ABLATION_ROWS,
    FOREST,
    NumericError,
    RefinedMaskCache,
    evaluate,
    load_checkpoint,
    predict_episode,
    run_ablation_suite,
    train,
    train_pool,
)
from .grabcut import save_mask_png

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("forestfss")

# overlay tint per episode class; background stays untinted
_TINT = {1: (0, 200, 0), 2: (0, 90, 255)}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ prepare


def _mapping(name: str, way: int, label_table: dict | None) -> ClassMapping:
    if name == "deepglobe":
        return forest_mapping(DEEPGLOBE_LABELS, way)
    if name == "landcover":
        return forest_mapping(LANDCOVER_LABELS, way)
    if name == "table":
        if not label_table or not all(isinstance(k, int) for k in label_table):
            raise UsageError("--mapping table needs a --label-table with value,label rows")
        names = ["Unknown"] * (max(label_table) + 1)
        for v, lab in label_table.items():
            names[v] = lab
        return forest_mapping(names, way)
    return ClassMapping.identity(["Background", "Forest", "Water"][: way + 1])


def cmd_prepare(args) -> int:
    root = Path(args.data_root)
    out = Path(args.out)
    rows = read_manifest(args.manifest, root)
    table = read_label_table(args.label_table) if args.label_table else None
    colors = {k: v for k, v in table.items() if isinstance(k, tuple)} if table else {}
    mapping = _mapping(args.mapping, args.way, table)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    out_rows, tiles_seen = [], []
    unreadable = []
    for r in rows:
        try:
            image = read_rgb(root / r.image_path)
            raw = read_mask(root / r.mask_path)
        except DataError as exc:
            unreadable.append(str(exc))
            continue
        if raw.ndim == 3:
            if not colors:
                raise DataError(f"{r.mask_path} is a color mask; pass an r,g,b,value --label-table")
            raw = decode_color_mask(raw, colors)
        try:
            mask = remap_labels(raw, mapping)
        except DataError as exc:
            raise DataError(f"{r.mask_path}: {exc}") from None
        stem = Path(r.image_path).with_suffix("").as_posix().replace("/", "_")
        try:
            tiles = tile_image(image, mask, args.tile_size, stem, r.geography)
        except ValueError as exc:
            raise DataError(f"{r.image_path}: {exc}") from None
        for t in tiles:
            if args.resize:
                t = resize_tile(t, args.resize)
            name = t.source_id.replace("@", "_").replace(",", "_")
            img_rel, msk_rel = f"tiles/{name}.png", f"tiles/{name}_mask.png"
            Image.fromarray(np.asarray(t.pixels)).save(out / img_rel)
            Image.fromarray(np.asarray(t.mask)).save(out / msk_rel)
            out_rows.append(ManifestRow(img_rel, msk_rel, r.geography, r.split))
            tiles_seen.append(t)
    if unreadable:
        raise DataError("unreadable inputs: " + "; ".join(unreadable))
    write_manifest(out / "manifest.csv", out_rows, checksums=True, data_root=out)
    counts = qualification_counts(tiles_seen, mapping.way + 1)
    print(f"wrote {len(out_rows)} tiles from {len(rows)} images to {out / 'manifest.csv'}")
    for c, n in counts.items():
        print(f"  class {c} ({mapping.classes[c]}): {n} qualifying tiles")
    return EXIT_OK


# ------------------------------------------------------------------ train / eval


def _train_overrides(args) -> dict:
    return {
        "seed": args.seed,
        "iterations": args.iterations,
        "lr": args.lr,
        "way": args.way,
        "shot": args.shot,
        "row": args.ablation,
        "architecture": args.backbone,
    }


def cmd_train(args) -> int:
    config, ablation = load_run_config(args.config, _train_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train(config, ablation, train_pool(config), out_dir=out, log_path=out / "train_log.ndjson")
    print(ckpt.path)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    manifest = args.manifest or ckpt.config.test_manifest
    if not manifest:
        raise UsageError("no --manifest given and the checkpoint names no test manifest")
    data_root = args.data_root or str(Path(manifest).parent)
    report = evaluate(ckpt, None, args.way, args.shot, args.episodes, args.seed, manifest, data_root)
    if args.report:
        report.write(args.report)
    print(f"forest IoU {report.forest_iou:.4f}  mIoU {report.miou:.4f}  ({report.episodes} episodes, seed {report.seed})")
    return EXIT_OK


def cmd_ablation(args) -> int:
    config, _ = load_run_config(args.config, _train_overrides(args))
    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    bad = [r for r in rows if r not in ABLATION_ROWS]
    if bad:
        raise UsageError(f"unknown ablation rows {bad}; expected {', '.join(ABLATION_ROWS)}")
    settings = []
    for item in args.settings.split(","):
        way, _, shot = item.partition("x")
        settings.append((int(way), int(shot)))
    test_rows = read_manifest(config.test_manifest, config.data_root)
    test_tiles = load_tiles(test_rows, config.data_root, geography=Geography.TEST, side=config.image_side)
    eval_seed = args.seed if args.seed is not None else 0
    table = run_ablation_suite(config, rows, settings, train_pool(config), test_tiles, args.episodes, eval_seed)
    text = table.render()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.md").write_text(text + "\n", encoding="utf-8")
        (out / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# ------------------------------------------------------------------ predict


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _class_mask_file(path: Path, way: int) -> np.ndarray:
    m = read_mask(path)
    if m.ndim == 3:
        m = m[..., 0]
    values = set(np.unique(m).tolist())
    if values <= {0, 255}:
        m = (m == 255).astype(np.uint8)
    elif max(values) > way:
        raise DataError(f"{path}: mask values {sorted(values)} exceed the {way}-way class range")
    return m.astype(np.uint8)


def overlay(pixels: np.ndarray, labels: np.ndarray, strength: float = 0.45) -> np.ndarray:
    """Tint each foreground class over the image; background is unchanged."""
    out = pixels.astype(np.float64)
    for c, rgb in _TINT.items():
        sel = labels == c
        out[sel] = (1 - strength) * out[sel] + strength * np.array(rgb, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    if len(args.support_image) != len(args.support_mask):
        raise UsageError("--support-image and --support-mask must be given the same number of times")
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    config = ckpt.config
    way = args.way or config.way
    supports = []
    for i, (img_path, msk_path) in enumerate(zip(args.support_image, args.support_mask)):
        pixels = read_rgb(_existing(img_path, "support image"))
        mask = _class_mask_file(_existing(msk_path, "support mask"), way)
        if pixels.shape[:2] != mask.shape:
            raise DataError(f"support {i}: image {pixels.shape[:2]} and mask {mask.shape} differ in size")
        if not (mask == FOREST).any():
            raise DataError(f"support mask {msk_path} has no foreground pixels")
        supports.append(resize_tile(LabeledTile(pixels, mask, f"support{i}:{img_path}"), config.image_side))
    q_pixels = read_rgb(_existing(args.query_image, "query image"))
    h, w = q_pixels.shape[:2]
    dummy = np.zeros((h, w), dtype=np.uint8)
    query = resize_tile(LabeledTile(q_pixels, dummy, "query"), config.image_side)
    ep = Episode(tuple(supports), query, way, len(supports))
    refiner = None
    if ckpt.ablation.use_grabcut:
        refiner = RefinedMaskCache(config.grabcut_iterations, config.grabcut_gamma, config.grabcut_k, args.seed)
    run_config = dataclasses.replace(config, way=way, shot=len(supports))
    pred = predict_episode(ckpt.model, ep, ckpt.ablation, refiner, run_config)
    if args.debug_dir and refiner is not None:
        debug = Path(args.debug_dir)
        debug.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(supports):
            save_mask_png(refiner.get(t, FOREST), debug / f"support{i}_grabcut.png")
    labels = pred.labels.numpy().astype(np.uint8)
    labels = np.asarray(Image.fromarray(labels).resize((w, h), Image.NEAREST))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels).save(out)
    if args.overlay:
        Image.fromarray(overlay(q_pixels, labels)).save(args.overlay)
    if args.probabilities:
        np.save(args.probabilities, pred.probabilities.numpy().astype(np.float32))
    frac = float((labels == FOREST).mean())
    print(f"wrote {out} (forest fraction {frac:.3f})")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forestfss", description="Few-shot forest segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="tile, remap and resize a raw dataset")
    sp.add_argument("--data-root", required=True, help="directory the input manifest paths are relative to")
    sp.add_argument("--manifest", required=True, help="CSV: image_path,mask_path,geography,split")
    sp.add_argument("--tile-size", type=int, default=612)
    sp.add_argument("--resize", type=int, default=128, help="output tile side; 0 keeps the tile size")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mapping", choices=("deepglobe", "landcover", "table", "identity"), default="deepglobe")
    sp.add_argument("--way", type=int, choices=(1, 2), default=1)
    sp.add_argument("--label-table", help="CSV with value,label or r,g,b,value rows")
    sp.set_defaults(func=cmd_prepare)

    def train_flags(sp):
        sp.add_argument("--config", help="INI run config; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--way", type=int)
        sp.add_argument("--shot", type=int)
        sp.add_argument("--backbone", choices=("tiny-cnn", "reference-vgg16"))

    sp = sub.add_parser("train", help="episodic training")
    train_flags(sp)
    sp.add_argument("--ablation", choices=list(ABLATION_ROWS), help="ablation row preset")
    sp.add_argument("--out", required=True, help="output directory for checkpoints and the loss log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on test-domain episodes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", help="test manifest; defaults to the one recorded in the checkpoint")
    sp.add_argument("--data-root", help="defaults to the manifest's directory")
    sp.add_argument("--way", type=int)
    sp.add_argument("--shot", type=int)
    sp.add_argument("--episodes", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--report", help="write the metrics report as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablation", help="train and evaluate every ablation row")
    train_flags(sp)
    sp.set_defaults(ablation=None)
    sp.add_argument("--rows", help="comma-separated row names; default all")
    sp.add_argument("--settings", default="1x1,1x5,2x1,2x5", help="comma-separated WAYxSHOT")
    sp.add_argument("--episodes", type=int, default=1000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("predict", help="segment one query image from K support pairs")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--support-image", action="append", required=True)
    sp.add_argument("--support-mask", action="append", required=True)
    sp.add_argument("--query-image", required=True)
    sp.add_argument("--out", required=True, help="class-index PNG")
    sp.add_argument("--overlay", help="optional tinted overlay PNG")
    sp.add_argument("--probabilities", help="write the class probability field (n x side x side) as .npy")
    sp.add_argument("--way", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--debug-dir", help="write GrabCut-refined support masks here")
    sp.set_defaults(func=cmd_predict)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"forestfss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"forestfss: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"forestfss: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
