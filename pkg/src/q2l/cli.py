"""Command line entry point: ``q2l {generate-data,train,eval,infer,export-attn}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data import DataConfig, DatasetError, generate_dataset, load_dataset, read_ppm, size_bucket_eval_split
from .metrics import mean_ap, per_category_ap, threshold_metrics
from .model import ModelConfig, init_baseline, init_model, load_checkpoint
from .numcore import FormatError
from .trainer import TrainConfig, train
from .validation import check_probabilities
from .visualize import DEFAULT_SCALE, export_attention

log = logging.getLogger("q2l")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit status 2."""


# -- run configuration -------------------------------------------------------------

# Flat key → default.  Keys double as argparse destinations and JSON config keys.
TRAIN_DEFAULTS = {
    "data": None,
    "eval_data": None,
    "out": None,
    "model": "q2l",
    "patch_size": 8,
    "d_backbone": 64,
    "d_model": 64,
    "heads": 4,
    "d_ff": 128,
    "layers": 2,
    "encoder_layers": 0,
    "convs": 2,
    "stem_channels": [16, 32],
    "epochs": 30,
    "batch_size": 32,
    "lr": 1e-4,
    "weight_decay": 1e-2,
    "beta1": 0.9,
    "beta2": 0.9999,
    "ema_decay": 0.9997,
    "warmup_frac": 0.05,
    "seed": 0,
    "gamma_pos": 0.0,
    "gamma_neg": 1.0,
    "clamp_eps": 1e-7,
    "threshold": 0.5,
    "augment": True,
}


def merge_run_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON file, then explicitly given flags."""
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"{args.config}: unknown config key(s): {', '.join(unknown)}")
        cfg.update(loaded)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["model"] not in ("q2l", "baseline"):
        raise UsageError(f"model must be 'q2l' or 'baseline', got {cfg['model']!r}")
    return cfg


def build_configs(cfg: dict, n_classes: int, image_size: int) -> tuple[ModelConfig, TrainConfig]:
    try:
        mcfg = ModelConfig(
            n_classes=n_classes, image_size=image_size, patch_size=cfg["patch_size"],
            d_backbone=cfg["d_backbone"], d_model=cfg["d_model"], n_heads=cfg["heads"], d_ff=cfg["d_ff"],
            n_layers=cfg["layers"], n_encoder_layers=cfg["encoder_layers"], n_convs=cfg["convs"],
            stem_channels=tuple(cfg["stem_channels"]),
        )
        tcfg = TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
            beta1=cfg["beta1"], beta2=cfg["beta2"], ema_decay=cfg["ema_decay"], warmup_frac=cfg["warmup_frac"],
            seed=cfg["seed"], gamma_pos=cfg["gamma_pos"], gamma_neg=cfg["gamma_neg"],
            prob_clamp_eps=cfg["clamp_eps"], threshold=cfg["threshold"],
            augment_flip=bool(cfg["augment"]), augment_shift=4 if cfg["augment"] else 0,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return mcfg, tcfg


def resolve_splits(path) -> tuple[Path, Path | None]:
    """A split directory, or a root holding ``train/`` (and optionally ``test/``)."""
    root = Path(path)
    if (root / "meta.json").exists():
        return root, None
    if (root / "train" / "meta.json").exists():
        test = root / "test"
        return root / "train", test if (test / "meta.json").exists() else None
    raise UsageError(f"{root}: not a dataset directory")


def _split_dir(path) -> Path:
    root = Path(path)
    if (root / "meta.json").exists():
        return root
    if (root / "test" / "meta.json").exists():
        return root / "test"
    raise UsageError(f"{root}: not a dataset directory")


# -- commands --------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    try:
        cfg = DataConfig(
            n_train=args.n_train, n_test=args.n_test, n_classes=args.classes, n_shapes=args.shapes,
            n_colors=args.colors, image_size=args.image_size, min_objects=args.min_objects,
            max_objects=args.max_objects, small_area=args.small_area, medium_area=args.medium_area,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        paths = generate_dataset(args.out, cfg, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for split, p in paths.items():
        print(f"{split}={p}")
    return 0


def cmd_train(args) -> int:
    cfg = merge_run_config(args)
    if args.dump_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    if not cfg["data"] or not cfg["out"]:
        raise UsageError("train needs --data and --out (flags or config file)")
    train_dir, default_eval = resolve_splits(cfg["data"])
    eval_dir = Path(cfg["eval_data"]) if cfg["eval_data"] else default_eval
    train_set = load_dataset(train_dir)
    eval_set = load_dataset(eval_dir) if eval_dir is not None else None
    if eval_set is not None and eval_set.n_classes != train_set.n_classes:
        raise UsageError("train and eval datasets disagree on the number of classes")
    mcfg, tcfg = build_configs(cfg, train_set.n_classes, int(train_set.meta["canvas"][0]))
    maker = init_model if cfg["model"] == "q2l" else init_baseline
    model = maker(mcfg, seed=tcfg.seed)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    result = train(model, train_set.images, train_set.targets, tcfg,
                   eval_set.images if eval_set else None, eval_set.targets if eval_set else None, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(f"epochs={len(result.history)}")
    print(f"final_train_loss={last.get('train_loss', float('nan')):.6g}")
    if eval_set is not None:
        print(f"best_val_mAP={result.best_map:.6g}")
        print(f"best_epoch={result.best_epoch}")
    print(f"checkpoint={out / 'best.ckpt'}")
    return 0


def read_predictions(path, n_classes: int) -> dict[int, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id"] + [f"p_{k}" for k in range(n_classes)]
        if header != expected:
            raise UsageError(f"{path}: header must be {','.join(expected)}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_classes + 1:
                raise UsageError(f"{path}:{lineno}: expected {n_classes + 1} fields")
            try:
                rows[int(row[0])] = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
    return rows


def _predict_dataset(model, dataset, batch_size: int = 128) -> np.ndarray:
    if model.config.n_classes != dataset.n_classes:
        raise UsageError(f"checkpoint has {model.config.n_classes} classes, dataset has {dataset.n_classes}")
    x = dataset.images.astype(np.float32) / 255.0
    return model.predict_proba(x, batch_size=batch_size)


def evaluation_report(probs, targets, threshold=0.5, top_k=None, buckets=None) -> dict:
    ap = per_category_ap(probs, targets)
    tm = threshold_metrics(probs, targets, threshold=None if top_k else threshold, top_k=top_k)
    rep = {"n_samples": len(probs), "n_classes": probs.shape[1]}
    if top_k:
        rep.update(mode="top_k", top_k=top_k)
    else:
        rep.update(mode="threshold", threshold=threshold)
    rep["mAP"] = mean_ap(ap)
    rep.update(tm.as_dict())
    rep["undefined_categories"] = ",".join(str(i) for i in np.flatnonzero(np.isnan(ap)))
    if buckets is not None:
        rep["positive_pairs"] = int(np.asarray(targets).sum())
        for name, view in buckets.items():
            bap = per_category_ap(probs, targets, mask=view.mask)
            rep[f"mAP_{name}"] = mean_ap(bap) if np.any(~np.isnan(bap)) else float("nan")
            rep[f"pairs_{name}"] = view.positive_pairs
    return rep, ap


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def cmd_eval(args) -> int:
    dataset = load_dataset(_split_dir(args.data))
    if args.checkpoint:
        probs = _predict_dataset(load_checkpoint(args.checkpoint), dataset)
    else:
        rows = read_predictions(args.predictions, dataset.n_classes)
        missing = [r.id for r in dataset.records if r.id not in rows]
        if missing:
            raise UsageError(f"{args.predictions}: no prediction for id(s) {missing[:5]}")
        probs = check_probabilities(np.stack([rows[r.id] for r in dataset.records]))
    if args.top_k is not None and not 1 <= args.top_k <= dataset.n_classes:
        raise UsageError(f"--top-k must lie in [1, {dataset.n_classes}]")
    buckets = size_bucket_eval_split(dataset) if args.by_size else None
    rep, ap = evaluation_report(probs, dataset.targets, args.threshold, args.top_k, buckets)
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in rep.items())
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        n_pos = dataset.targets.sum(axis=0)
        with open(out / "per_category_ap.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "ap", "n_positive"])
            for k, (a, n) in enumerate(zip(ap, n_pos)):
                w.writerow([k, "nan" if np.isnan(a) else f"{a:.6f}", int(n)])
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.data:
        dataset = load_dataset(_split_dir(args.data))
        ids = [str(r.id) for r in dataset.records]
        probs = _predict_dataset(model, dataset)
    else:
        images = [read_ppm(p) for p in args.images]
        ids = [Path(p).stem for p in args.images]
        size = model.config.image_size
        for p, img in zip(args.images, images):
            if img.shape != (size, size, 3):
                raise UsageError(f"{p}: expected {size}×{size} RGB, got {img.shape}")
        probs = model.predict_proba(np.stack(images).astype(np.float32) / 255.0)
    k = probs.shape[1]
    fh = open(args.out, "w", newline="") if args.out and args.out != "-" else nullcontext(sys.stdout)
    with fh as stream:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["id"] + [f"p_{i}" for i in range(k)])
        for i, row in zip(ids, probs):
            w.writerow([i] + [f"{float(v):.8g}" for v in row])
    return 0


def cmd_export_attn(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not hasattr(model, "decoder_layers"):
        raise UsageError(f"{args.checkpoint}: checkpoint has no attention layers")
    image = read_ppm(args.image)
    size = model.config.image_size
    if image.shape != (size, size, 3):
        raise UsageError(f"{args.image}: expected {size}×{size} RGB, got {image.shape}")
    k = model.config.n_classes
    if args.label == "all":
        labels = list(range(k))
    else:
        try:
            labels = [int(args.label)]
        except ValueError:
            raise UsageError(f"--label must be an integer or 'all', got {args.label!r}") from None
        if not 0 <= labels[0] < k:
            raise UsageError(f"label {labels[0]} outside [0, {k})")
    if args.attn_scale <= 0:
        raise UsageError("--attn-scale must be positive")
    for p in export_attention(model, image, labels, args.out, args.attn_scale, args.upsample):
        print(p)
    return 0


# -- parser ------------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()] if text.strip() else []
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="q2l", description="Label-query transformer multi-label classifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True, help="output directory (train/ and test/ are created)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=12)
    g.add_argument("--shapes", type=int, default=3)
    g.add_argument("--colors", type=int, default=4)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--image-size", type=int, default=48)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=5)
    g.add_argument("--small-area", type=int, default=64, help="largest area (px) counted as small")
    g.add_argument("--medium-area", type=int, default=400, help="largest area (px) counted as medium")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model; flags override --config")
    t.add_argument("--config", help="flat JSON file with any of the keys below")
    t.add_argument("--dump-config", action="store_true", help="print the merged config and exit")
    t.add_argument("--data", help="dataset root or train split directory")
    t.add_argument("--eval-data", help="evaluation split (default: <data>/test when present)")
    t.add_argument("--out", help="directory for checkpoints and train_log.csv")
    t.add_argument("--model", choices=("q2l", "baseline"))
    t.add_argument("--patch-size", type=int)
    t.add_argument("--d-backbone", type=int)
    t.add_argument("--d-model", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--d-ff", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--encoder-layers", type=int)
    t.add_argument("--convs", type=int)
    t.add_argument("--stem-channels", type=_int_list, help="comma-separated, e.g. 16,32; empty for none")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--ema-decay", type=float)
    t.add_argument("--warmup-frac", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--gamma-pos", type=float)
    t.add_argument("--gamma-neg", type=float)
    t.add_argument("--clamp-eps", type=float)
    t.add_argument("--threshold", type=float)
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or a predictions CSV")
    e.add_argument("--data", required=True, help="split directory (or root, meaning its test split)")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="CSV with header id,p_0,...,p_{K-1}")
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--threshold", type=float, default=0.5)
    mode.add_argument("--top-k", type=int)
    e.add_argument("--by-size", action="store_true", help="add small/medium/large bucket mAPs")
    e.add_argument("--out", help="directory for report.txt and per_category_ap.csv")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write per-class probabilities as CSV")
    i.add_argument("--checkpoint", required=True)
    srci = i.add_mutually_exclusive_group(required=True)
    srci.add_argument("--data", help="split directory")
    srci.add_argument("--images", nargs="+", help="PPM files")
    i.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("export-attn", help="write final-layer cross-attention maps as PGM")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True, help="PPM image")
    x.add_argument("--label", default="all", help="category id or 'all'")
    x.add_argument("--out", required=True)
    x.add_argument("--attn-scale", type=float, default=DEFAULT_SCALE, help="divisor applied before clipping")
    x.add_argument("--upsample", choices=("nearest", "bilinear"), default="nearest")
    x.set_defaults(func=cmd_export_attn)
    return p


def _thread_limit():
    raw = os.environ.get("Q2L_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"Q2L_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"q2l {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, FormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"q2l {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
