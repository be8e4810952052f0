"""Command line entry point: ``patchforensics <verb> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from . import datagen, maskops
from .experiment import (DEFAULT_LADDER, RunConfig, StageError, desk_config, format_table, pipeline, run_ablation,
                         write_report)
from .inference import InferenceConfig, predict_batch, write_predictions
from .metrics import MetricReport, compute_accuracy, compute_auc, config_fingerprint
from .preprocess import compute_stats, read_stats, write_stats
from .samples import ConfigError, DataError
from .training import TrainConfig, fit, load_checkpoint

log = logging.getLogger("patchforensics")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--out", type=Path, required=True, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def cmd_gen_data(args) -> int:
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = yaml.safe_load(fh) or {}
    flags = {"n_real": args.n_real, "n_fake": args.n_fake, "small_fraction": args.small_fraction}
    if args.types is not None:
        flags["types"] = [t for t in args.types.split(",") if t]
    if args.min_size is not None or args.max_size is not None:
        lo, hi = d.get("size_range", datagen.DatagenConfig().size_range)
        flags["size_range"] = [args.min_size or lo, args.max_size or hi]
    d.update({k: v for k, v in flags.items() if v is not None})
    cfg = datagen.DatagenConfig.from_dict(d)
    recs = datagen.generate_dataset(cfg, args.seed or 0)
    datagen.save_dataset(recs, args.out)
    print(f"wrote {len(recs)} records to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    done = maskops.calibrate_dir(args.masks, args.boxes, args.out)
    print(f"calibrated {len(done)} masks into {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    samples = datagen.load_dataset(args.data)
    mask_dir = args.masks or Path(args.data) / "masks"
    samples = maskops.attach_masks(samples, maskops.ingest_masks(mask_dir, samples))
    if cfg.normalization == "dataset_stats" and cfg.stats is None:
        cfg.stats = tuple(float(v) for v in compute_stats(s.image for s in samples))
    state = fit(samples, cfg, out_dir=args.out)
    print(f"trained {state.epoch} epochs; checkpoint at {Path(args.out) / 'last.pt'}")
    return 0


def cmd_predict(args) -> int:
    state = load_checkpoint(args.ckpt)
    kw = {"tta": not args.no_tta, "decision_threshold": args.threshold}
    if args.norm:
        kw["normalization"] = args.norm
    if args.stats:
        kw["stats"] = read_stats(args.stats)
    preds, summary = predict_batch(args.images, state, InferenceConfig(**kw))
    write_predictions(preds, args.out)
    print(json.dumps({"count": summary["count"], "mean_latency_ms": round(summary["mean_latency_ms"], 3),
                      "errors": len(summary["errors"])}))
    return 0


def cmd_eval(args) -> int:
    with open(args.predictions, newline="") as fh:
        preds = list(csv.DictReader(fh))
    truth = {rid: label for rid, label, _ in datagen.read_labels(args.data)}
    missing = [p["image_id"] for p in preds if p["image_id"] not in truth]
    if missing:
        raise DataError(f"predictions without labels: {missing[:5]}")
    acc = compute_accuracy((int(p["label"]), truth[p["image_id"]]) for p in preds)
    auc = compute_auc((float(p["score"]), truth[p["image_id"]]) for p in preds)
    lat = [float(p["elapsed_ms"]) for p in preds if p.get("elapsed_ms")]
    report = MetricReport(acc, auc, len(preds), sum(lat) / len(lat) if lat else 0.0,
                          config_fingerprint({"predictions": str(args.predictions)}))
    args.out.mkdir(parents=True, exist_ok=True)
    write_report(report, args.out)
    print(json.dumps(report.to_dict()))
    return 0


def _run_config(args) -> RunConfig:
    if getattr(args, "desk", False):
        if args.config:
            raise ConfigError("--desk and --config are mutually exclusive")
        return desk_config(args.seed or 0, args.out)
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.run_dir = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def cmd_pipeline(args) -> int:
    report = pipeline(_run_config(args))
    print(json.dumps(report.to_dict()))
    return 0


def cmd_ablate(args) -> int:
    ladder = DEFAULT_LADDER
    if args.ladder:
        with open(args.ladder) as fh:
            ladder = yaml.safe_load(fh)
    rows = run_ablation(_run_config(args), ladder, args.out)
    print(format_table(rows))
    return 0


def cmd_stats(args) -> int:
    stats = compute_stats(s.image for s in datagen.load_dataset(args.data))
    write_stats(args.out, stats)
    print(", ".join(f"{v:.5f}" for v in stats))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchforensics", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    common = _common()

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic tamper dataset")
    p.add_argument("--config", type=Path, default=None, help="YAML of generator settings; flags override it")
    p.add_argument("--n-real", type=int, default=None)
    p.add_argument("--n-fake", type=int, default=None)
    p.add_argument("--types", default=None, help="comma list of splice,copy_move,removal")
    p.add_argument("--min-size", type=int, default=None)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--small-fraction", type=float, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("calibrate", parents=[common], help="replace masks by annotated boxes")
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--boxes", type=Path, required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("train", parents=[common], help="fit a detector; --out is the checkpoint dir")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--masks", type=Path, default=None, help="pseudo-mask dir (default: DATA/masks)")
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="score a directory of images; --out is a CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--norm", choices=["unit", "stats", "per-image"], default=None)
    p.add_argument("--stats", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="metrics for a predictions CSV; --out is a dir")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset dir holding labels.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation ladder")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--desk", action="store_true", help="use the 300/150-image, 20-epoch CPU preset")
    p.add_argument("--ladder", type=Path, default=None, help="YAML list of {name, toggles}")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("pipeline", parents=[common], help="data -> masks -> train -> predict -> metrics")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--desk", action="store_true", help="use the 300/150-image, 20-epoch CPU preset")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("stats", parents=[common], help="per-channel mean/std of a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(fn=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
