"""Run orchestration: data -> pseudo-masks -> fit -> predict -> metrics, plus the ablation ladder.

A run directory is laid out as::

    run/config.snapshot   resolved RunConfig (YAML)
    run/data/{train,test}/ generated or copied dataset splits
    run/masks/            pseudo-masks actually used for training (+ boxes.csv)
    run/ckpt/             checkpoints and train_log.csv
    run/predictions.csv
    run/report.json       deterministic metric fields
    run/timing.json       latency (varies run to run)
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import datagen, maskops
from .inference import InferenceConfig, Prediction, predict
from .metrics import MetricReport, config_fingerprint, evaluate
from .model import ModelConfig
from .preprocess import compute_stats
from .samples import ConfigError, DataError, ImageSample, PseudoMask
from .training import TrainConfig, TrainState, derive_seed, fit, load_checkpoint, params_fingerprint

log = logging.getLogger(__name__)

MASK_SOURCES = ("gt", "simulated", "dir")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _default_generate() -> dict:
    return {
        "train": {"n_real": 100, "n_fake": 200, "size_range": [256, 256]},
        "test": {"n_real": 75, "n_fake": 75, "size_range": [256, 256]},
    }


@dataclass
class MaskNoise:
    """How simulated auto-masks degrade ground truth, per target size class."""

    small_max_side: int = 12
    large_dilation: int = 2
    large_blobs: int = 0
    small_dilation: int = 6
    small_blobs: int = 3
    blob_radius: tuple[int, int] = (8, 24)
    # pad applied to simulated manual boxes
    box_pad: int = 1


@dataclass
class RunConfig:
    run_dir: str = "run"
    seed: int = 0
    # existing dataset root with train/ and test/ splits; None generates one
    data_dir: Optional[str] = None
    generate: Optional[dict] = field(default_factory=_default_generate)
    # gt: dataset masks as pseudo-masks; simulated: degraded auto-masks; dir: masks from mask_dir
    masks: str = "gt"
    mask_dir: Optional[str] = None
    # box annotation CSV, or "simulated" to box every small target from GT
    boxes: Optional[str] = None
    mask_noise: MaskNoise = field(default_factory=MaskNoise)
    # derive dataset_stats normalization stats from the training images
    auto_stats: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.infer, dict):
            self.infer = InferenceConfig(**self.infer)
        if isinstance(self.mask_noise, dict):
            self.mask_noise = MaskNoise(**self.mask_noise)
        if self.masks not in MASK_SOURCES:
            raise ConfigError(f"masks must be one of {MASK_SOURCES}")
        if self.masks == "dir" and not self.mask_dir:
            raise ConfigError("masks: dir requires mask_dir")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["infer"] = {**asdict(self.infer), "tta_ops": list(self.infer.tta_ops),
                      "stats": list(self.infer.stats) if self.infer.stats else None}
        d["mask_noise"] = {**asdict(self.mask_noise), "blob_radius": list(self.mask_noise.blob_radius)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def save(self, path: Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# pseudo-mask preparation


def _is_small(gt: np.ndarray, small_max_side: int) -> bool:
    ann = maskops.boxes_from_mask(gt, "")
    return bool(ann.boxes) and max(max(b.width, b.height) for b in ann.boxes) <= small_max_side


def simulate_auto_masks(samples: Sequence[ImageSample], noise: MaskNoise, seed: int) -> dict[str, PseudoMask]:
    """Degrade GT masks the way an off-the-shelf localizer would: fine on large targets, poor on small ones."""
    out = {}
    for k, s in enumerate(samples):
        if s.mask is None:
            raise DataError(f"{s.image_id}: simulated auto-masks need GT")
        gt = s.mask.values
        if not gt.any():
            out[s.image_id] = replace(s.mask, provenance="auto")
            continue
        rng = np.random.default_rng(derive_seed(seed, k, 0xA0))
        if _is_small(gt, noise.small_max_side):
            v = maskops.simulate_auto_mask(gt, rng, noise.small_dilation, noise.small_blobs, noise.blob_radius)
        else:
            v = maskops.simulate_auto_mask(gt, rng, noise.large_dilation, noise.large_blobs, noise.blob_radius)
        out[s.image_id] = PseudoMask(v, "auto", s.image_id)
    return out


def simulated_boxes(samples: Sequence[ImageSample], noise: MaskNoise) -> list[maskops.BoxAnnotation]:
    """Stand-in for manual annotation: one box per GT component, only for small-target images."""
    anns = []
    for s in samples:
        gt = s.mask.values
        if gt.any() and _is_small(gt, noise.small_max_side):
            anns.append(maskops.boxes_from_mask(gt, s.image_id, pad=noise.box_pad))
    return anns


def apply_boxes(masks: dict[str, PseudoMask], anns: Sequence[maskops.BoxAnnotation]) -> dict[str, PseudoMask]:
    out = dict(masks)
    for ann in anns:
        if ann.image_id not in out:
            raise DataError(f"box annotation for unknown image {ann.image_id!r}")
        out[ann.image_id] = maskops.calibrate_with_boxes(out[ann.image_id], ann)
    return out


def prepare_masks(train: Sequence[ImageSample], cfg: RunConfig, gt_dir: Optional[Path]) -> dict[str, PseudoMask]:
    if cfg.masks == "dir":
        masks = maskops.ingest_masks(Path(cfg.mask_dir), train)
    else:
        if gt_dir is None:
            raise DataError("ground-truth masks unavailable")
        gt = maskops.ingest_masks(gt_dir, train)
        gt = {k: replace(v, provenance="synthetic_gt") for k, v in gt.items()}
        if cfg.masks == "gt":
            masks = gt
        else:
            masks = simulate_auto_masks(maskops.attach_masks(train, gt), cfg.mask_noise, cfg.seed)
    if cfg.boxes == "simulated":
        if gt_dir is None:
            raise DataError("simulated boxes need ground-truth masks")
        gt = maskops.ingest_masks(gt_dir, train)
        masks = apply_boxes(masks, simulated_boxes(maskops.attach_masks(train, gt), cfg.mask_noise))
    elif cfg.boxes:
        anns = maskops.read_boxes(Path(cfg.boxes))
        masks = apply_boxes(masks, list(anns.values()))
    return masks


# ---------------------------------------------------------------------------
# stages


def _stage(name: str):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as e:  # noqa: BLE001 - re-raised with the stage name attached
                raise StageError(name, e) from e
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("gen-data")
def stage_data(cfg: RunConfig, run: Path) -> Path:
    data = run / "data"
    if cfg.data_dir is not None:
        src = Path(cfg.data_dir)
        for split in ("train", "test"):
            if not (src / split / "labels.csv").exists():
                raise DataError(f"{src / split} is not a dataset split (labels.csv missing)")
        return src
    if not cfg.generate:
        raise DataError("no data_dir given and data generation disabled")
    for i, split in enumerate(("train", "test")):
        dc = datagen.DatagenConfig.from_dict(cfg.generate[split])
        recs = datagen.generate_dataset(dc, derive_seed(cfg.seed, i, 0xDA7A))
        datagen.save_dataset(recs, data / split)
    return data


@_stage("masks")
def stage_masks(cfg: RunConfig, data: Path, run: Path) -> list[ImageSample]:
    train = datagen.load_dataset(data / "train")
    gt_dir = data / "train" / "masks"
    masks = prepare_masks(train, cfg, gt_dir if gt_dir.is_dir() else None)
    out = run / "masks"
    for rid, m in masks.items():
        maskops.write_mask(out / f"{rid}.png", m)
    if cfg.boxes == "simulated":
        maskops.write_boxes(out / "boxes.csv", simulated_boxes(maskops.attach_masks(
            train, maskops.ingest_masks(gt_dir, train)), cfg.mask_noise))
    return maskops.attach_masks(train, masks)


def resolve_train_config(cfg: RunConfig, train: Sequence[ImageSample]) -> TrainConfig:
    tc = cfg.train
    if tc.normalization == "dataset_stats" and tc.stats is None:
        if not cfg.auto_stats:
            raise ConfigError("dataset_stats normalization without stats")
        tc = replace(tc, stats=tuple(float(v) for v in compute_stats(s.image for s in train)))
    return tc


@_stage("train")
def stage_train(cfg: RunConfig, train: Sequence[ImageSample], ckpt: Path) -> TrainState:
    return fit(train, resolve_train_config(cfg, train), out_dir=ckpt)


@_stage("predict")
def stage_predict(cfg: RunConfig, state: TrainState, test: Sequence[ImageSample]) -> list[Prediction]:
    return [predict(s.image, state, cfg.infer, image_id=s.image_id) for s in test]


def run_fingerprint(cfg: RunConfig) -> str:
    """Fingerprint of everything that shapes results; the output location is left out."""
    d = cfg.to_dict()
    d.pop("run_dir")
    return config_fingerprint(d)


def _write_json(path: Path, obj: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_report(report: MetricReport, run: Path) -> None:
    d = report.to_dict()
    latency = d.pop("mean_latency_ms")
    _write_json(run / "report.json", d)
    _write_json(run / "timing.json", {"mean_latency_ms": latency, "n": report.n})


def pipeline(cfg: RunConfig) -> MetricReport:
    """Run every stage into ``cfg.run_dir`` and return the test-set report."""
    from .inference import write_predictions

    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.snapshot")
    data = stage_data(cfg, run)
    train = stage_masks(cfg, data, run)
    state = stage_train(cfg, train, run / "ckpt")
    try:
        test = datagen.load_dataset(data / "test")
    except DataError as e:
        raise StageError("predict", e) from e
    preds = stage_predict(cfg, state, test)
    write_predictions(preds, run / "predictions.csv")
    report = evaluate(preds, {s.image_id: s.label for s in test}, run_fingerprint(cfg))
    write_report(report, run)
    return report


# ---------------------------------------------------------------------------
# desk-scale preset

# small encoder for CPU runs; everything else in training keeps its defaults
DESK_MODEL = {"channels": 32, "stem_channels": 16, "stem_norm": False}
DESK_EPOCHS = 20


def desk_config(seed: int, run_dir, lambda_ipc: float = 1.0, generate: Optional[dict] = None, **kw) -> RunConfig:
    """300 train / 150 test synthetic images at 256 px, tiny encoder, 20 epochs of default training.

    ``generate`` entries are merged into the default per-split generator settings.
    """
    gen = _default_generate()
    for split, extra in (generate or {}).items():
        gen[split] = {**gen[split], **extra}
    train = TrainConfig(epochs=DESK_EPOCHS, seed=seed, lambda_ipc=lambda_ipc, model=ModelConfig(**DESK_MODEL))
    return RunConfig(run_dir=str(run_dir), seed=seed, generate=gen, train=train, **kw)


# ---------------------------------------------------------------------------
# ablation ladder

TRAIN_TOGGLES = {"resize", "normalization", "target_mode", "masks", "boxes", "lambda_ipc"}
INFER_TOGGLES = {"tta", "decision_threshold"}

DEFAULT_LADDER = [
    {"name": "detection, resized input", "toggles": {"resize": 224, "normalization": "unit", "tta": False}},
    {"name": "detection, native size", "toggles": {"resize": None, "normalization": "unit", "tta": False}},
    {"name": "+ dataset normalization", "toggles": {"resize": None, "normalization": "dataset_stats", "tta": False}},
    {"name": "+ TTA", "toggles": {"resize": None, "normalization": "dataset_stats", "tta": True}},
]


@dataclass
class AblationRow:
    name: str
    toggles: dict
    report: MetricReport
    checkpoint: str = ""


def row_config(base: RunConfig, toggles: dict) -> RunConfig:
    unknown = set(toggles) - TRAIN_TOGGLES - INFER_TOGGLES
    if unknown:
        raise ConfigError(f"unknown ablation toggles {sorted(unknown)}")
    tkw = {k: toggles[k] for k in ("resize", "normalization", "target_mode", "lambda_ipc") if k in toggles}
    train = replace(base.train, **tkw)
    if "normalization" in toggles and train.normalization != "dataset_stats":
        train = replace(train, stats=None)
    ikw = {k: toggles[k] for k in INFER_TOGGLES if k in toggles}
    ikw["no_resize"] = train.resize is None
    if train.resize is not None:
        ikw["resize_to"] = train.resize
    infer = replace(base.infer, **ikw)
    rkw = {k: toggles[k] for k in ("masks", "boxes") if k in toggles}
    try:
        return replace(base, train=train, infer=infer, **rkw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid toggle combination {toggles}: {e}") from e


def training_fingerprint(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("seed", "data_dir", "generate", "masks", "mask_dir", "boxes", "mask_noise", "train")}
    return config_fingerprint(keep)


def format_table(rows: Sequence[AblationRow]) -> str:
    lines = ["| # | Method | Accuracy | AUC | ms/img |", "|---|---|---|---|---|"]
    for i, r in enumerate(rows, 1):
        lines.append(f"| {i} | {r.name} | {r.report.accuracy:.4f} | {r.report.auc:.4f} | "
                     f"{r.report.mean_latency_ms:.1f} |")
    return "\n".join(lines) + "\n"


def run_ablation(base: RunConfig, ladder: Sequence[dict] = DEFAULT_LADDER,
                 out_dir: Optional[Path] = None) -> list[AblationRow]:
    """Evaluate each ladder row; rows whose training-side settings coincide reuse one checkpoint."""
    out = Path(out_dir or base.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgs = [(row["name"], dict(row.get("toggles", {})), row_config(base, row.get("toggles", {})))
            for row in ladder]
    data = stage_data(replace(base, run_dir=str(out)), out)
    test = datagen.load_dataset(data / "test")
    truth = {s.image_id: s.label for s in test}
    trained: dict[str, TrainState] = {}
    rows = []
    for name, toggles, cfg in cfgs:
        fp = training_fingerprint(cfg)
        if fp not in trained:
            ckdir = out / "ckpt" / fp
            if (ckdir / "last.pt").exists():
                state = load_checkpoint(ckdir / "last.pt")
                if state.epoch < cfg.train.epochs:
                    state = None
            else:
                state = None
            if state is None:
                train = stage_masks(cfg, data, out / "rows" / fp)
                state = stage_train(cfg, train, ckdir)
            trained[fp] = state
        state = trained[fp]
        preds = stage_predict(cfg, state, test)
        report = evaluate(preds, truth, run_fingerprint(cfg))
        rows.append(AblationRow(name, toggles, report, fp))
        log.info("%s: acc=%.4f auc=%.4f", name, report.accuracy, report.auc)
    (out / "ablation.md").write_text(format_table(rows))
    _write_json(out / "ablation.json", {"rows": [
        {"name": r.name, "toggles": r.toggles, "checkpoint": r.checkpoint, **r.report.to_dict()} for r in rows]})
    return rows


def checkpoint_fingerprint(state: TrainState) -> str:
    return params_fingerprint(state.model)
