"""Weakly supervised training: image-level BCE plus the inter-patch consistency loss.

All randomness (init, shuffling, crops, dropout) is derived from
``(seed, epoch, index)`` so resuming from a checkpoint reproduces the exact
loss trajectory of an uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import yaml

from . import consistency as cons
from .maskops import mask_to_grid, random_crop_with_label_reset
from .model import Detector, ModelConfig, grid_shape, pad_mask_to_stride, to_tensor
from .preprocess import check_stats, norm_mode, normalize, resample
from .samples import ConfigError, DataError, ImageSample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    lambda_ipc: float = 1.0
    target_mode: str = "xor"
    crop_size: Optional[tuple[int, int]] = (256, 256)
    overlap_threshold: float = 0.0
    seed: int = 0
    grid_rule: str = "max"
    # per-image standardisation; needs no stats file and survives brightness shifts
    normalization: str = "per_image"
    stats: Optional[tuple[float, ...]] = None
    # square side to resample to; None keeps native resolution
    resize: Optional[int] = None
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.crop_size is not None:
            self.crop_size = tuple(int(v) for v in self.crop_size)
            if len(self.crop_size) != 2 or min(self.crop_size) < 1:
                raise ConfigError(f"crop_size must be (h, w), got {self.crop_size}")
        if self.stats is not None:
            self.stats = tuple(float(v) for v in check_stats(self.stats))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lambda_ipc < 0:
            raise ConfigError("lambda_ipc must be >= 0")
        if self.target_mode not in cons.TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {cons.TARGET_MODES}")
        if self.grid_rule not in ("mean", "max"):
            raise ConfigError("grid_rule must be 'mean' or 'max'")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ConfigError("overlap_threshold must be in [0, 1]")
        self.normalization = norm_mode(self.normalization)
        if self.normalization == "dataset_stats" and self.stats is None:
            raise ConfigError("normalization 'dataset_stats' needs stats")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.resize is not None and self.resize < self.model.stride:
            raise ConfigError("resize smaller than one stride")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["crop_size"] = list(self.crop_size) if self.crop_size else None
        d["stats"] = list(self.stats) if self.stats else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a key/value document")
        return cls.from_dict(d)

    def save(self, path: Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class TrainState:
    model: Detector
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    step_losses: list[dict] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, 0xC0FFEE))
        model = Detector(config.model).to(config.torch_dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return TrainState(model, opt, config)


def classifier_loss(pred, label):
    """Image-level BCE, prediction clamped away from 0 and 1."""
    return cons.bce(label, pred)


def prepare_input(image: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.resize is not None:
        image = resample(image, config.resize)
    return normalize(image, config.normalization, config.stats)


def prepare_sample(sample: ImageSample, config: TrainConfig) -> tuple[torch.Tensor, torch.Tensor, float]:
    """Normalised image tensor (3, H, W), grid mask (H', W') and label for one sample."""
    if sample.mask is None:
        raise DataError(f"sample {sample.image_id!r} has no pseudo-mask")
    image, mask = sample.image, sample.mask.values
    if config.resize is not None:
        mask = resample(mask, config.resize, nearest=True)
    x = to_tensor(prepare_input(image, config), config.torch_dtype)[0]
    stride = config.model.stride
    gh, gw = grid_shape(*mask.shape, stride)
    grid = mask_to_grid(pad_mask_to_stride(mask, stride), gh, gw, config.grid_rule)
    return x, torch.from_numpy(grid).to(config.torch_dtype), float(sample.label)


def batch_losses(model: Detector, items: Sequence[tuple], config: TrainConfig, train: bool = True,
                 generator: Optional[torch.Generator] = None) -> dict:
    """Per-image classifier and IPC losses for prepared ``items``; same-size images share a forward pass."""
    groups: dict[tuple, list[int]] = {}
    for i, (x, _, _) in enumerate(items):
        groups.setdefault(tuple(x.shape), []).append(i)
    cls = [None] * len(items)
    ipc = [None] * len(items)
    preds = [None] * len(items)
    for idx in groups.values():
        x = torch.stack([items[i][0] for i in idx])
        grid = torch.stack([items[i][1] for i in idx])
        y = torch.tensor([items[i][2] for i in idx], dtype=x.dtype)
        pred, _, feats = model(x, train=train, generator=generator)
        lc = classifier_loss(pred, y)
        if config.lambda_ipc > 0:
            v = cons.consistency_volume(feats, model.heads, model.cfg.scale)
            li = cons.ipc_loss(v, cons.target_volume(grid, config.target_mode), reduce_batch=False)
        else:
            li = torch.zeros_like(lc)
        for k, i in enumerate(idx):
            cls[i], ipc[i], preds[i] = lc[k], li[k], pred[k]
    loss_cls = torch.stack(cls).mean()
    loss_ipc = torch.stack(ipc).mean()
    return {"cls": loss_cls, "ipc": loss_ipc, "total": loss_cls + config.lambda_ipc * loss_ipc,
            "pred": torch.stack(preds)}


def train_step(batch: Sequence[ImageSample], state: TrainState, config: Optional[TrainConfig] = None) -> TrainState:
    """One optimizer update on ``batch``; losses go to ``state.step_losses``."""
    config = config or state.config
    items = [prepare_sample(s, config) for s in batch]
    gen = torch.Generator().manual_seed(derive_seed(config.seed, state.epoch, state.step, 0xD0))
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    out = batch_losses(state.model, items, config, train=True, generator=gen)
    out["total"].backward()
    state.optimizer.step()
    state.step += 1
    state.step_losses.append({k: float(out[k].detach()) for k in ("cls", "ipc", "total")})
    return state


def epoch_batches(dataset: Sequence[ImageSample], config: TrainConfig, epoch: int) -> list[list[ImageSample]]:
    """Seeded shuffle, optional crop-relabel, split into batches (last one may be short)."""
    order = np.random.default_rng(derive_seed(config.seed, epoch, 0x5A)).permutation(len(dataset))
    samples = []
    for pos, i in enumerate(order):
        s = dataset[i]
        if config.crop_size is not None:
            if s.mask is None:
                raise DataError(f"sample {s.image_id!r} has no pseudo-mask")
            s = random_crop_with_label_reset(s, config.crop_size, config.overlap_threshold,
                                             derive_seed(config.seed, epoch, int(i), 0xC7))
        samples.append(s)
    bs = config.batch_size
    return [samples[k:k + bs] for k in range(0, len(samples), bs)]


def fit(dataset: Sequence[ImageSample], config: TrainConfig, out_dir: Optional[Path] = None,
        state: Optional[TrainState] = None, on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Train to ``config.epochs`` total epochs, resuming from ``state`` when given.

    With ``out_dir`` a checkpoint (``last.pt``) and ``train_log.csv`` are written every epoch.
    """
    if not dataset:
        raise ValueError("cannot fit on an empty dataset")
    for s in dataset:
        if s.mask is None:
            raise DataError(f"sample {s.image_id!r} has no pseudo-mask")
    state = state or init_state(config)
    state.config = config
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    while state.epoch < config.epochs:
        t0 = time.perf_counter()
        state.step_losses = []
        state.step = 0
        for batch in epoch_batches(dataset, config, state.epoch):
            train_step(batch, state, config)
        row = {
            "epoch": state.epoch + 1,
            "loss_cls": float(np.mean([r["cls"] for r in state.step_losses])),
            "loss_ipc": float(np.mean([r["ipc"] for r in state.step_losses])),
            "loss_total": float(np.mean([r["total"] for r in state.step_losses])),
            "seconds": time.perf_counter() - t0,
        }
        state.history.append(row)
        state.epoch += 1
        log.info("epoch %d cls=%.4f ipc=%.4f total=%.4f (%.1fs)", row["epoch"], row["loss_cls"],
                 row["loss_ipc"], row["loss_total"], row["seconds"])
        if out_dir is not None:
            save_checkpoint(state, out_dir / "last.pt")
            write_train_log(state.history, out_dir / "train_log.csv")
        if on_epoch is not None:
            on_epoch(state)
    return state


def write_train_log(history: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["epoch", "loss_cls", "loss_ipc", "loss_total", "seconds"])
        w.writeheader()
        w.writerows(history)


def save_checkpoint(state: TrainState, path: Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "params": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "history": state.history,
        "rng": {"seed": state.config.seed, "torch": torch.get_rng_state()},
    }, tmp)
    tmp.replace(path)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path: Path) -> TrainState:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # noqa: BLE001 - any decode failure means a corrupt file
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    try:
        config = TrainConfig.from_dict(blob["config"])
        state = init_state(config)
        state.model.load_state_dict(blob["params"])
        state.optimizer.load_state_dict(blob["optimizer"])
    except (KeyError, RuntimeError, ConfigError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    state.epoch = blob["epoch"]
    state.history = list(blob["history"])
    if state.epoch < 1:
        raise CheckpointError(f"{path}: checkpoint holds an untrained model")
    return state


def params_fingerprint(model: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]
