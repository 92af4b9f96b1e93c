"""Training loop: RMSprop with a triangular cyclic learning rate, or Adam."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Batch, batch_generator, make_batch
from .errors import ConfigError, DivergenceDetected, ShapeMismatch, TooFewSamples
from .losses import combined_loss, dice_score
from .model import UNet, save_checkpoint
from .sample import Sample

HISTORY_COLUMNS = ("epoch", "train_total", "train_dice", "train_l1", "val_dsc", "val_l1", "lr", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 100
    optimizer: str = "rmsprop"
    lr: float = 1e-4
    weight_decay: float = 1e-8
    momentum: float = 0.9
    betas: tuple = (0.9, 0.99)
    cyclic_lr: bool = True
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    steps_per_cycle: int | None = None  # None: two epochs of batches
    batch_size: int = 64
    l1_weight: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic snapshots

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be finite and non-negative")
        if self.cyclic_lr and not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"cyclic bounds must satisfy 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.steps_per_cycle is not None and self.steps_per_cycle < 2:
            raise ConfigError("steps_per_cycle must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def cyclic_lr(step: int, steps_per_cycle: int, lr_min: float, lr_max: float) -> float:
    """Triangular wave: lr_min at the cycle start, lr_max at the half-cycle."""
    if steps_per_cycle < 2:
        raise ConfigError("steps_per_cycle must be >= 2")
    if not 0 <= lr_min <= lr_max:
        raise ConfigError(f"cyclic bounds must satisfy 0 <= lr_min <= lr_max, got {lr_min}, {lr_max}")
    half = steps_per_cycle / 2
    pos = step % steps_per_cycle
    frac = pos / half if pos <= half else (steps_per_cycle - pos) / half
    return lr_min + (lr_max - lr_min) * frac


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_dice: float
    train_l1: float
    val_dsc: float | None
    val_l1: float | None
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    step_lr: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                row = asdict(r)
                writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                                 for c in HISTORY_COLUMNS])


def make_optimizer(model: UNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    return torch.optim.RMSprop(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)


def _batch_tensors(batch: Batch, model: UNet):
    size = model.cfg.input_size
    if batch.images.shape[1:3] != (size, size):
        raise ShapeMismatch(f"model expects {size}x{size} images, got {batch.images.shape[1:3]}")
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(batch.images).permute(0, 3, 1, 2).to(dtype)
    y = torch.from_numpy(batch.masks).permute(0, 3, 1, 2).to(dtype)
    t = torch.from_numpy(batch.targets).to(dtype)
    return x, y, t


@torch.no_grad()
def validate(model: UNet, samples: list[Sample], batch_size: int = 64) -> tuple[float, float | None]:
    """Mean DSC of binarized masks and mean parameter L1; runs in eval mode without touching RNG."""
    was_training = model.training
    model.eval()
    dsc, l1 = [], []
    try:
        for start in range(0, len(samples), batch_size):
            x, y, t = _batch_tensors(make_batch(samples[start:start + batch_size]), model)
            mask, params = model(x)
            binary = (mask >= 0.5).to(y.dtype)
            dsc += [dice_score(binary[i], y[i]).item() for i in range(len(x))]
            if params is not None:
                l1 += (params - t).abs().sum(dim=1).tolist()
    finally:
        model.train(was_training)
    return float(np.mean(dsc)), (float(np.mean(l1)) if l1 else None)


def train(model: UNet, train_set: list[Sample], val_set: list[Sample] | None, cfg: TrainConfig,
          out_dir: str | Path | None = None, log=None) -> tuple[UNet, TrainHistory]:
    """Train in place; with ``out_dir`` write best.pt, last.pt and history.csv there."""
    if not train_set:
        raise TooFewSamples("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    spc = cfg.steps_per_cycle or max(2, 2 * steps_per_epoch)
    history = TrainHistory()
    best = -math.inf
    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        sums = np.zeros(3)
        seen = 0
        epoch_lr = None
        for batch in batch_generator(train_set, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            lr = cyclic_lr(step, spc, cfg.lr_min, cfg.lr_max) if cfg.cyclic_lr else cfg.lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_lr = lr if epoch_lr is None else epoch_lr
            x, y, t = _batch_tensors(batch, model)
            mask, params = model(x)
            loss = combined_loss(mask, y, params, t if params is not None else None, cfg.l1_weight)
            value = loss.total.item()
            if not math.isfinite(value):
                raise DivergenceDetected(epoch, value)
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            history.step_lr.append(lr)
            step += 1
            n = len(batch)
            sums += n * np.array([value, loss.dice_component.item(), loss.l1_component.item()])
            seen += n
        val_dsc, val_l1 = validate(model, val_set, cfg.batch_size) if val_set else (None, None)
        rec = EpochRecord(epoch, *(sums / seen).tolist(), val_dsc, val_l1, epoch_lr,
                          time.perf_counter() - start)
        history.records.append(rec)
        if log is not None:
            log(rec)
        if val_dsc is not None and val_dsc > best:
            best = val_dsc
            history.best_epoch = epoch
            if out is not None:
                save_checkpoint(out / "best.pt", model, {"epoch": epoch, "val_dsc": val_dsc, "train": cfg.to_dict()})
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{epoch:03d}.pt", model, {"epoch": epoch, "train": cfg.to_dict()})
    if out is not None:
        save_checkpoint(out / "last.pt", model, {"epoch": cfg.epochs, "train": cfg.to_dict()})
        history.write_csv(out / "history.csv")
    return model, history
