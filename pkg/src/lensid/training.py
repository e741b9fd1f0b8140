"""Training protocol for the phase classifier and the segmentation network."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from . import __version__
from .adaptnet import AdaptNet, AdaptNetConfig
from .augment import AugmentConfig, augment
from .clips import ClipSample, ClipSpec, derive_seed, sample_training_sequence
from .data import FrameSource, SegSample
from .losses import LossConfig, combined_loss_from_logits, seg_scores
from .phase import PhaseModelConfig, PhaseNet

logger = logging.getLogger(__name__)

TASKS = ("phase", "seg")


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "seg"
    epochs: int = 30
    lr0: float = 0.001
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    steps_per_epoch: int | None = None  # None: one pass over the data
    val_fraction: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise TrainConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.epochs <= 0:
            raise TrainConfigError("epochs must be positive")
        if self.lr0 <= 0:
            raise TrainConfigError("lr0 must be positive")
        if self.batch_size <= 0:
            raise TrainConfigError("batch_size must be positive")

    @classmethod
    def reference_defaults(cls, task: str, **overrides) -> "TrainConfig":
        if task == "phase":
            base = dict(task="phase", epochs=20, lr0=0.0002, batch_size=4)
        else:
            base = dict(task="seg", epochs=30, lr0=0.001, batch_size=8)
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise TrainConfigError(f"unknown training config key: {unknown[0]}")
        if "loss" in d and isinstance(d["loss"], Mapping):
            d["loss"] = LossConfig(**d["loss"])
        if "augment_config" in d and isinstance(d["augment_config"], Mapping):
            ac = {k: tuple(v) if isinstance(v, list) else v for k, v in d["augment_config"].items()}
            d["augment_config"] = AugmentConfig(**ac)
        return cls(**d)


def lr_schedule(task: str, lr0: float, epoch: int) -> float:
    """Learning rate for a 1-based epoch.

    phase: halved after ten epochs.  seg: multiplied by 0.8 every other epoch.
    """
    if epoch < 1:
        raise TrainConfigError("epochs are 1-based")
    if task == "phase":
        return lr0 if epoch <= 10 else lr0 / 2
    if task == "seg":
        return lr0 * 0.8 ** ((epoch - 1) // 2)
    raise TrainConfigError(f"unknown task {task!r}")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


class SegDataset(Dataset):
    def __init__(self, samples: Sequence[SegSample], augment_cfg: AugmentConfig | None = None,
                 seed: int = 0):
        self.samples = list(samples)
        self.augment_cfg = augment_cfg
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        s = self.samples[i]
        if self.augment_cfg is not None:
            rng = np.random.default_rng(np.random.SeedSequence(list(derive_seed(self.seed, self.epoch, i))))
            s = augment(s, rng, self.augment_cfg)
        image = torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1), dtype=np.float32))
        return image, torch.from_numpy(s.mask.astype(np.int64))


class ClipDataset(Dataset):
    """Draws a fresh stochastic sequence per (epoch, clip) from a fixed seed.

    Accepts either pre-built :class:`ClipSample` objects or clip specs plus the
    videos to sample them from.
    """

    def __init__(
        self,
        items: Sequence[ClipSpec | ClipSample],
        videos: Mapping[str, FrameSource] | None = None,
        n_frames: int = 5,
        augment_cfg: AugmentConfig | None = None,
        seed: int = 0,
    ):
        self.items = list(items)
        self.videos = videos
        self.n_frames = n_frames
        self.augment_cfg = augment_cfg
        self.seed = seed
        self.epoch = 0
        if any(isinstance(it, ClipSpec) for it in self.items) and videos is None:
            raise ValueError("clip specs need the videos to sample frames from")

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.items)

    def sample(self, i) -> ClipSample:
        item = self.items[i]
        if isinstance(item, ClipSample):
            return item
        key = derive_seed(self.seed, self.epoch, i)
        return sample_training_sequence(item, self.videos[item.video_id], self.n_frames, key)

    def __getitem__(self, i):
        s = self.sample(i)
        if self.augment_cfg is not None:
            rng = np.random.default_rng(
                np.random.SeedSequence(list(derive_seed(self.seed, self.epoch, i, 1)))
            )
            s = augment(s, rng, self.augment_cfg)
        frames = torch.from_numpy(np.stack(s.frames).astype(np.float32))
        return frames, torch.tensor(float(s.target))


def video_id_of(sample) -> str:
    if isinstance(sample, SegSample):
        return sample.source_video_id
    if isinstance(sample, ClipSample):
        return sample.spec.video_id
    return sample.video_id


def split_by_video(samples: Sequence, fraction: float, seed: int):
    """Hold out ``fraction`` of the videos (at least one) for model selection.

    With fewer than two videos nothing is held out.
    """
    videos = sorted({video_id_of(s) for s in samples})
    if len(videos) < 2 or fraction <= 0:
        return list(samples), []
    n_val = max(1, int(round(fraction * len(videos))))
    rng = np.random.default_rng(seed)
    held = set(rng.choice(videos, size=n_val, replace=False).tolist())
    train = [s for s in samples if video_id_of(s) not in held]
    val = [s for s in samples if video_id_of(s) in held]
    return train, val


def _task_loss(task, model_out, target, cfg: TrainConfig):
    if task == "phase":
        # model_out are per-frame logits; the clip label applies to every frame
        return F.binary_cross_entropy_with_logits(
            model_out, target.unsqueeze(1).expand_as(model_out)
        )
    return combined_loss_from_logits(model_out, target, cfg.loss)


def _forward(model, task, x):
    return model.logits(x) if task == "phase" else model(x)


def evaluate(model: nn.Module, task: str, loader: DataLoader) -> float:
    """Validation metric: clip accuracy (phase) or mean per-image Dice (seg)."""
    model.eval()
    scores = []
    with torch.no_grad():
        for x, y in loader:
            out = _forward(model, task, x.to(_dtype(model)))
            if task == "phase":
                pred = (torch.sigmoid(out).mean(dim=1) >= 0.5).long()
                scores.extend((pred == y.long()).double().tolist())
            else:
                pred = out.argmax(dim=1).numpy()
                scores.extend(seg_scores(p, t).dice for p, t in zip(pred, y.numpy()))
    return float(np.mean(scores)) if scores else math.nan


def _dtype(model):
    return next(model.parameters()).dtype


def _cycle(loader):
    while True:
        yield from loader


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float
    train_metric: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "val_metric", "train_metric"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_metric),
                            repr(r.train_metric)])


def make_dataset(task: str, samples, cfg: TrainConfig, train: bool, videos=None, n_frames=5):
    aug = cfg.augment_config if (train and cfg.augment) else None
    if task == "seg":
        return SegDataset(samples, aug, cfg.seed)
    return ClipDataset(samples, videos, n_frames, aug, cfg.seed)


def train(
    cfg: TrainConfig,
    dataset: Sequence,
    model: nn.Module,
    out_dir=None,
    val_dataset: Sequence | None = None,
    videos: Mapping[str, FrameSource] | None = None,
):
    """Run the training loop; returns ``(checkpoint path or None, TrainHistory)``.

    ``dataset`` holds :class:`SegSample` (seg) or :class:`ClipSpec` /
    :class:`ClipSample` (phase) items.  Without an explicit validation set,
    a fraction of the training videos is held out; if that is impossible the
    training set doubles as validation set.  ``best.pt`` (by validation
    metric) and ``last.pt`` are written to ``out_dir`` when given.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    seed_everything(cfg.seed)
    if val_dataset is None:
        dataset, val_dataset = split_by_video(dataset, cfg.val_fraction, cfg.seed)
    n_frames = getattr(getattr(model, "cfg", None), "sequence_length", 5)
    train_ds = make_dataset(cfg.task, dataset, cfg, True, videos, n_frames)
    select_ds = make_dataset(cfg.task, val_dataset or dataset, cfg, False, videos, n_frames)
    g = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(train_ds, batch_size=cfg.batch_size, shuffle=True, generator=g)
    eval_loader = DataLoader(select_ds, batch_size=cfg.batch_size)
    train_eval_loader = DataLoader(make_dataset(cfg.task, dataset, cfg, False, videos, n_frames),
                                   batch_size=cfg.batch_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    steps = cfg.steps_per_epoch or len(loader)
    history = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best = -math.inf
    dtype = _dtype(model)
    batches = None
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(cfg.task, cfg.lr0, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        train_ds.set_epoch(epoch)
        if batches is None or cfg.steps_per_epoch is None:
            batches = _cycle(loader)
        model.train()
        losses = []
        for step in range(steps):
            x, y = next(batches)
            out = _forward(model, cfg.task, x.to(dtype))
            loss = _task_loss(cfg.task, out, y.to(dtype) if cfg.task == "phase" else y, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step + 1} (lr={lr:g})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        val_metric = evaluate(model, cfg.task, eval_loader)
        train_metric = val_metric if not val_dataset else evaluate(model, cfg.task, train_eval_loader)
        history.records.append(EpochRecord(epoch, lr, float(np.mean(losses)), val_metric, train_metric))
        logger.info("epoch %d lr=%.3g loss=%.4f val=%.4f", epoch, lr, np.mean(losses), val_metric)
        if out_dir is not None:
            save_checkpoint(model, out_dir / "last.pt", train_config=cfg, history=history)
            if val_metric > best:
                best = val_metric
                save_checkpoint(model, out_dir / "best.pt", train_config=cfg, history=history)
    if out_dir is not None:
        history.to_csv(out_dir / "history.csv")
        return out_dir / "best.pt", history
    return None, history


def save_checkpoint(model: nn.Module, path, train_config: TrainConfig | None = None,
                    history: TrainHistory | None = None) -> Path:
    if isinstance(model, AdaptNet):
        kind = "adaptnet"
    elif isinstance(model, PhaseNet):
        kind = "phase"
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    payload = {
        "kind": kind,
        "config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "dtype": str(_dtype(model)).replace("torch.", ""),
        "seed": None if train_config is None else train_config.seed,
        "train_config": None if train_config is None else train_config.to_dict(),
        "history": None if history is None else [dataclasses.asdict(r) for r in history.records],
        "version": __version__,
    }
    path = Path(path)
    torch.save(payload, path)
    return path


def load_checkpoint(path, expect: str | None = None) -> nn.Module:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        kind = payload["kind"]
        if expect is not None and kind != expect:
            raise CheckpointError(f"{path} holds a {kind!r} model, expected {expect!r}")
        if kind == "adaptnet":
            model = AdaptNet(AdaptNetConfig(**payload["config"]))
        elif kind == "phase":
            model = PhaseNet(PhaseModelConfig(**payload["config"]))
        else:
            raise CheckpointError(f"unknown model kind {kind!r}")
        model.to(getattr(torch, payload.get("dtype", "float32")))
        model.load_state_dict(payload["state_dict"])
    except CheckpointError:
        raise
    except Exception as exc:  # corrupted payloads, config or shape mismatches
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    return model.eval()
