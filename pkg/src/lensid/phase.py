"""CNN-RNN classifier for the lens implantation phase.

Each frame of a clip is embedded by a shared backbone with global average
pooling, lifted by Dense/Dropout/ReLU, passed through a small recurrent layer
over the clip, and mapped to a per-frame implantation probability.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .adaptnet.encoder import IMAGENET_MEAN, IMAGENET_STD, Standardize
from .clips import CLIP_SECONDS, ClipSample

BACKBONES = ("VGG19", "ResNet50", "TinyDesk")
RNN_TYPES = ("GRU", "LSTM", "BiGRU", "BiLSTM")


class PhaseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseModelConfig:
    backbone: str = "VGG19"
    rnn_type: str = "BiLSTM"
    rnn_units: int = 5
    dense_dim: int = 64
    dropout_rate: float = 0.5
    sequence_length: int = 5
    pretrained: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise PhaseConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.rnn_type not in RNN_TYPES:
            raise PhaseConfigError(f"unknown rnn_type {self.rnn_type!r}; choose from {RNN_TYPES}")
        if self.rnn_units < 1:
            raise PhaseConfigError("rnn_units must be >= 1")
        if self.sequence_length < 2:
            raise PhaseConfigError("sequence_length must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise PhaseConfigError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TinyBackbone(nn.Module):
    """Four conv/pool stages (16-32-64-128 channels), ~100k parameters."""

    out_features = 128

    def __init__(self):
        super().__init__()
        layers = []
        c_in = 3
        for c in (16, 32, 64, 128):
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
            c_in = c
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


def _make_backbone(name: str, pretrained: bool) -> tuple[nn.Module, int, nn.Module]:
    if name == "TinyDesk":
        if pretrained:
            raise PhaseConfigError("TinyDesk has no pretrained weights")
        return TinyBackbone(), TinyBackbone.out_features, Standardize((0.5,) * 3, (0.5,) * 3)
    imagenet = Standardize(IMAGENET_MEAN, IMAGENET_STD)
    if name == "VGG19":
        weights = torchvision.models.VGG19_Weights.IMAGENET1K_V1 if pretrained else None
        return torchvision.models.vgg19(weights=weights).features, 512, imagenet
    weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
    resnet = torchvision.models.resnet50(weights=weights)
    trunk = nn.Sequential(*list(resnet.children())[:-2])
    return trunk, 2048, imagenet


class PhaseNet(nn.Module):
    """Maps ``B x N x H x W x 3`` clips in [0, 1] to ``B x N`` implantation probabilities."""

    def __init__(self, cfg: PhaseModelConfig = PhaseModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone, feat_dim, self.standardize = _make_backbone(cfg.backbone, cfg.pretrained)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.pre = nn.Sequential(
            nn.Linear(feat_dim, cfg.dense_dim), nn.Dropout(cfg.dropout_rate), nn.ReLU()
        )
        rnn_cls = nn.LSTM if cfg.rnn_type.endswith("LSTM") else nn.GRU
        bidirectional = cfg.rnn_type.startswith("Bi")
        self.rnn = rnn_cls(cfg.dense_dim, cfg.rnn_units, batch_first=True, bidirectional=bidirectional)
        rnn_out = cfg.rnn_units * (2 if bidirectional else 1)
        self.post = nn.Sequential(
            nn.Linear(rnn_out, cfg.dense_dim), nn.Dropout(cfg.dropout_rate), nn.ReLU()
        )
        self.classifier = nn.Linear(cfg.dense_dim, 1)

    def logits(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.dim() != 5 or clips.shape[-1] != 3:
            raise ValueError(f"expected B x N x H x W x 3 input, got {tuple(clips.shape)}")
        b, n = clips.shape[:2]
        frames = clips.reshape(b * n, *clips.shape[2:]).permute(0, 3, 1, 2)
        feats = self.pool(self.backbone(self.standardize(frames))).flatten(1)
        seq, _ = self.rnn(self.pre(feats).reshape(b, n, -1))
        return self.classifier(self.post(seq)).squeeze(-1)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(clips))


def build_phase_model(cfg: PhaseModelConfig | None = None) -> PhaseNet:
    return PhaseNet(cfg or PhaseModelConfig())


@dataclass(frozen=True)
class PhasePrediction:
    per_frame_probs: tuple[float, ...]
    clip_prob: float

    @property
    def is_implantation(self) -> bool:
        return self.clip_prob >= 0.5


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def predict_frames(model: PhaseNet, batch: np.ndarray) -> np.ndarray:
    """Per-frame probabilities for a ``B x N x H x W x 3`` array, in eval mode."""
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(batch), dtype=_param_dtype(model))
        return model(x).cpu().numpy()


def classify_clip(model: PhaseNet, clip: ClipSample | Sequence[np.ndarray]) -> PhasePrediction:
    frames = clip.frames if isinstance(clip, ClipSample) else list(clip)
    if len(frames) != model.cfg.sequence_length:
        raise ValueError(
            f"clip has {len(frames)} frames, model expects {model.cfg.sequence_length}"
        )
    probs = predict_frames(model, np.stack(frames)[None])[0]
    return PhasePrediction(tuple(float(p) for p in probs), float(np.mean(probs)))


def window_frame_indices(t0: float, fps: float, n: int, n_frames: int) -> list[int]:
    """Deterministic frame per sub-window: the one nearest each sub-window centre."""
    centres = t0 + CLIP_SECONDS * (np.arange(n) + 0.5) / n
    return [int(min(n_frames - 1, max(0, round(c * fps)))) for c in centres]


def localize_implantation(
    model: PhaseNet, video_frames, fps: float | None = None, stride_s: float = 0.5,
    batch_size: int = 16,
):
    """Slide a 3 s window over the video and return the implantation interval.

    Windows are classified by their mean frame probability.  The longest run of
    positive windows is reported as the span between the centres of its first
    and last windows, i.e. the times at which a window is mostly inside the
    phase.  Returns ``None`` when no window is positive.
    """
    fps = float(fps if fps is not None else video_frames.fps)
    n_frames = len(video_frames)
    duration = n_frames / fps
    if duration <= CLIP_SECONDS:
        raise ValueError(f"video of {duration:.2f}s is shorter than one {CLIP_SECONDS}s window")
    n = model.cfg.sequence_length
    starts = np.arange(0.0, duration - CLIP_SECONDS + 1e-9, stride_s)
    probs = []
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        batch = np.stack(
            [np.stack([video_frames[j] for j in window_frame_indices(s, fps, n, n_frames)])
             for s in chunk]
        )
        probs.extend(predict_frames(model, batch).mean(axis=1).tolist())
    run = longest_positive_run(np.asarray(probs) >= 0.5)
    if run is None:
        return None
    first, last = run
    half = CLIP_SECONDS / 2
    return float(starts[first] + half), float(starts[last] + half)


def longest_positive_run(flags: Sequence[bool]) -> tuple[int, int] | None:
    """``(first, last)`` indices of the longest run of True; earliest wins ties."""
    best = None
    start = None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            if best is None or (i - start) > (best[1] - best[0] + 1):
                best = (start, i - 1)
            start = None
    return best
