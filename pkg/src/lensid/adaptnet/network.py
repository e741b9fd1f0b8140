from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn

from .blocks import CascadePoolingFusion, SSFModule
from .encoder import ENCODERS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptNetConfig:
    encoder: str = "VGG16"
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32)
    enable_ssf: bool = True
    enable_sha: bool = True
    enable_cpf: bool = True
    cascade_depth: int = 3
    offset_bound: float = 3.0
    num_classes: int = 2
    pretrained: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; choose from {sorted(ENCODERS)}")
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder_channels must list one width per SSF stage (4)")
        if self.enable_sha and not self.enable_ssf:
            raise ConfigError("enable_sha requires enable_ssf (SHA lives inside SSF)")
        if self.cascade_depth < 2:
            raise ConfigError("cascade_depth must be >= 2")

    @classmethod
    def tiny(cls, **overrides) -> "AdaptNetConfig":
        return cls(**{"encoder": "TinyDesk", "decoder_channels": (32, 16, 8, 8), **overrides})

    def ablation(self, stage: str) -> "AdaptNetConfig":
        """The cumulative ablation ladder: baseline, +ssf, +sha, full (+cpf)."""
        flags = {
            "baseline": (False, False, False),
            "ssf": (True, False, False),
            "sha": (True, True, False),
            "full": (True, True, True),
        }
        if stage not in flags:
            raise ConfigError(f"unknown ablation stage {stage!r}")
        ssf, sha, cpf = flags[stage]
        return replace(self, enable_ssf=ssf, enable_sha=sha, enable_cpf=cpf)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


ABLATION_STAGES = ("baseline", "ssf", "sha", "full")


class AdaptNet(nn.Module):
    """U-Net style segmenter: encoder, optional CPF bottleneck, four SSF decoder stages.

    Takes ``B x 3 x H x W`` images in [0, 1] (H, W divisible by 16) and returns
    ``B x num_classes x H x W`` logits.
    """

    def __init__(self, cfg: AdaptNetConfig = AdaptNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = ENCODERS[cfg.encoder](pretrained=cfg.pretrained)
        enc_ch = self.encoder.channels
        bottleneck = enc_ch[-1]
        if cfg.enable_cpf and bottleneck % 4:
            raise ConfigError(f"CPF needs bottleneck channels divisible by 4, got {bottleneck}")
        self.cpf = CascadePoolingFusion(bottleneck) if cfg.enable_cpf else nn.Identity()
        decoders = []
        c_in = bottleneck
        for skip_ch, c_out in zip(reversed(enc_ch[:-1]), cfg.decoder_channels):
            decoders.append(
                SSFModule(
                    c_in, skip_ch, c_out,
                    enable_ssf=cfg.enable_ssf,
                    enable_sha=cfg.enable_sha,
                    cascade_depth=cfg.cascade_depth,
                    offset_bound=cfg.offset_bound,
                )
            )
            c_in = c_out
        self.decoder = nn.ModuleList(decoders)
        self.head = nn.Conv2d(c_in, cfg.num_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input size {h}x{w} must be divisible by 16")
        x, skips = self.encoder(x)
        x = self.cpf(x)
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = stage(x, skip)
        return self.head(x)


def build_adaptnet(cfg: AdaptNetConfig | None = None, **overrides) -> AdaptNet:
    cfg = cfg or AdaptNetConfig()
    if overrides:
        cfg = replace(cfg, **overrides)
    return AdaptNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def architecture_summary(model: AdaptNet, size: int) -> list[tuple[str, tuple, int]]:
    """Per-block ``(name, output shape, parameter count)`` for one forward pass."""
    rows = []
    hooks = []
    blocks = [("encoder", model.encoder), ("cpf", model.cpf)]
    blocks += [(f"ssf{i + 1}", m) for i, m in enumerate(model.decoder)]
    blocks.append(("head", model.head))

    def record(name, module):
        def hook(_, __, out):
            shape = out[0].shape if isinstance(out, tuple) else out.shape
            rows.append((name, tuple(shape[1:]), count_parameters(module)))
        return hook

    for name, module in blocks:
        hooks.append(module.register_forward_hook(record(name, module)))
    try:
        with torch.no_grad():
            model.eval()(torch.zeros(1, 3, size, size))
    finally:
        for h in hooks:
            h.remove()
    return rows

