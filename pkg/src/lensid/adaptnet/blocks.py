"""Building blocks of the AdaptNet decoder and bottleneck."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .deform import deform_conv2d


class LayerNorm2d(nn.Module):
    """Layer normalization over (C, H, W) of each sample, with per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class ConvBlock(nn.Sequential):
    """3x3 convolution, layer normalization, ReLU."""

    def __init__(self, in_channels: int, out_channels: int, norm: bool = True):
        layers = [nn.Conv2d(in_channels, out_channels, 3, padding=1)]
        if norm:
            layers.append(LayerNorm2d(out_channels))
        layers.append(nn.ReLU())
        super().__init__(*layers)


class FeatureFusionDecision(nn.Module):
    """Pixel-wise softmax attention over ``B`` competing branches.

    Every branch goes through the same 3x3 convolution (shared semantics) and
    the same 1x1 convolution (attention logit).  The per-pixel softmax over
    branch logits weights the shared features before summation.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.shared = nn.Conv2d(channels, channels, 3, padding=1)
        self.attention = nn.Conv2d(channels, 1, 1)

    def fuse(self, branches: Sequence[torch.Tensor]):
        """Return ``(output, weights, shared_features)``; weights are (B_batch, n, H, W)."""
        if len(branches) < 2:
            raise ValueError("feature fusion needs at least two branches")
        shape = branches[0].shape
        for br in branches[1:]:
            if br.shape != shape:
                raise ValueError(f"branch shape {tuple(br.shape)} != {tuple(shape)}")
        n = len(branches)
        stacked = torch.cat(list(branches), dim=0)
        shared = self.shared(stacked)
        logits = self.attention(shared)
        shared = torch.stack(shared.chunk(n, dim=0), dim=1)  # b, n, D, h, w
        logits = torch.cat(logits.chunk(n, dim=0), dim=1)  # b, n, h, w
        weights = torch.softmax(logits, dim=1)
        out = (weights.unsqueeze(2) * shared).sum(dim=1)
        return out, weights, shared

    def forward(self, branches: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fuse(branches)[0]


class CascadePoolingFusion(nn.Module):
    """Bottleneck fusing the input with cascaded and global average pooling.

    Channel ``c`` of the input and of the four pooled maps are interleaved into
    groups of five and refined by a grouped convolution (``C`` groups); the
    pooled maps also pass a weight-shared ``C -> C/4`` convolution.  Both
    ``C``-channel results are concatenated and mixed back to ``C`` channels.
    """

    n_pools = 3

    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise ValueError(f"CPF needs channels divisible by 4, got {channels}")
        self.channels = channels
        self.intra = nn.Conv2d(5 * channels, channels, 3, padding=1, groups=channels)
        self.shared = nn.Conv2d(channels, channels // 4, 3, padding=1)
        self.inter = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def pooled_branches(self, x):
        h, w = x.shape[-2:]
        pooled = []
        p = x
        for _ in range(self.n_pools):
            # ceil_mode keeps the cascade valid on tiny bottlenecks (4x4 -> 2, 1, 1)
            p = F.avg_pool2d(p, 2, stride=2, ceil_mode=True)
            pooled.append(p)
        pooled.append(F.adaptive_avg_pool2d(x, 1))
        return [F.interpolate(p, size=(h, w), mode="bilinear", align_corners=False) for p in pooled]

    @staticmethod
    def interleave(branches: Sequence[torch.Tensor]) -> torch.Tensor:
        """Channel ``5c + j`` of the result is channel ``c`` of ``branches[j]``."""
        b, c, h, w = branches[0].shape
        return torch.stack(list(branches), dim=2).reshape(b, c * len(branches), h, w)

    def forward(self, x):
        ups = self.pooled_branches(x)
        intra = F.relu(self.intra(self.interleave([x, *ups])))
        shared = F.relu(torch.cat([self.shared(u) for u in ups], dim=1))
        return F.relu(self.inter(torch.cat([intra, shared], dim=1)))


class ScaleAdaptiveBlock(nn.Module):
    """``K`` cascaded conv blocks whose outputs are fused by FFD attention."""

    def __init__(self, channels: int, depth: int = 3, norm: bool = True):
        super().__init__()
        if depth < 2:
            raise ValueError("scale-adaptive block needs depth >= 2")
        self.blocks = nn.ModuleList(ConvBlock(channels, channels, norm=norm) for _ in range(depth))
        self.fusion = FeatureFusionDecision(channels)

    def cascade(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, x):
        return self.fusion(self.cascade(x))


class ShapeAdaptiveBlock(nn.Module):
    """Fuses a deformable convolution with a structured convolution sharing its weights.

    Offsets are ``R * hardtanh(conv(x))`` so every displacement is bounded by
    ``R`` pixels.  The offset convolution starts at zero, i.e. the deformable
    branch initially coincides with the structured one.
    """

    def __init__(self, channels: int, offset_bound: float = 3.0, kernel_size: int = 3):
        super().__init__()
        self.offset_bound = float(offset_bound)
        self.padding = kernel_size // 2
        self.offset = nn.Conv2d(channels, 2 * kernel_size * kernel_size, 3, padding=1)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=self.padding)
        self.fusion = FeatureFusionDecision(channels)

    def offsets(self, x):
        return self.offset_bound * F.hardtanh(self.offset(x))

    def branches(self, x, offsets=None):
        if offsets is None:
            offsets = self.offsets(x)
        deformable = deform_conv2d(x, offsets, self.conv.weight, self.conv.bias, padding=self.padding)
        return deformable, self.conv(x)

    def forward(self, x):
        return self.fusion(list(self.branches(x)))


class SSFModule(nn.Module):
    """Decoder stage: upsample, join the skip, reduce, then scale/shape adaptation."""

    def __init__(
        self,
        in_channels: int,
        skip_channels: int,
        out_channels: int,
        enable_ssf: bool = True,
        enable_sha: bool = True,
        cascade_depth: int = 3,
        offset_bound: float = 3.0,
    ):
        super().__init__()
        if enable_sha and not enable_ssf:
            raise ValueError("shape-adaptive block requires the SSF module")
        self.reduce = nn.Sequential(
            ConvBlock(in_channels + skip_channels, out_channels),
            ConvBlock(out_channels, out_channels),
        )
        self.scale = ScaleAdaptiveBlock(out_channels, cascade_depth) if enable_ssf else nn.Identity()
        self.shape = ShapeAdaptiveBlock(out_channels, offset_bound) if enable_sha else nn.Identity()

    def forward(self, x, skip):
        if skip.shape[-2:] != (2 * x.shape[-2], 2 * x.shape[-1]):
            raise ValueError(
                f"skip {tuple(skip.shape[-2:])} must be twice the decoder size {tuple(x.shape[-2:])}"
            )
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.reduce(torch.cat([x, skip], dim=1))
        return self.shape(self.scale(x))
