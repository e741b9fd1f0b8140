from __future__ import annotations

import torch
import torch.nn as nn
import torchvision

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# VGG16 ``features`` indices delimiting the five convolution stages (pools excluded).
_VGG16_STAGES = ((0, 4), (5, 9), (10, 16), (17, 23), (24, 30))


class Standardize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class VGG16Encoder(nn.Module):
    """VGG16 trunk returning skips at strides 1, 2, 4, 8 and the stride-16 bottleneck."""

    channels = (64, 128, 256, 512, 512)

    def __init__(self, pretrained: bool = False):
        super().__init__()
        weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
        features = torchvision.models.vgg16(weights=weights).features
        self.standardize = Standardize(IMAGENET_MEAN, IMAGENET_STD)
        self.stages = nn.ModuleList(nn.Sequential(*features[a:b]) for a, b in _VGG16_STAGES)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        x = self.standardize(x)
        skips = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.pool(x)
            x = stage(x)
            skips.append(x)
        return skips[-1], skips[:-1]


class TinyEncoder(nn.Module):
    """Desk-scale stand-in with the same stride layout as the VGG16 encoder."""

    channels = (8, 16, 32, 64, 64)

    def __init__(self, pretrained: bool = False):
        super().__init__()
        if pretrained:
            raise ValueError("the tiny encoder has no pretrained weights")
        self.standardize = Standardize((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        stages = []
        c_in = 3
        for c in self.channels:
            stages.append(nn.Sequential(nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()))
            c_in = c
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2, 2)

    forward = VGG16Encoder.forward


ENCODERS = {"VGG16": VGG16Encoder, "TinyDesk": TinyEncoder}
