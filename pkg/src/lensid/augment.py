"""Photometric and geometric augmentation for segmentation samples and clips.

Geometric transforms move image and mask together (mask resampled with
nearest neighbour, so it stays binary); photometric ones touch images only.
A clip receives one parameter draw shared by all of its frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .clips import ClipSample
from .data import SegSample


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    p: float = 0.5
    motion_blur_max: int = 7  # kernel length in pixels
    gaussian_sigma: tuple[float, float] = (0.3, 1.5)
    contrast: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (-0.1, 0.1)
    shift_frac: float = 0.0625
    scale: tuple[float, float] = (0.9, 1.1)
    rotation_deg: float = 15.0


def motion_blur(image: np.ndarray, length: int, angle_deg: float) -> np.ndarray:
    if length < 2:
        return image
    kernel = np.zeros((length, length), dtype=np.float32)
    c = (length - 1) / 2
    theta = math.radians(angle_deg)
    for s in np.linspace(-c, c, 4 * length):
        kernel[int(round(c + s * math.sin(theta))), int(round(c + s * math.cos(theta)))] = 1.0
    kernel /= kernel.sum()
    return np.stack(
        [ndimage.convolve(image[..., ch], kernel, mode="nearest") for ch in range(image.shape[-1])],
        axis=-1,
    )


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="nearest")


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = image.mean()
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def adjust_brightness(image: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(image + delta, 0.0, 1.0)


def affine_matrix(shape, shift=(0.0, 0.0), scale=1.0, angle_deg=0.0):
    """Output->input mapping for rotation/scale about the centre then a shift.

    ``shift`` is ``(dx, dy)`` in pixels: content moves right/down for positive values.
    """
    h, w = shape[:2]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    theta = math.radians(angle_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    fwd = scale * rot
    inv = np.linalg.inv(fwd)
    t = np.array([shift[1], shift[0]], dtype=np.float64)
    offset = centre - inv @ (centre + t)
    return inv, offset


def warp(arr: np.ndarray, matrix, offset, order: int) -> np.ndarray:
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset, order=order, mode="constant", cval=0)
    return np.stack(
        [ndimage.affine_transform(arr[..., c], matrix, offset, order=order, mode="constant", cval=0)
         for c in range(arr.shape[-1])],
        axis=-1,
    )


def geometric(image, mask=None, shift=(0.0, 0.0), scale=1.0, angle_deg=0.0):
    """Apply one affine warp to an image and (optionally) its mask."""
    if angle_deg % 90 == 0 and scale == 1.0 and shift == (0.0, 0.0):
        k = int(angle_deg // 90) % 4
        rot = lambda a: np.ascontiguousarray(np.rot90(a, k=-k, axes=(0, 1)))  # noqa: E731
        return rot(image), (None if mask is None else rot(mask))
    matrix, offset = affine_matrix(image.shape, shift, scale, angle_deg)
    out_img = warp(image.astype(np.float32), matrix, offset, order=1)
    out_mask = None if mask is None else warp(mask.astype(np.uint8), matrix, offset, order=0)
    return out_img, out_mask


def _draw(rng: np.random.Generator, cfg: AugmentConfig, shape) -> dict:
    ops = {}
    h, w = shape[:2]
    if rng.random() < cfg.p:
        ops["motion_blur"] = (int(rng.integers(3, cfg.motion_blur_max + 1)), float(rng.uniform(0, 180)))
    if rng.random() < cfg.p:
        ops["gaussian_blur"] = float(rng.uniform(*cfg.gaussian_sigma))
    if rng.random() < cfg.p:
        ops["contrast"] = float(rng.uniform(*cfg.contrast))
    if rng.random() < cfg.p:
        ops["brightness"] = float(rng.uniform(*cfg.brightness))
    geo = {}
    if rng.random() < cfg.p:
        geo["shift"] = (float(rng.uniform(-1, 1) * cfg.shift_frac * w),
                        float(rng.uniform(-1, 1) * cfg.shift_frac * h))
    if rng.random() < cfg.p:
        geo["scale"] = float(rng.uniform(*cfg.scale))
    if rng.random() < cfg.p:
        geo["angle_deg"] = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    if geo:
        ops["geometric"] = geo
    return ops


def _photometric(image, ops):
    if "motion_blur" in ops:
        image = motion_blur(image, *ops["motion_blur"])
    if "gaussian_blur" in ops:
        image = gaussian_blur(image, ops["gaussian_blur"])
    if "contrast" in ops:
        image = adjust_contrast(image, ops["contrast"])
    if "brightness" in ops:
        image = adjust_brightness(image, ops["brightness"])
    return image.astype(np.float32)


def augment(sample, rng, cfg: AugmentConfig = AugmentConfig()):
    """Return an augmented copy of a :class:`SegSample` or :class:`ClipSample`."""
    if not cfg.enabled:
        return sample
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if isinstance(sample, SegSample):
        ops = _draw(rng, cfg, sample.image.shape)
        image, mask = sample.image, sample.mask
        if "geometric" in ops:
            image, mask = geometric(image, mask, **ops["geometric"])
        return replace(sample, image=_photometric(image, ops), mask=mask.astype(np.uint8))
    if isinstance(sample, ClipSample):
        ops = _draw(rng, cfg, sample.frames[0].shape)
        frames = []
        for f in sample.frames:
            if "geometric" in ops:
                f, _ = geometric(f, None, **ops["geometric"])
            frames.append(_photometric(f, ops))
        return replace(sample, frames=frames)
    raise TypeError(f"cannot augment {type(sample).__name__}")
