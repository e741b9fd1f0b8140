"""Deformable 3x3 convolution with bilinear sampling and zero padding.

Offsets follow the usual layout of ``2 * k * k`` channels, ordered
``(dy_0, dx_0, dy_1, dx_1, ...)`` over kernel taps in row-major order.
Only stride 1 is supported, which is all the decoder needs.
"""

from __future__ import annotations

import torch


def bilinear_sample(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (B, C, H, W) at real coordinates ``py``/``px`` (B, H', W').

    Corners falling outside the image contribute zero.
    """
    b, c, h, w = x.shape
    flat = x.reshape(b, c, h * w)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    out = x.new_zeros((b, c) + py.shape[1:])
    for dy, wy in ((0, 1 - wy1), (1, wy1)):
        for dx, wx in ((0, 1 - wx1), (1, wx1)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
            # invalid corners (incl. non-finite coordinates) read index 0 with weight 0
            idx = torch.where(valid, yy * w + xx, torch.zeros_like(yy)).long()
            vals = torch.gather(flat, 2, idx.reshape(b, 1, -1).expand(b, c, -1))
            weight = (wy * wx * valid).reshape(b, 1, -1)
            out = out + (vals * weight).reshape(out.shape)
    return out


def deform_conv2d(
    x: torch.Tensor,
    offset: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    padding: int = 1,
    dilation: int = 1,
) -> torch.Tensor:
    """Deformable convolution: tap ``t`` at pixel ``p`` reads ``x(p + r_t + offset_t(p))``."""
    b, _, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    if offset.shape != (b, 2 * kh * kw, h, w):
        raise ValueError(f"offset shape {tuple(offset.shape)} != {(b, 2 * kh * kw, h, w)}")
    base_y = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    base_x = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    out = x.new_zeros((b, c_out, h, w))
    for i in range(kh):
        for j in range(kw):
            t = i * kw + j
            py = base_y + (i * dilation - padding) + offset[:, 2 * t]
            px = base_x + (j * dilation - padding) + offset[:, 2 * t + 1]
            sampled = bilinear_sample(x, py, px)
            out = out + torch.einsum("oc,bchw->bohw", weight[:, :, i, j], sampled)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out
