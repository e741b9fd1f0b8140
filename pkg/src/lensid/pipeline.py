"""Video-level analysis: phase localization, segmentation, lens statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .adaptnet import AdaptNet
from .analytics import AnalyticsParams, LensTimeline, analyze_timeline, lens_statistics
from .phase import PhaseNet, localize_implantation


class PhaseNotFound(RuntimeError):
    pass


@dataclass
class VideoAnalysis:
    implantation: tuple[float, float]
    seg_start_frame: int
    timeline: LensTimeline
    unfolding_delay: float | None
    stabilization_time: float | None

    def summary_extra(self, fps: float, stride_s: float) -> dict:
        return {
            "implantation_start_s": self.implantation[0],
            "implantation_end_s": self.implantation[1],
            "segmentation_start_frame": self.seg_start_frame,
            "segmentation_start_s": self.seg_start_frame / fps,
            "fps": fps,
            "window_stride_s": stride_s,
        }


def segment_frames(model: AdaptNet, frames, batch_size: int = 16) -> np.ndarray:
    """Hard masks (argmax over classes) for a sequence of ``H x W x 3`` frames."""
    model.eval()
    dtype = next(model.parameters()).dtype
    masks = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            batch = np.stack(frames[i : i + batch_size]).transpose(0, 3, 1, 2)
            logits = model(torch.as_tensor(batch, dtype=dtype))
            masks.append(logits.argmax(dim=1).to(torch.uint8).numpy())
    return np.concatenate(masks) if masks else np.zeros((0, 0, 0), np.uint8)


def analyze_video(
    video,
    phase_model: PhaseNet,
    lens_model: AdaptNet,
    pupil_model: AdaptNet,
    params: AnalyticsParams | None = None,
    stride_s: float = 0.5,
    batch_size: int = 16,
) -> VideoAnalysis:
    """Run the full analysis on one video.

    Segmentation starts at the first frame at or after the detected end of
    the implantation phase; timeline times are relative to that frame.
    """
    params = params or AnalyticsParams()
    fps = float(video.fps)
    interval = localize_implantation(phase_model, video, fps, stride_s, batch_size)
    if interval is None:
        raise PhaseNotFound("no window was classified as lens implantation")
    start = min(len(video) - 1, math.ceil(interval[1] * fps - 1e-9))
    frames = [video[i] for i in range(start, len(video))]
    lens = segment_frames(lens_model, frames, batch_size)
    pupil = segment_frames(pupil_model, frames, batch_size)
    timeline = lens_statistics(lens, pupil, fps, params.postprocess)
    delay, stab = analyze_timeline(timeline, params)
    return VideoAnalysis(interval, start, timeline, delay, stab)
