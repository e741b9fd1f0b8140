"""Balanced clip dataset for implantation-phase recognition.

Each annotated video is cut into 12 overlapping 3 s implantation clips plus
8 contiguous clips before and 4 after the phase.  Training sequences are drawn
stochastically: a random 3 s window inside the clip, split into N equal
sub-windows with one random frame per sub-window.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import DataError, FrameSource, PhaseAnnotation

logger = logging.getLogger(__name__)

IMPLANTATION = "Implantation"
REST = "Rest"
LABELS = (IMPLANTATION, REST)

CLIP_SECONDS = 3.0
N_IMPLANTATION_CLIPS = 12
N_PRE_CLIPS = 8
N_POST_CLIPS = 4
MIN_REST_CLIP_SECONDS = 1.0


class DegeneratePhaseError(DataError):
    pass


class InsufficientContextError(DataError):
    pass


class SparseVideoError(DataError):
    pass


@dataclass(frozen=True)
class ClipSpec:
    video_id: str
    start: float
    end: float
    label: str

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError(f"clip end {self.end} must exceed start {self.start}")
        if self.label not in LABELS:
            raise DataError(f"unknown clip label {self.label!r}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def target(self) -> int:
        return int(self.label == IMPLANTATION)


@dataclass
class ClipSample:
    frames: list[np.ndarray]
    label: str
    spec: ClipSpec
    rng_seed: int | tuple = 0
    frame_indices: list[int] = field(default_factory=list)

    @property
    def target(self) -> int:
        return int(self.label == IMPLANTATION)


def partition_video(ann: PhaseAnnotation) -> list[ClipSpec]:
    """Cut one annotated video into 24 labelled clip specs."""
    start, end, duration = ann.implantation_start, ann.implantation_end, ann.video_duration
    if end - start < CLIP_SECONDS:
        raise DegeneratePhaseError(
            f"{ann.video_id}: implantation lasts {end - start:.3f}s, need >= {CLIP_SECONDS}s"
        )
    pre, post = start, duration - end
    if pre < N_PRE_CLIPS * MIN_REST_CLIP_SECONDS:
        raise InsufficientContextError(f"{ann.video_id}: only {pre:.3f}s before implantation")
    if post < N_POST_CLIPS * MIN_REST_CLIP_SECONDS:
        raise InsufficientContextError(f"{ann.video_id}: only {post:.3f}s after implantation")

    specs = [
        ClipSpec(ann.video_id, float(s), float(s) + CLIP_SECONDS, IMPLANTATION)
        for s in np.linspace(start, end - CLIP_SECONDS, N_IMPLANTATION_CLIPS)
    ]
    pre_edges = np.linspace(0.0, start, N_PRE_CLIPS + 1)
    post_edges = np.linspace(end, duration, N_POST_CLIPS + 1)
    for edges in (pre_edges, post_edges):
        specs.extend(
            ClipSpec(ann.video_id, float(a), float(b), REST) for a, b in zip(edges[:-1], edges[1:])
        )
    return specs


def partition_videos(annotations: Iterable[PhaseAnnotation]) -> list[ClipSpec]:
    """Partition every video, skipping (with a warning) those violating preconditions."""
    specs = []
    for ann in annotations:
        try:
            specs.extend(partition_video(ann))
        except DataError as exc:
            logger.warning("skipping video %s: %s", ann.video_id, exc)
    return specs


def _frames_in(t0: float, t1: float, fps: float, n_frames: int) -> np.ndarray:
    """Indices of frames with timestamp ``index / fps`` in ``[t0, t1)``."""
    eps = 1e-9
    lo = max(0, math.ceil(t0 * fps - eps))
    hi = min(n_frames, math.ceil(t1 * fps - eps))
    return np.arange(lo, hi)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        return np.random.default_rng(np.random.SeedSequence(list(seed)))
    return np.random.default_rng(seed)


def sample_frame_indices(
    spec: ClipSpec, fps: float, n_frames: int, n: int, rng
) -> list[int]:
    """Pick ``n`` frame indices for one stochastic training sequence.

    Clips shorter than 3 s use the whole clip as the window.
    """
    rng = _as_rng(rng)
    window = min(CLIP_SECONDS, spec.duration)
    w0 = spec.start + rng.uniform(0.0, spec.duration - window)
    edges = w0 + window * np.arange(n + 1) / n
    indices = []
    for a, b in zip(edges[:-1], edges[1:]):
        candidates = _frames_in(a, b, fps, n_frames)
        if len(candidates) == 0:
            raise SparseVideoError(
                f"{spec.video_id}: no frame in sub-window [{a:.3f}, {b:.3f}) at {fps} fps"
            )
        indices.append(int(rng.choice(candidates)))
    return indices


def sample_training_sequence(
    spec: ClipSpec, video_frames: FrameSource, n: int = 5, rng_seed=0
) -> ClipSample:
    indices = sample_frame_indices(spec, video_frames.fps, len(video_frames), n, rng_seed)
    return ClipSample(
        frames=[np.asarray(video_frames[i]) for i in indices],
        label=spec.label,
        spec=spec,
        rng_seed=rng_seed,
        frame_indices=indices,
    )


_SAMPLE_STREAM = 0
_SHUFFLE_STREAM = 1


def derive_seed(root_seed: int, *counters: int) -> tuple:
    """Counter-based seed splitting: disjoint streams per (epoch, sample) key."""
    return (int(root_seed), *map(int, counters))


def build_balanced_epoch(
    specs: Sequence[ClipSpec],
    rng_seed: int,
    videos: Mapping[str, FrameSource],
    n: int = 5,
    epoch: int = 0,
) -> list[ClipSample]:
    """Draw one sample per spec (12 implantation / 12 rest per video) and shuffle."""
    samples = [
        sample_training_sequence(
            spec, videos[spec.video_id], n, derive_seed(rng_seed, _SAMPLE_STREAM, epoch, i)
        )
        for i, spec in enumerate(specs)
    ]
    n_pos = sum(s.target for s in samples)
    if n_pos != len(samples) - n_pos:
        raise DataError(f"unbalanced epoch: {n_pos} implantation vs {len(samples) - n_pos} rest")
    order = _as_rng(derive_seed(rng_seed, _SHUFFLE_STREAM, epoch)).permutation(len(samples))
    return [samples[i] for i in order]


def write_clip_specs(specs: Iterable[ClipSpec], path) -> int:
    count = 0
    with Path(path).open("w") as fh:
        for spec in specs:
            fh.write(json.dumps(asdict(spec)) + "\n")
            count += 1
    return count


def read_clip_specs(path) -> list[ClipSpec]:
    with Path(path).open() as fh:
        return [ClipSpec(**json.loads(line)) for line in fh if line.strip()]
