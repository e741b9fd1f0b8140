"""Scripted synthetic cataract-surgery footage for fixtures and demos.

The script controls every quantity the pipeline estimates: the implantation
interval (frames carry a striped "instrument" texture), and after it the lens
size and its offset from the pupil centre.  Ground-truth masks are rendered
alongside the frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ArrayVideo, PhaseAnnotation

BACKGROUND = (0.85, 0.75, 0.7)
IRIS = (0.55, 0.35, 0.2)
PUPIL = (0.08, 0.08, 0.12)
LENS = (0.35, 0.55, 0.75)
INSTRUMENT = (0.95, 0.95, 0.95)


@dataclass(frozen=True)
class UnfoldingScript:
    """Lens behaviour relative to the end of the implantation phase (seconds)."""

    unfold_at: float = 20.0
    stable_at: float = 70.0
    folded_radius: tuple[float, float] = (0.3, 0.6)  # fraction of pupil radius, ramp
    unfolded_radius: float = 0.9
    folded_dist: float = 0.3
    centred_dist: float = 0.02
    excursion_dist: float = 0.25
    excursion_period: float = 6.0
    excursion_length: float = 2.0

    def radius_fraction(self, t: float) -> float:
        if t < self.unfold_at:
            lo, hi = self.folded_radius
            return lo + (hi - lo) * t / self.unfold_at
        return self.unfolded_radius

    def distance(self, t: float) -> float:
        """Normalized lens-pupil centre distance.

        Excursions are the last ``excursion_length`` seconds of each period
        ending at ``stable_at``, and only start once the lens has unfolded
        and stayed centred for one period.
        """
        if t < self.unfold_at:
            return self.folded_dist
        if t >= self.stable_at:
            return self.centred_dist
        phase = (self.stable_at - t) % self.excursion_period
        first_excursion_end = self.unfold_at + self.excursion_period
        if 0 < phase <= self.excursion_length and t >= first_excursion_end - self.excursion_length:
            return self.excursion_dist
        return self.centred_dist


def disk(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def render_frame(
    size: int,
    pupil: tuple[float, float, float] | None,
    lens: tuple[float, float, float] | None,
    instrument: bool,
    rng: np.random.Generator,
    noise: float = 0.02,
):
    """Return ``(image, lens_mask, pupil_mask)`` for one frame."""
    img = np.empty((size, size, 3), np.float32)
    img[:] = BACKGROUND
    c = size / 2
    img[disk(size, c, c, 0.45 * size)] = IRIS
    pupil_mask = np.zeros((size, size), bool)
    lens_mask = np.zeros((size, size), bool)
    if pupil is not None:
        pupil_mask = disk(size, *pupil)
        img[pupil_mask] = PUPIL
    if lens is not None:
        lens_mask = disk(size, *lens)
        img[lens_mask] = 0.5 * img[lens_mask] + 0.5 * np.asarray(LENS, np.float32)
        rim = lens_mask & ~disk(size, lens[0], lens[1], lens[2] - 1.5)
        img[rim] = LENS
    if instrument:
        yy, xx = np.mgrid[:size, :size]
        stripes = ((xx + yy) // 4) % 2 == 0
        band = np.abs(xx - yy) < size * 0.2
        img[stripes & band] = INSTRUMENT
    img += rng.normal(0.0, noise, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), lens_mask.astype(np.uint8), pupil_mask.astype(np.uint8)


@dataclass(frozen=True)
class SyntheticSurgery:
    size: int = 64
    fps: float = 5.0
    implantation_start: float = 10.0
    implantation_end: float = 14.0
    duration: float = 104.0
    pupil_radius_frac: float = 0.3
    script: UnfoldingScript = UnfoldingScript()
    seed: int = 0
    video_id: str = "synthetic"

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    def annotation(self) -> PhaseAnnotation:
        return PhaseAnnotation(
            self.video_id, self.implantation_start, self.implantation_end, self.duration, self.fps
        )

    @property
    def end_index(self) -> int:
        """First frame after the implantation phase."""
        return int(round(self.implantation_end * self.fps))

    def frame_geometry(self, index: int):
        c = self.size / 2
        r_p = self.pupil_radius_frac * self.size
        pupil = (c, c, r_p)
        instrument = round(self.implantation_start * self.fps) <= index < self.end_index
        if index < self.end_index:
            return pupil, None, instrument
        rel = (index - self.end_index) / self.fps
        offset = self.script.distance(rel) * 2 * r_p
        lens = (c + offset, c, self.script.radius_fraction(rel) * r_p)
        return pupil, lens, instrument

    def render(self, index: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        pupil, lens, instrument = self.frame_geometry(index)
        return render_frame(self.size, pupil, lens, instrument, rng)

    def render_all(self):
        frames, lens, pupil = zip(*(self.render(i) for i in range(self.n_frames)))
        return np.stack(frames), np.stack(lens), np.stack(pupil)

    def video(self) -> ArrayVideo:
        return ArrayVideo(self.render_all()[0], self.fps)


def disk_dataset(n: int = 4, size: int = 64, seed: int = 0) -> list:
    """``n`` noisy frames with one lens-coloured disk each, as segmentation samples."""
    from .data import SegSample

    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        r = rng.uniform(0.15, 0.3) * size
        cx, cy = rng.uniform(r + 2, size - r - 2, 2)
        img, lens, _ = render_frame(size, None, (cx, cy, r), False, rng)
        samples.append(SegSample(img, lens, f"disk{i}", i))
    return samples


def texture_clips(n: int = 20, size: int = 64, n_frames: int = 5, seed: int = 0) -> list:
    """Balanced clips: implantation frames carry the instrument texture, rest frames do not."""
    from .clips import IMPLANTATION, REST, ClipSample, ClipSpec

    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        label = IMPLANTATION if i % 2 == 0 else REST
        lens = None
        if label == REST and rng.random() < 0.5:
            lens = (size / 2 + rng.uniform(-4, 4), size / 2, rng.uniform(0.1, 0.25) * size)
        pupil = (size / 2, size / 2, 0.3 * size)
        frames = [render_frame(size, pupil, lens, label == IMPLANTATION, rng)[0] for _ in range(n_frames)]
        spec = ClipSpec(f"tex{i}", 0.0, 3.0, label)
        clips.append(ClipSample(frames, label, spec, seed, list(range(n_frames))))
    return clips
