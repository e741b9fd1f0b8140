"""Mask post-processing and lens statistics (unfolding delay, instability)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PostprocessConfig:
    close_size: int = 15
    open_size: int = 10
    order: str = "close-open"

    def __post_init__(self):
        if self.order not in ("close-open", "open-close"):
            raise ValueError(f"order must be 'close-open' or 'open-close', got {self.order!r}")


@dataclass(frozen=True)
class ConvexMask:
    mask: np.ndarray
    centroid: tuple[float, float]  # (x, y) pixels
    area: int

    @property
    def valid(self) -> bool:
        return self.area > 0


def _as_binary(raw) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.dtype != bool:
        extra = set(np.unique(raw).tolist()) - {0, 1}
        if extra:
            raise ValueError(f"mask is not binary; found values {sorted(extra)[:10]}")
    return raw.astype(bool)


def _morph(mask: np.ndarray, size: int, op) -> np.ndarray:
    # zero padding by the kernel size keeps closing extensive at the image border
    if size <= 1:
        return mask
    padded = np.pad(mask, size)
    out = op(padded, structure=np.ones((size, size), dtype=bool))
    return out[size:-size, size:-size]


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n <= 1:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def fill_convex_hull(mask: np.ndarray) -> np.ndarray:
    """Fill the smallest convex polygon around the foreground pixel centres."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return mask.copy()
    pts = np.column_stack([xs, ys]).astype(np.float64)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # collinear support: its hull is the support itself
        return mask.copy()
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    gy, gx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    grid = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)
    inside = np.all(grid @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
    out = np.zeros_like(mask, dtype=bool)
    out[y0 : y1 + 1, x0 : x1 + 1] = inside.reshape(gy.shape)
    return out | mask


def make_convex_mask(mask: np.ndarray) -> ConvexMask:
    area = int(mask.sum())
    if area == 0:
        return ConvexMask(mask, (math.nan, math.nan), 0)
    ys, xs = np.nonzero(mask)
    return ConvexMask(mask, (float(xs.mean()), float(ys.mean())), area)


def postprocess_mask(raw, cfg: PostprocessConfig = PostprocessConfig()) -> ConvexMask:
    """Closing, opening, largest component, convex hull fill."""
    mask = _as_binary(raw)
    close = lambda m: _morph(m, cfg.close_size, ndimage.binary_closing)  # noqa: E731
    open_ = lambda m: _morph(m, cfg.open_size, ndimage.binary_opening)  # noqa: E731
    if cfg.order == "close-open":
        mask = open_(close(mask))
    else:
        mask = close(open_(mask))
    mask = fill_convex_hull(largest_component(mask))
    return make_convex_mask(mask)


@dataclass
class LensTimeline:
    t: np.ndarray
    rel_area: np.ndarray
    rel_dist: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.rel_area = np.asarray(self.rel_area, dtype=np.float64)
        self.rel_dist = np.asarray(self.rel_dist, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = len(self.t)
        if not (len(self.rel_area) == len(self.rel_dist) == len(self.valid) == n):
            raise ValueError("timeline columns differ in length")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_series(cls, rel_area, rel_dist, fps: float, valid=None) -> "LensTimeline":
        rel_area = np.asarray(rel_area, dtype=np.float64)
        valid = np.ones(len(rel_area), bool) if valid is None else valid
        return cls(np.arange(len(rel_area)) / fps, rel_area, rel_dist, valid)


def relative_measures(lens: ConvexMask, pupil: ConvexMask) -> tuple[float, float, bool]:
    """``(relative area, centre distance / pupil equivalent diameter, valid)``."""
    if not pupil.valid:
        return math.nan, math.nan, False
    rel_area = lens.area / pupil.area
    if not lens.valid:
        return rel_area, math.nan, False
    diameter = 2.0 * math.sqrt(pupil.area / math.pi)
    dx = lens.centroid[0] - pupil.centroid[0]
    dy = lens.centroid[1] - pupil.centroid[1]
    return rel_area, math.hypot(dx, dy) / diameter, True


def lens_statistics(
    lens_masks: Sequence[np.ndarray],
    pupil_masks: Sequence[np.ndarray],
    fps: float,
    cfg: PostprocessConfig = PostprocessConfig(),
) -> LensTimeline:
    if len(lens_masks) != len(pupil_masks):
        raise ValueError(f"{len(lens_masks)} lens masks vs {len(pupil_masks)} pupil masks")
    rows = [
        relative_measures(postprocess_mask(lm, cfg), postprocess_mask(pm, cfg))
        for lm, pm in zip(lens_masks, pupil_masks)
    ]
    a, d, v = zip(*rows) if rows else ((), (), ())
    return LensTimeline(np.arange(len(rows)) / float(fps), a, d, v)


class NoDataError(ValueError):
    pass


def _require_data(tl: LensTimeline):
    if len(tl) == 0 or not tl.valid.any():
        raise NoDataError("timeline has no valid frames")


def _first_sustained(tl: LensTimeline, ok: np.ndarray, sustain_s: float, until=None):
    """Earliest valid ``t`` such that every valid frame in ``[t, max(t + sustain, until)]`` is ok.

    The sustain window must fit inside the timeline.
    """
    t, valid = tl.t, tl.valid
    t_end = t[-1]
    bad_times = t[valid & ~ok]
    eps = 1e-9
    for i in np.flatnonzero(valid & ok):
        t0 = t[i]
        if t0 + sustain_s > t_end + eps:
            break
        horizon = t0 + sustain_s if until is None else max(t0 + sustain_s, until)
        if not np.any((bad_times >= t0 - eps) & (bad_times <= horizon + eps)):
            return float(t0)
    return None


@dataclass(frozen=True)
class UnfoldingParams:
    area_ratio: float = 0.95
    max_dist: float = 0.1
    sustain_s: float = 2.0
    reference_percentile: float = 95.0


@dataclass(frozen=True)
class StabilityParams:
    max_dist: float = 0.1
    sustain_s: float = 5.0
    horizon_fraction: float = 0.9


def unfolding_delay(tl: LensTimeline, params: UnfoldingParams = UnfoldingParams()) -> float | None:
    """First time the lens stays near its maximal visible area while centred.

    "Maximal" is the given percentile of the relative area over the valid
    frames, which ignores isolated over-segmented frames.  Returns ``None``
    if the condition is never sustained.
    """
    _require_data(tl)
    ref = float(np.percentile(tl.rel_area[tl.valid], params.reference_percentile))
    with np.errstate(invalid="ignore"):
        ok = (tl.rel_area >= params.area_ratio * ref) & (tl.rel_dist <= params.max_dist)
    return _first_sustained(tl, ok, params.sustain_s)


def instability_profile(
    tl: LensTimeline, params: StabilityParams = StabilityParams()
) -> tuple[np.ndarray, float | None]:
    """Return the distance series and the time after which the lens stays centred.

    After the returned time the normalized distance stays below ``max_dist``
    for at least ``sustain_s`` and does not exceed it again before
    ``horizon_fraction`` of the timeline.
    """
    _require_data(tl)
    with np.errstate(invalid="ignore"):
        ok = tl.rel_dist < params.max_dist
    until = params.horizon_fraction * float(tl.t[-1])
    return tl.rel_dist.copy(), _first_sustained(tl, ok, params.sustain_s, until=until)


@dataclass
class AnalyticsParams:
    unfolding: UnfoldingParams = field(default_factory=UnfoldingParams)
    stability: StabilityParams = field(default_factory=StabilityParams)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticsParams":
        return cls(
            UnfoldingParams(**d.get("unfolding", {})),
            StabilityParams(**d.get("stability", {})),
            PostprocessConfig(**d.get("postprocess", {})),
        )


TIMELINE_HEADER = ("t_s", "rel_area", "rel_dist", "valid")


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_timeline_csv(tl: LensTimeline, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMELINE_HEADER)
        for t, a, d, v in zip(tl.t, tl.rel_area, tl.rel_dist, tl.valid):
            w.writerow([_fmt(t), _fmt(a), _fmt(d), int(v)])


def read_timeline_csv(path) -> LensTimeline:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return LensTimeline(
        [float(r["t_s"]) for r in rows],
        [float(r["rel_area"]) for r in rows],
        [float(r["rel_dist"]) for r in rows],
        [bool(int(r["valid"])) for r in rows],
    )


def _plot(t, y, valid, ylabel, path, threshold=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    yv = np.where(valid, y, np.nan)
    ax.plot(t, yv, lw=1.2)
    if threshold is not None:
        ax.axhline(threshold, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("time after implantation (s)")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(
    tl: LensTimeline,
    delay: float | None,
    stab: float | None,
    out_dir,
    params: AnalyticsParams | None = None,
    extra: dict | None = None,
) -> dict[str, Path]:
    """Write ``timeline.csv``, ``summary.json`` and the two timeline plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = params or AnalyticsParams()
    paths = {
        "timeline": out_dir / "timeline.csv",
        "summary": out_dir / "summary.json",
        "area_plot": out_dir / "relative_area.png",
        "movement_plot": out_dir / "relative_movement.png",
    }
    write_timeline_csv(tl, paths["timeline"])
    summary = {
        "unfolding_delay_s": delay,
        "stabilization_time_s": stab,
        "unfolding_reached": delay is not None,
        "stabilization_reached": stab is not None,
        "n_frames": len(tl),
        "n_valid": int(tl.valid.sum()),
        "params": params.to_dict(),
    }
    if extra:
        summary.update(extra)
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _plot(tl.t, tl.rel_area, tl.valid, "relative lens area", paths["area_plot"])
    _plot(tl.t, tl.rel_dist, tl.valid, "relative lens movement", paths["movement_plot"],
          threshold=params.stability.max_dist)
    return paths


def analyze_timeline(tl: LensTimeline, params: AnalyticsParams | None = None):
    """Unfolding delay and stabilization time, ``None`` where not reached or no data."""
    params = params or AnalyticsParams()
    try:
        delay = unfolding_delay(tl, params.unfolding)
        _, stab = instability_profile(tl, params.stability)
    except NoDataError:
        return None, None
    return delay, stab
