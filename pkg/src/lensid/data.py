"""Value types, dataset manifests, annotations and image/mask I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DataError(ValueError):
    """Raised for malformed inputs (bad masks, manifests, annotations)."""


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    source_video_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} are not aligned"
            )


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    mask: str
    video: str
    frame: int
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


@dataclass(frozen=True)
class PhaseAnnotation:
    video_id: str
    implantation_start: float
    implantation_end: float
    video_duration: float
    fps: float

    def __post_init__(self):
        if not (0 <= self.implantation_start < self.implantation_end <= self.video_duration):
            raise DataError(
                f"{self.video_id}: need 0 <= start < end <= duration, got "
                f"{self.implantation_start}, {self.implantation_end}, {self.video_duration}"
            )
        if self.fps <= 0:
            raise DataError(f"{self.video_id}: fps must be positive")


def _resize_channel(ch: np.ndarray, size: int, resample) -> np.ndarray:
    img = Image.fromarray(ch.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), resample=resample), dtype=np.float32)


def resize_image(rgb: np.ndarray, size: int) -> np.ndarray:
    """Bilinear float resize of an ``H x W x 3`` image to ``size`` squared."""
    if rgb.shape[:2] == (size, size):
        return np.ascontiguousarray(rgb, dtype=np.float32)
    return np.stack([_resize_channel(rgb[..., c], size, Image.BILINEAR) for c in range(3)], axis=-1)


def load_image(path, target_size: int = 512) -> np.ndarray:
    """Read an 8-bit RGB image as an ``H x W x 3`` float32 array in [0, 1].

    The image is bilinearly resized to ``target_size`` squared. Resampling is
    done in floating point so constant regions stay exactly constant; backbone
    specific standardization is applied inside the networks.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except UnidentifiedImageError as exc:
        raise DataError(f"cannot decode image {path}") from exc
    return resize_image(rgb, target_size)


def load_mask(path, target_size: int | None = None) -> np.ndarray:
    """Read a {0,255} mask image into a {0,1} uint8 array (nearest-neighbour resize)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L") if img.mode not in ("L", "1") else img)
    except UnidentifiedImageError as exc:
        raise DataError(f"cannot decode mask {path}") from exc
    arr = arr.astype(np.uint8) * (255 if arr.dtype == bool else 1)
    bad = sorted(set(np.unique(arr).tolist()) - {0, 255})
    if bad:
        raise DataError(f"mask {path} has values outside {{0,255}}: {bad[:10]}")
    labels = (arr == 255).astype(np.uint8)
    if target_size is not None and labels.shape != (target_size, target_size):
        labels = np.asarray(
            Image.fromarray(labels).resize((target_size, target_size), resample=Image.NEAREST)
        )
    return labels


def save_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if not set(np.unique(mask).tolist()) <= {0, 1}:
        raise DataError("mask labels must be in {0, 1}")
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    try:
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                entries.append(
                    ManifestEntry(
                        image=rec["image"],
                        mask=rec["mask"],
                        video=str(rec["video"]),
                        frame=int(rec["frame"]),
                        split=rec.get("split", "train"),
                    )
                )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}:{lineno}: unreadable manifest record ({exc})") from exc
    return DatasetManifest(tuple(entries), root=path.parent)


def write_manifest(manifest: DatasetManifest | Iterable[ManifestEntry], path) -> None:
    entries = manifest.entries if isinstance(manifest, DatasetManifest) else manifest
    with Path(path).open("w") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {"image": e.image, "mask": e.mask, "video": e.video, "frame": e.frame,
                     "split": e.split}
                )
                + "\n"
            )


def validate_manifest(manifest: DatasetManifest, splits: Sequence[str] = ("train", "test")) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    violations = []
    for name in splits:
        if not manifest.split(name):
            violations.append(f"empty split: {name}")

    videos_by_split: dict[str, set[str]] = {}
    for e in manifest.entries:
        videos_by_split.setdefault(e.video, set()).add(e.split)
    for video in sorted(videos_by_split):
        if len(videos_by_split[video]) > 1:
            violations.append(f"split leakage: {video}")

    for e in manifest.entries:
        img_path, mask_path = manifest.resolve(e.image), manifest.resolve(e.mask)
        missing = [p for p in (img_path, mask_path) if not p.exists()]
        for p in missing:
            violations.append(f"missing file: {p}")
        if missing:
            continue
        try:
            with Image.open(img_path) as a, Image.open(mask_path) as b:
                if a.size != b.size:
                    violations.append(f"size mismatch: {e.image} {a.size} vs {e.mask} {b.size}")
        except UnidentifiedImageError:
            violations.append(f"undecodable file in entry: {e.image}")
    return violations


def load_seg_samples(manifest: DatasetManifest, split: str, target_size: int) -> list[SegSample]:
    return [
        SegSample(
            image=load_image(manifest.resolve(e.image), target_size),
            mask=load_mask(manifest.resolve(e.mask), target_size),
            source_video_id=e.video,
            frame_index=e.frame,
        )
        for e in manifest.split(split)
    ]


ANNOTATION_HEADER = ("video_id", "start_s", "end_s", "duration_s", "fps")


def read_annotations(path) -> list[PhaseAnnotation]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ANNOTATION_HEADER:
            raise DataError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
        return [
            PhaseAnnotation(
                video_id=row["video_id"],
                implantation_start=float(row["start_s"]),
                implantation_end=float(row["end_s"]),
                video_duration=float(row["duration_s"]),
                fps=float(row["fps"]),
            )
            for row in reader
        ]


def write_annotations(annotations: Iterable[PhaseAnnotation], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_HEADER)
        for a in annotations:
            w.writerow([a.video_id, a.implantation_start, a.implantation_end, a.video_duration, a.fps])


class FrameSource(Protocol):
    """Random access to the decoded frames of one video."""

    fps: float

    def __len__(self) -> int: ...

    def __getitem__(self, index: int) -> np.ndarray: ...


class ArrayVideo:
    """In-memory video: ``T x H x W x 3`` float array in [0, 1]."""

    def __init__(self, frames: np.ndarray, fps: float, target_size: int | None = None):
        self.frames = np.asarray(frames, dtype=np.float32)
        self.fps = float(fps)
        self.target_size = target_size

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, index):
        if self.target_size is None:
            return self.frames[index]
        return resize_image(self.frames[index], self.target_size)


class FrameDirectory:
    """Video stored as a directory of image files sorted by name."""

    def __init__(self, path, fps: float, target_size: int | None = None):
        self.path = Path(path)
        self.fps = float(fps)
        self.target_size = target_size
        self.files = sorted(p for p in self.path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not self.files:
            raise DataError(f"no frames found in {self.path}")

    def __len__(self):
        return len(self.files)

    def __getitem__(self, index):
        if self.target_size is None:
            with Image.open(self.files[index]) as img:
                return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return load_image(self.files[index], self.target_size)


def open_video(path, fps: float, target_size: int | None = None) -> FrameSource:
    """Open a frame directory or a ``.npy`` array (T x H x W x 3, [0,1] or uint8)."""
    path = Path(path)
    if path.is_dir():
        return FrameDirectory(path, fps, target_size)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DataError(f"{path}: expected T x H x W x 3 frames, got shape {arr.shape}")
        return ArrayVideo(arr, fps, target_size)
    raise DataError(f"unsupported video source {path}; use a frame directory or .npy")
