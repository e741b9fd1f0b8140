"""Command line interface: ``lensid <command> [options]``.

Every command writes only below ``--out`` and records a ``run.json`` holding
its arguments, fully resolved configuration, seed and package version, which
``lensid replay`` can re-execute.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 model/checkpoint
error, 5 implantation phase not found.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adaptnet import AdaptNetConfig, ConfigError, architecture_summary, build_adaptnet
from .analytics import AnalyticsParams, emit_report
from .clips import partition_videos, read_clip_specs, write_clip_specs
from .data import (
    DataError,
    load_image,
    load_mask,
    load_seg_samples,
    open_video,
    read_annotations,
    read_manifest,
    validate_manifest,
)
from .losses import seg_scores, write_seg_scores_csv
from .phase import PhaseConfigError, PhaseModelConfig, build_phase_model
from .pipeline import PhaseNotFound, analyze_video, segment_frames
from .training import (
    CheckpointError,
    TrainConfig,
    TrainConfigError,
    TrainingDiverged,
    load_checkpoint,
    seed_everything,
    train,
)

logger = logging.getLogger("lensid")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_MODEL, EXIT_NO_PHASE = 0, 2, 3, 4, 5

CONFIG_KEYS = {
    "make-clips": set(),
    "train-phase": {"train", "model", "image_size"},
    "train-seg": {"train", "model", "image_size"},
    "eval-seg": {"image_size", "batch_size", "split"},
    "analyze": {"analytics", "stride_s", "batch_size", "image_size"},
    "summary": {"model", "image_size"},
}


class CliConfigError(ValueError):
    pass


def _abs(p: str) -> str:
    return str(Path(p).expanduser().resolve())


def _section(cls, data: dict | None, name: str):
    """Build a config dataclass, rejecting unknown keys by name."""
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise CliConfigError(f"unknown {name} config key: {key}")
    return cls(**data)


def _analytics_params(data: dict | None) -> AnalyticsParams:
    from .analytics import PostprocessConfig, StabilityParams, UnfoldingParams

    data = dict(data or {})
    sections = {"unfolding": UnfoldingParams, "stability": StabilityParams,
                "postprocess": PostprocessConfig}
    for key in data:
        if key not in sections:
            raise CliConfigError(f"unknown analytics config key: {key}")
    return AnalyticsParams(**{k: _section(cls, data.get(k), f"analytics.{k}")
                              for k, cls in sections.items()})


def _train_config(task: str, data: dict | None, seed: int) -> TrainConfig:
    base = TrainConfig.reference_defaults(task).to_dict()
    data = dict(data or {})
    if "task" in data and data["task"] != task:
        raise CliConfigError(f"train.task must be {task!r} for this command")
    return TrainConfig.from_dict({**base, **data, "task": task, "seed": seed})


def _load_model(path, kind):
    try:
        return load_checkpoint(path, expect=kind)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint: {path}") from exc


def _video_path(root: Path, video_id: str) -> Path:
    for cand in (root / f"{video_id}.npy", root / video_id):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no frames for video {video_id!r} under {root}")


# --- commands -------------------------------------------------------------------


def cmd_make_clips(args, cfg, seed, out: Path) -> dict:
    anns = read_annotations(args["annotations"])
    specs = partition_videos(anns)
    if not specs:
        raise DataError("no annotated video yields clips")
    n = write_clip_specs(specs, out / "clips.jsonl")
    print(f"wrote {n} clip specs to {out / 'clips.jsonl'}")
    return {"n_clips": n, "n_videos": len({s.video_id for s in specs})}


def cmd_train_phase(args, cfg, seed, out: Path) -> dict:
    specs = read_clip_specs(args["clips"])
    if not specs:
        raise DataError(f"{args['clips']} holds no clip specs")
    fps = {a.video_id: a.fps for a in read_annotations(args["annotations"])}
    root = Path(args["videos"])
    videos = {}
    for vid in sorted({s.video_id for s in specs}):
        if vid not in fps:
            raise DataError(f"video {vid!r} has clips but no annotation")
        videos[vid] = open_video(_video_path(root, vid), fps[vid], cfg.get("image_size"))
    model_cfg = _section(PhaseModelConfig, cfg.get("model"), "model")
    train_cfg = _train_config("phase", cfg.get("train"), seed)
    seed_everything(seed)
    model = build_phase_model(model_cfg)
    best, history = train(train_cfg, specs, model, out_dir=out, videos=videos)
    return {"best_checkpoint": str(best), "final": dataclasses.asdict(history.records[-1])}


def cmd_train_seg(args, cfg, seed, out: Path) -> dict:
    manifest = read_manifest(args["manifest"])
    problems = validate_manifest(manifest, splits=("train",))
    if problems:
        raise DataError("invalid manifest: " + "; ".join(problems[:5]))
    size = int(cfg.get("image_size", 512))
    samples = load_seg_samples(manifest, "train", size)
    val = load_seg_samples(manifest, "val", size) if manifest.split("val") else None
    model_cfg = _section(AdaptNetConfig, cfg.get("model"), "model")
    train_cfg = _train_config("seg", cfg.get("train"), seed)
    seed_everything(seed)
    model = build_adaptnet(model_cfg)
    best, history = train(train_cfg, samples, model, out_dir=out, val_dataset=val)
    return {"best_checkpoint": str(best), "final": dataclasses.asdict(history.records[-1])}


def cmd_eval_seg(args, cfg, seed, out: Path) -> dict:
    split = cfg.get("split", "test")
    manifest = read_manifest(args["manifest"])
    problems = validate_manifest(manifest, splits=(split,))
    if problems:
        raise DataError("invalid manifest: " + "; ".join(problems[:5]))
    model = _load_model(args["checkpoint"], "adaptnet")
    size = int(cfg.get("image_size", 512))
    entries = manifest.split(split)
    images = [load_image(manifest.resolve(e.image), size) for e in entries]
    preds = segment_frames(model, images, int(cfg.get("batch_size", 8)))
    rows = [(e.image, seg_scores(p, load_mask(manifest.resolve(e.mask), size)))
            for e, p in zip(entries, preds)]
    summary = write_seg_scores_csv(rows, out / "scores.csv")
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"dice {summary['dice_mean']:.4f} +- {summary['dice_std']:.4f}, "
          f"iou {summary['iou_mean']:.4f} +- {summary['iou_std']:.4f} over {summary['n']} images")
    return summary


def cmd_analyze(args, cfg, seed, out: Path) -> dict:
    params = _analytics_params(cfg.get("analytics"))
    stride = float(cfg.get("stride_s", 0.5))
    batch = int(cfg.get("batch_size", 16))
    # every checkpoint must load before anything is written
    phase_model = _load_model(args["phase_ckpt"], "phase")
    lens_model = _load_model(args["lens_ckpt"], "adaptnet")
    pupil_model = _load_model(args["pupil_ckpt"], "adaptnet")
    video_path = Path(args["video"])
    if not video_path.exists():
        raise FileNotFoundError(f"video source not found: {video_path}")
    video = open_video(video_path, args["fps"], cfg.get("image_size"))
    result = analyze_video(video, phase_model, lens_model, pupil_model, params, stride, batch)
    extra = result.summary_extra(video.fps, stride)
    extra["video"] = str(video_path)
    emit_report(result.timeline, result.unfolding_delay, result.stabilization_time, out, params, extra)
    print(f"implantation {result.implantation[0]:.2f}-{result.implantation[1]:.2f} s; "
          f"unfolding delay {result.unfolding_delay} s; stabilization {result.stabilization_time} s")
    return {"unfolding_delay_s": result.unfolding_delay,
            "stabilization_time_s": result.stabilization_time, **extra}


def cmd_summary(args, cfg, seed, out: Path) -> dict:
    if args.get("checkpoint"):
        model = _load_model(args["checkpoint"], "adaptnet")
    else:
        model = build_adaptnet(_section(AdaptNetConfig, cfg.get("model"), "model"))
    size = int(cfg.get("image_size", 512))
    rows = architecture_summary(model, size)
    lines = [f"{'block':<10} {'output':<20} {'params':>12}"]
    lines += [f"{name:<10} {'x'.join(map(str, shape)):<20} {n:>12,}" for name, shape, n in rows]
    total = sum(n for _, _, n in rows)
    lines.append(f"{'total':<10} {'':<20} {total:>12,}")
    text = "\n".join(lines)
    print(text)
    (out / "architecture.txt").write_text(text + "\n")
    return {"total_params": total, "config": model.cfg.to_dict()}


COMMANDS = {
    "make-clips": cmd_make_clips,
    "train-phase": cmd_train_phase,
    "train-seg": cmd_train_seg,
    "eval-seg": cmd_eval_seg,
    "analyze": cmd_analyze,
    "summary": cmd_summary,
}


def run_command(command: str, args: dict, config: dict, seed: int, out: Path) -> dict:
    extra = set(config) - CONFIG_KEYS[command]
    if extra:
        raise CliConfigError(f"unknown config key for {command}: {sorted(extra)[0]}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = COMMANDS[command](args, config, seed, out)
    record = {
        "command": command,
        "args": args,
        "config": config,
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "result": result,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return result


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--out", type=_abs, default=argparse.SUPPRESS,
                        help="output directory (default ./lensid-out)")
    common.add_argument("--config", type=_abs, default=argparse.SUPPRESS, help="JSON config file")

    parser = argparse.ArgumentParser(
        prog="lensid", parents=[common],
        description="Lens implantation phase detection, lens/pupil segmentation and lens analytics.",
    )
    parser.add_argument("--version", action="version", version=f"lensid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("make-clips", parents=[common], help="partition annotated videos into clips")
    p.add_argument("--annotations", type=_abs, required=True, help="annotation CSV")

    p = sub.add_parser("train-phase", parents=[common], help="train the phase classifier")
    p.add_argument("--clips", type=_abs, required=True, help="clips.jsonl from make-clips")
    p.add_argument("--annotations", type=_abs, required=True, help="annotation CSV (gives fps)")
    p.add_argument("--videos", type=_abs, required=True,
                   help="directory holding <video_id>.npy or <video_id>/ frame folders")

    p = sub.add_parser("train-seg", parents=[common], help="train a lens or pupil segmenter")
    p.add_argument("--manifest", type=_abs, required=True, help="segmentation manifest (JSONL)")

    p = sub.add_parser("eval-seg", parents=[common], help="score a segmenter on a manifest split")
    p.add_argument("--manifest", type=_abs, required=True)
    p.add_argument("--checkpoint", type=_abs, required=True)

    p = sub.add_parser("analyze", parents=[common], help="lens statistics for one surgery video")
    p.add_argument("--video", type=_abs, required=True, help="frame directory or .npy array")
    p.add_argument("--fps", type=float, required=True)
    p.add_argument("--phase-ckpt", type=_abs, required=True)
    p.add_argument("--lens-ckpt", type=_abs, required=True)
    p.add_argument("--pupil-ckpt", type=_abs, required=True)

    p = sub.add_parser("summary", parents=[common], help="print AdaptNet block shapes and sizes")
    p.add_argument("--checkpoint", type=_abs, default=None)

    p = sub.add_parser("replay", parents=[common], help="re-run a recorded run.json")
    p.add_argument("run_json", type=_abs)
    return parser


def _error(code: int, msg: str) -> int:
    print(f"lensid: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if ns.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = ns.pop("command")
    seed = ns.pop("seed", None)
    out = ns.pop("out", None)
    config_path = ns.pop("config", None)
    try:
        if command == "replay":
            record = json.loads(Path(ns["run_json"]).read_text())
            command, args, config = record["command"], record["args"], record["config"]
            seed = record["seed"] if seed is None else seed
        else:
            args = ns
            config = {}
            if config_path is not None:
                config = json.loads(Path(config_path).read_text())
                if not isinstance(config, dict):
                    raise CliConfigError("config file must hold a JSON object")
        run_command(command, args, config, 0 if seed is None else seed,
                    Path(out or "lensid-out"))
    except PhaseNotFound as exc:
        return _error(EXIT_NO_PHASE, str(exc))
    except (CheckpointError, TrainingDiverged) as exc:
        return _error(EXIT_MODEL, str(exc))
    except json.JSONDecodeError as exc:
        return _error(EXIT_VALIDATION, f"invalid JSON: {exc}")
    except (CliConfigError, ConfigError, TrainConfigError, PhaseConfigError, DataError,
            ValueError, TypeError) as exc:
        return _error(EXIT_VALIDATION, str(exc))
    except OSError as exc:
        return _error(EXIT_IO, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
