"""Command-line interface for uvdnerf."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from enum import IntEnum
from pathlib import Path
from typing import TextIO

import numpy as np

from . import __version__
from .config import RunConfig
from .coords import CoordMode
from .errors import CheckpointError, ConfigError, DatasetError, MeshError, NumericalError
from .field import radiance_field
from .mesh import ProxySequence
from .metrics import expand_box, mask_bounding_box, psnr, ssim
from .render import composite_rays, write_image, write_weight_map
from .synth import SceneSpec, export_dataset, generate_scene, import_dataset
from .training import (
    RUN_CONFIG_ECHO,
    Model,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

DEBUG_SAMPLES = 64
# Composite mode marches s over this range, outside to inside.
DEBUG_S_RANGE = (0.99, 0.01)


class ExitCode(IntEnum):
    OK = 0
    USAGE = 2
    DATA = 3
    NUMERICAL = 4


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="Run configuration document.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one configuration key (repeatable).",
    )
    parser.add_argument("--seed", type=int, help="Random seed.")
    parser.add_argument("--threads", type=int, help="Worker threads; 1 is fully deterministic.")


def _add_frame_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cam", type=int, required=True, help="Camera id from cameras.json.")
    parser.add_argument(
        "--frames",
        default="all",
        metavar="RANGE",
        help="Frame index, half-open range 'A:B', or 'all' (default).",
    )


def parse_args(args: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        prog="uvdnerf",
        description="Train and render dynamic radiance fields in UV-D intrinsic coordinates.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log per-iteration detail.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only log warnings and errors.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Generate a synthetic dataset.")
    gen.add_argument("out_dir", metavar="OUT_DIR")
    gen.add_argument("--spec", metavar="FILE", help="Scene document.")
    gen.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    gen.add_argument("--seed", type=int, default=0)

    tr = commands.add_parser("train", help="Train a model on a dataset.")
    tr.add_argument("dataset", metavar="DATASET")
    tr.add_argument("checkpoint", metavar="OUT_CHECKPOINT")
    _add_run_options(tr)
    tr.add_argument("--iters", type=int, help="Iteration budget.")

    render = commands.add_parser("render", help="Render frames from a checkpoint.")
    render.add_argument("checkpoint", metavar="CHECKPOINT")
    render.add_argument("dataset", metavar="DATASET")
    render.add_argument("out_dir", metavar="OUT_DIR")
    _add_frame_options(render)
    render.add_argument("--threads", type=int)

    ev = commands.add_parser("eval", help="Score a checkpoint on a dataset split.")
    ev.add_argument("checkpoint", metavar="CHECKPOINT")
    ev.add_argument("dataset", metavar="DATASET")
    ev.add_argument("out_csv", metavar="OUT_CSV")
    ev.add_argument("--split", choices=("eval", "train"), default="eval")
    ev.add_argument("--threads", type=int)

    edit = commands.add_parser("edit-shape", help="Render with replacement proxies.")
    edit.add_argument("checkpoint", metavar="CHECKPOINT")
    edit.add_argument("dataset", metavar="DATASET")
    edit.add_argument("proxies", metavar="PROXY_DIR")
    edit.add_argument("out_dir", metavar="OUT_DIR")
    _add_frame_options(edit)
    edit.add_argument("--threads", type=int)

    debug = commands.add_parser("debug-encode", help="Image the learned field over the UV-D grid.")
    debug.add_argument("checkpoint", metavar="CHECKPOINT")
    debug.add_argument("out_png", metavar="OUT_PNG")
    debug.add_argument("--mode", choices=("slice", "composite"), default="slice")
    debug.add_argument("--s", type=float, default=0.5, help="Slice height in squashed distance.")
    debug.add_argument("--resolution", type=int, default=256)

    return parser.parse_args(args)


def parse_frames(text: str, count: int) -> list[int]:
    """Resolve a frame selection against ``count`` frames."""
    if text == "all":
        return list(range(count))
    try:
        if ":" in text:
            start_text, end_text = text.split(":", 1)
            start = int(start_text) if start_text else 0
            end = int(end_text) if end_text else count
        else:
            start = int(text)
            end = start + 1
    except ValueError:
        raise ConfigError(f"Invalid frame selection {text!r}") from None
    if not 0 <= start < end <= count:
        raise ConfigError(f"Frames {text} out of range for {count} frames")
    return list(range(start, end))


def resolve_run_config(parsed: argparse.Namespace) -> RunConfig:
    run = RunConfig.from_file(parsed.config, on_note="warn") if parsed.config else RunConfig()
    overrides = list(parsed.overrides)
    if parsed.seed is not None:
        overrides.append(f"seed={parsed.seed}")
    if parsed.threads is not None:
        overrides.append(f"threads={parsed.threads}")
    if getattr(parsed, "iters", None) is not None:
        overrides.append(f"iterations={parsed.iters}")
    return run.with_overrides(overrides)


def _echo(run: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RUN_CONFIG_ECHO).write_text(run.to_text(), encoding="utf-8")


def _show_progress(parsed: argparse.Namespace) -> bool:
    return not parsed.quiet and sys.stderr.isatty()


def _load_model(parsed: argparse.Namespace, proxies: ProxySequence | None = None) -> Model:
    model = load_checkpoint(parsed.checkpoint, proxies).model
    if getattr(parsed, "threads", None) is not None:
        model.run = model.run.with_overrides([f"threads={parsed.threads}"])
        model.mapper.threads = parsed.threads
    return model


def cmd_gen(parsed: argparse.Namespace) -> None:
    spec = SceneSpec.from_file(parsed.spec, on_note="warn") if parsed.spec else SceneSpec()
    spec = spec.with_overrides(parsed.overrides)
    scene = generate_scene(spec, parsed.seed)
    export_dataset(scene, parsed.out_dir, progress=_show_progress(parsed))


def cmd_train(parsed: argparse.Namespace) -> None:
    run = resolve_run_config(parsed)
    dataset = import_dataset(parsed.dataset)
    out_dir = Path(parsed.checkpoint).resolve().parent
    renders = out_dir / "renders"
    result = train(dataset, run, out_dir, progress=_show_progress(parsed), render_dir=renders)
    save_checkpoint(parsed.checkpoint, result.checkpoint)
    for cam_id in dataset.eval_cams:
        image, weight = result.checkpoint.model.render(dataset.camera(cam_id), 0)
        write_image(renders / f"cam{cam_id:02d}_frame0000.png", image)
        write_weight_map(renders / f"cam{cam_id:02d}_frame0000_weight.png", weight)


def _render_frames(model: Model, parsed: argparse.Namespace, err_stream: TextIO) -> None:
    dataset = import_dataset(parsed.dataset)
    if parsed.cam not in dataset.cameras:
        raise ConfigError(f"Unknown camera id {parsed.cam}")
    cam = dataset.camera(parsed.cam)
    frames = parse_frames(parsed.frames, len(model.mapper.sequence))
    out_dir = Path(parsed.out_dir)
    _echo(model.run, out_dir)
    for frame in frames:
        image, weight = model.render(cam, frame)
        stem = f"cam{parsed.cam:02d}_frame{frame:04d}"
        write_image(out_dir / f"{stem}.png", image)
        write_weight_map(out_dir / f"{stem}_weight.png", weight)
        if parsed.command == "render" and parsed.cam in dataset.train_cams:
            score = psnr(image, dataset.load_image(parsed.cam, frame))
            err_stream.write(f"cam {parsed.cam} frame {frame}: PSNR {score:.2f} dB vs training image\n")


def cmd_render(parsed: argparse.Namespace, err_stream: TextIO) -> None:
    _render_frames(_load_model(parsed), parsed, err_stream)


def cmd_edit_shape(parsed: argparse.Namespace, err_stream: TextIO) -> None:
    model = _load_model(parsed)
    replacement = ProxySequence.load_dir(parsed.proxies)
    _render_frames(model.with_proxies(replacement), parsed, err_stream)


def cmd_eval(parsed: argparse.Namespace, out_stream: TextIO) -> None:
    dataset = import_dataset(parsed.dataset)
    model = _load_model(parsed, dataset.proxies)
    cams = dataset.eval_cams if parsed.split == "eval" else dataset.train_cams
    if not cams:
        raise DatasetError(f"The '{parsed.split}' split is empty", str(dataset.root))
    out_csv = Path(parsed.out_csv)
    _echo(model.run, out_csv.parent)
    rows = []
    boxes = []
    for cam_id in cams:
        for frame in range(dataset.frame_count):
            image, _ = model.render(dataset.camera(cam_id), frame)
            truth = dataset.load_image(cam_id, frame)
            tight = mask_bounding_box(dataset.load_mask(cam_id, frame))
            box = expand_box(tight or (0, truth.shape[0], 0, truth.shape[1]), truth.shape)
            rows.append({"frame": frame, "cam": cam_id, "psnr": psnr(image, truth, box), "ssim": ssim(image, truth, box)})
            boxes.append({"frame": frame, "cam": cam_id, "y0": box[0], "y1": box[1], "x0": box[2], "x1": box[3]})
    with out_csv.open("w", newline="", encoding="utf-8") as fp:
        writer = csv.DictWriter(fp, fieldnames=("frame", "cam", "psnr", "ssim"))
        writer.writeheader()
        writer.writerows(rows)
    with (out_csv.parent / "eval_boxes.csv").open("w", newline="", encoding="utf-8") as fp:
        writer = csv.DictWriter(fp, fieldnames=("frame", "cam", "y0", "y1", "x0", "x1"))
        writer.writeheader()
        writer.writerows(boxes)
    for frame in range(dataset.frame_count):
        scores = [r for r in rows if r["frame"] == frame]
        out_stream.write(
            f"frame {frame}: PSNR {np.mean([r['psnr'] for r in scores]):.2f} dB,"
            f" SSIM {np.mean([r['ssim'] for r in scores]):.4f}\n"
        )
    out_stream.write(
        f"mean: PSNR {np.mean([r['psnr'] for r in rows]):.2f} dB, SSIM {np.mean([r['ssim'] for r in rows]):.4f}\n"
    )


def debug_grid(model: Model, resolution: int, mode: str = "slice", s: float = 0.5) -> np.ndarray:
    """Color of the radiance field over the (u, v) square.

    ``slice`` evaluates one plane of constant ``s``; ``composite`` marches
    from outside to inside along ``s`` and alpha-composites.
    """
    if model.mapper.mode is not CoordMode.UVD:
        raise ConfigError("debug-encode needs a UV-D checkpoint", key="coord_mode")
    if not 0.0 <= s <= 1.0:
        clamped = min(max(s, 0.0), 1.0)
        warnings.warn(f"Slice s={s} outside [0, 1], clamped to {clamped}", UserWarning, stacklevel=2)
        s = clamped
    ticks = (np.arange(resolution) + 0.5) / resolution
    v, u = np.meshgrid(ticks, ticks, indexing="ij")
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    if mode == "slice":
        coords = np.concatenate([uv, np.full((len(uv), 1), s)], axis=1)
        return radiance_field(coords, model.field).color.reshape(resolution, resolution, 3)

    levels = np.linspace(*DEBUG_S_RANGE, DEBUG_SAMPLES)
    # Sample spacing in scene units, from the inverse of the squash.
    depth = -np.log(1.0 / levels - 1.0) / model.mapper.squash.k
    spacing = np.abs(np.diff(depth, append=2.0 * depth[-1] - depth[-2]))
    coords = np.concatenate(
        [np.repeat(uv, DEBUG_SAMPLES, axis=0), np.tile(levels, len(uv))[:, None]], axis=1
    )
    out = radiance_field(coords, model.field)
    comp = composite_rays(
        out.sigma.reshape(len(uv), DEBUG_SAMPLES).astype(np.float64),
        out.color.reshape(len(uv), DEBUG_SAMPLES, 3).astype(np.float64),
        np.broadcast_to(spacing, (len(uv), DEBUG_SAMPLES)),
    )
    return comp.color.reshape(resolution, resolution, 3)


def cmd_debug_encode(parsed: argparse.Namespace) -> None:
    model = _load_model(parsed)
    image = debug_grid(model, parsed.resolution, parsed.mode, parsed.s)
    out = Path(parsed.out_png)
    _echo(model.run, out.parent)
    write_image(out, image)


def run_command(
    parsed: argparse.Namespace,
    out_stream: TextIO = sys.stdout,
    err_stream: TextIO = sys.stderr,
) -> ExitCode:
    """Dispatch a parsed command and map failures to exit codes."""
    try:
        if parsed.command == "gen":
            cmd_gen(parsed)
        elif parsed.command == "train":
            cmd_train(parsed)
        elif parsed.command == "render":
            cmd_render(parsed, err_stream)
        elif parsed.command == "eval":
            cmd_eval(parsed, out_stream)
        elif parsed.command == "edit-shape":
            cmd_edit_shape(parsed, err_stream)
        elif parsed.command == "debug-encode":
            cmd_debug_encode(parsed)
    except ConfigError as e:
        err_stream.write(f"Error: {e}\n")
        return ExitCode.USAGE
    except (MeshError, DatasetError, CheckpointError) as e:
        err_stream.write(f"Error: {e}\n")
        return ExitCode.DATA
    except FileNotFoundError as e:
        err_stream.write(f"Error: File not found: {e.filename}\n")
        return ExitCode.DATA
    except OSError as e:
        err_stream.write(f"Error: {e}\n")
        return ExitCode.DATA
    except NumericalError as e:
        err_stream.write(f"Error: {e}\n")
        return ExitCode.NUMERICAL
    return ExitCode.OK


def main(args: list[str] | None = None) -> int:
    """CLI entry point.

    Returns:
        Exit code: 0 success, 2 usage or configuration error, 3 data error,
        4 numerical failure
    """
    parsed = parse_args(args)
    level = logging.DEBUG if parsed.verbose else logging.WARNING if parsed.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return int(run_command(parsed))


if __name__ == "__main__":
    sys.exit(main())
