"""Losses, the training loop and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np
from scipy.ndimage import binary_dilation
from tqdm import tqdm

from .config import RunConfig
from .coords import CoordMode, DistanceSquash, IntrinsicMapper, TemplateNormalizer
from .errors import CheckpointError, ConfigError, DatasetError, NumericalError
from .field import AdamState, FieldConfig, FrameLatents, Mlp, NeuralField, adam_step, field_query, learning_rate
from .encoding import HashTables
from .mesh import ProxySequence, TriangleMesh, validate_sequence
from .metrics import mask_bounding_box, psnr
from .render import (
    Camera,
    FieldQuery,
    RayBatch,
    composite_backward,
    composite_rays,
    generate_rays,
    ray_box_intervals,
    render_image,
    sample_points,
    shell_box,
    write_image,
)
from .synth import Dataset

logger = logging.getLogger(__name__)

# beta = BETA_SCALE / template diagonal when not configured.
BETA_SCALE = 20.0
# Upper bound on relu(d) * beta before exponentiation. Inside the culling
# shell the default beta keeps the exponent near 20 * shell_factor, so only
# a hand-set beta reaches it.
EXPONENT_CLAMP = 80.0

LOSS_LOG = "loss_log.csv"
EVAL_LOG = "eval_log.csv"
RUN_CONFIG_ECHO = "run_config.txt"
DIAGNOSTIC_DUMP = "diagnostic.npz"
LOSS_COLUMNS = ("iter", "l_rgb", "l_mask", "l_dist", "l_dfm", "lr")
EVAL_COLUMNS = ("iter", "frame", "cam", "psnr")


@dataclass(frozen=True)
class LossWeights:
    """Regularizer weights and the two-phase schedule.

    Attributes:
        lambda_mask, lambda_dist, lambda_dfm: Per-regularizer weights
        beta: Distance-loss sharpness in 1/scene-units
        lambda_coarse: Phase weight before ``phase_switch_iter``
        lambda_fine: Phase weight from ``phase_switch_iter`` on
        phase_switch_iter: First iteration of the fine phase
    """

    lambda_mask: float = 0.1
    lambda_dist: float = 0.01
    lambda_dfm: float = 0.01
    beta: float = 1.0
    lambda_coarse: float = 1.0
    lambda_fine: float = 0.1
    phase_switch_iter: int = 400

    def __post_init__(self) -> None:
        for name in ("lambda_mask", "lambda_dist", "lambda_dfm", "beta", "lambda_coarse", "lambda_fine", "phase_switch_iter"):
            if getattr(self, name) < 0:
                raise ValueError(f"Loss weight '{name}' must be non-negative")

    @classmethod
    def from_run_config(cls, run: RunConfig, template_diagonal: float) -> LossWeights:
        return cls(
            lambda_mask=run.lambda_mask,
            lambda_dist=run.lambda_dist,
            lambda_dfm=run.lambda_dfm,
            beta=run.beta or BETA_SCALE / template_diagonal,
            lambda_coarse=run.lambda_coarse,
            lambda_fine=run.lambda_fine,
            phase_switch_iter=run.phase_switch_iter,
        )

    def phase(self, iteration: int) -> float:
        """Regularizer multiplier at ``iteration``."""
        return self.lambda_coarse if iteration < self.phase_switch_iter else self.lambda_fine


@dataclass(frozen=True)
class RayBatchTarget:
    """Supervision for one ray batch.

    Attributes:
        colors: (R, 3) ground-truth colors in [0, 1]
        mask: (R,) mask bits as 0.0 / 1.0
        frame: Frame index of the batch
    """

    colors: np.ndarray
    mask: np.ndarray
    frame: int


def photometric_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rays of the Euclidean norm of the color residual."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != np.shape(target) or not len(pred):
        raise ValueError(f"Need matching non-empty color arrays, got {pred.shape} and {np.shape(target)}")
    return float(np.mean(np.linalg.norm(pred - target, axis=-1)))


def photometric_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    residual = np.asarray(pred, dtype=np.float64) - target
    norm = np.linalg.norm(residual, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    return np.where(norm > 0.0, residual / safe, 0.0) / len(residual)


def mask_loss(weight: np.ndarray, mask: np.ndarray) -> float:
    """Mean of ``W (1 - M) + (1 - W) M``."""
    weight = np.asarray(weight, dtype=np.float64)
    return float(np.mean(weight * (1.0 - mask) + (1.0 - weight) * mask))


def mask_loss_grad(weight: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (1.0 - 2.0 * np.asarray(mask, dtype=np.float64)) / len(weight)


def _distance_factor(signed_distance: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(np.minimum(np.maximum(signed_distance, 0.0) * beta, EXPONENT_CLAMP))


def distance_loss(sigma: np.ndarray, signed_distance: np.ndarray, beta: float, count: int | None = None) -> float:
    """Mean of ``sigma * exp(relu(d) * beta)``.

    ``count`` overrides the denominator, so that culled samples count as zeros.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    total = float(np.sum(sigma * _distance_factor(signed_distance, beta)))
    denominator = count if count is not None else sigma.size
    return total / denominator if denominator else 0.0


def distance_loss_grad(signed_distance: np.ndarray, beta: float, count: int | None = None) -> np.ndarray:
    denominator = count if count is not None else np.size(signed_distance)
    return _distance_factor(signed_distance, beta) / max(denominator, 1)


def offset_reg_loss(offsets: np.ndarray, count: int | None = None) -> float:
    """Mean Euclidean norm of the coordinate offsets."""
    offsets = np.asarray(offsets, dtype=np.float64)
    norms = np.linalg.norm(offsets.reshape(-1, offsets.shape[-1]), axis=1)
    denominator = count if count is not None else len(norms)
    return float(norms.sum() / denominator) if denominator else 0.0


def offset_reg_loss_grad(offsets: np.ndarray, count: int | None = None) -> np.ndarray:
    """Gradient of :func:`offset_reg_loss`; zero where the offset is zero."""
    offsets = np.asarray(offsets, dtype=np.float64)
    norm = np.linalg.norm(offsets, axis=-1, keepdims=True)
    denominator = count if count is not None else len(offsets)
    safe = np.where(norm > 0.0, norm, 1.0)
    return np.where(norm > 0.0, offsets / safe, 0.0) / max(denominator, 1)


@dataclass(frozen=True)
class LossComponents:
    rgb: float
    mask: float = 0.0
    dist: float = 0.0
    dfm: float = 0.0


@dataclass(frozen=True)
class LossReport:
    """Total loss with its parts and the phase multiplier that produced it."""

    total: float
    components: LossComponents
    phase: float


def total_loss(components: LossComponents, weights: LossWeights, iteration: int) -> LossReport:
    """``L_rgb + phase * (l_mask L_mask + l_dist L_dist + l_dfm L_dfm)``."""
    phase = weights.phase(iteration)
    regularizer = (
        weights.lambda_mask * components.mask
        + weights.lambda_dist * components.dist
        + weights.lambda_dfm * components.dfm
    )
    return LossReport(components.rgb + phase * regularizer, components, phase)


@dataclass
class Model:
    """A field together with the coordinate system it is defined in."""

    run: RunConfig
    field: NeuralField
    mapper: IntrinsicMapper
    weights: LossWeights

    @classmethod
    def initialize(cls, run: RunConfig, proxies: ProxySequence) -> Model:
        """Fresh model for ``proxies``; initialization draws from ``run.seed``."""
        template = proxies.template
        squash = DistanceSquash(run.squash_k) if run.squash_k else DistanceSquash.for_mesh(template)
        mode = CoordMode(run.coord_mode)
        normalizer = TemplateNormalizer.for_mesh(template, run.normalizer_pad) if mode is CoordMode.XYZD else None
        try:
            mapper = IntrinsicMapper(proxies, squash, normalizer, mode, run.leaf_size, run.threads)
        except ValueError as e:
            raise ConfigError(str(e), key="coord_mode") from e
        cfg = FieldConfig.from_run_config(run, mode.dim, len(proxies))
        init_rng, _ = _rngs(run.seed)
        nf = NeuralField.initialize(cfg, init_rng, np.dtype(run.dtype))
        return cls(run, nf, mapper, LossWeights.from_run_config(run, template.diagonal()))

    def query(self) -> FieldQuery:
        return field_query(self.field, self.mapper)

    def with_proxies(self, proxies: ProxySequence) -> Model:
        """Same field rendered against replacement proxies."""
        validate_sequence(list(self.mapper.sequence.frames[:1]) + list(proxies.frames))
        if len(proxies) != len(self.mapper.sequence):
            raise DatasetError(
                f"Replacement has {len(proxies)} frames, the model was trained on {len(self.mapper.sequence)}"
            )
        return Model(self.run, self.field, self.mapper.with_sequence(proxies), self.weights)

    def box(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        return shell_box(self.mapper.sequence[frame], self.run.shell_factor)

    def render(self, cam: Camera, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic image and weight map."""
        return render_image(cam, frame, self.query(), self.box(frame), self.run.n_samples)


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(sample_seq)


@dataclass
class BatchResult:
    """Forward (and optionally backward) pass over one ray batch."""

    report: LossReport
    color: np.ndarray
    weight: np.ndarray
    hit: np.ndarray
    diagnostic: dict[str, Any] = field(default_factory=dict, repr=False)


def batch_loss(
    model: Model,
    rays: RayBatch,
    target: RayBatchTarget,
    iteration: int,
    rng: np.random.Generator | None = None,
    backward: bool = True,
) -> BatchResult:
    """Render ``rays``, score them against ``target`` and accumulate gradients.

    Culled rays render black with zero weight. The distance and offset
    regularizers average over every ray's samples, culled samples counting
    as zero.
    """
    run = model.run
    frame = target.frame
    n = run.n_samples
    lo, hi = model.box(frame)
    t_near, t_far, hit = ray_box_intervals(rays.origins, rays.directions, lo, hi, rays.near, rays.far)
    count = len(rays) * n
    color = np.zeros((len(rays), 3))
    weight = np.zeros(len(rays))
    dist = dfm = 0.0
    out = None
    if hit.any():
        samples = sample_points(rays.origins[hit], rays.directions[hit], t_near[hit], t_far[hit], n, rng)
        query = model.mapper.query(samples.positions.reshape(-1, 3), frame)
        out = model.field.forward(query.coords, frame)
        shape = samples.depths.shape
        sigma = out.sigma.astype(np.float64).reshape(shape)
        sample_color = out.color.astype(np.float64).reshape(*shape, 3)
        comp = composite_rays(sigma, sample_color, samples.spacings)
        color[hit] = comp.color
        weight[hit] = comp.weight
        dist = distance_loss(out.sigma, query.signed_distance, model.weights.beta, count)
        if model.field.cfg.use_offset:
            dfm = offset_reg_loss(out.offset, count)
    components = LossComponents(
        rgb=photometric_loss(color, target.colors),
        mask=mask_loss(weight, target.mask),
        dist=dist,
        dfm=dfm,
    )
    report = total_loss(components, model.weights, iteration)
    result = BatchResult(report, color, weight, hit)
    if not np.isfinite(report.total):
        result.diagnostic = {
            "iteration": iteration,
            "frame": frame,
            "pixels": rays.pixels,
            "color": color,
            "weight": weight,
            "target_colors": target.colors,
            "target_mask": target.mask,
            "losses": np.array([components.rgb, components.mask, components.dist, components.dfm]),
        }
        if out is not None:
            result.diagnostic["sigma"] = out.sigma
        return result
    if not backward or out is None:
        return result

    phase = report.phase
    grad_color = photometric_loss_grad(color, target.colors)[hit]
    grad_weight = phase * model.weights.lambda_mask * mask_loss_grad(weight, target.mask)[hit]
    grad_sigma, grad_sample_color = composite_backward(comp, sample_color, samples.spacings, grad_color, grad_weight)
    grad_sigma = grad_sigma.ravel() + phase * model.weights.lambda_dist * distance_loss_grad(
        query.signed_distance, model.weights.beta, count
    )
    grad_offset = None
    if model.field.cfg.use_offset:
        grad_offset = phase * model.weights.lambda_dfm * offset_reg_loss_grad(out.offset, count)
    model.field.backward(out, grad_sigma, grad_sample_color.reshape(-1, 3), grad_offset)
    return result


class PixelSampler:
    """Draws training pixels of one (camera, frame) image.

    Rays come from the dilated mask region, plus a fraction from outside it
    so the mask loss sees empty space.
    """

    def __init__(self, image: np.ndarray, mask: np.ndarray, dilation: int, exterior_fraction: float) -> None:
        self.image = image
        self.mask = mask.astype(np.float64)
        wide = binary_dilation(mask, iterations=dilation) if dilation > 0 else mask.astype(bool)
        ys, xs = np.nonzero(wide)
        self.interior = np.stack([xs, ys], axis=1)
        ys, xs = np.nonzero(~wide)
        self.exterior = np.stack([xs, ys], axis=1)
        self.exterior_fraction = exterior_fraction

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        n_exterior = int(round(self.exterior_fraction * count)) if len(self.exterior) else 0
        if not len(self.interior):
            n_exterior = count
        parts = []
        if count - n_exterior:
            parts.append(self.interior[rng.integers(len(self.interior), size=count - n_exterior)])
        if n_exterior:
            parts.append(self.exterior[rng.integers(len(self.exterior), size=n_exterior)])
        return np.concatenate(parts)

    def target(self, pixels: np.ndarray, frame: int) -> RayBatchTarget:
        xs, ys = pixels[:, 0], pixels[:, 1]
        return RayBatchTarget(self.image[ys, xs], self.mask[ys, xs], frame)


@dataclass
class Checkpoint:
    """Everything needed to resume training or render."""

    model: Model
    adam: AdamState
    iteration: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[dict[str, float]]
    eval_log: list[dict[str, float]]


def _preflight(dataset: Dataset, run: RunConfig) -> None:
    if not dataset.train_cams:
        raise DatasetError("Dataset declares no training cameras", str(dataset.root))
    for cam_id in dataset.train_cams + dataset.eval_cams:
        cam = dataset.camera(cam_id)
        image = dataset.load_image(cam_id, 0)
        if image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"Image is {image.shape[1]}x{image.shape[0]}, camera {cam_id} expects {cam.width}x{cam.height}",
                str(dataset.image_path(cam_id, 0)),
            )
    if run.coord_mode == "uvd" and dataset.proxies.uv_per_corner is None:
        raise ConfigError("UV-D coordinates need proxies with a UV atlas", key="coord_mode")


def _write_rows(path: Path, columns: tuple[str, ...], rows: list[dict[str, float]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fp:
        writer = csv.DictWriter(fp, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def evaluate_held_out(
    model: Model, dataset: Dataset, frame: int, render_dir: Path | None = None, iteration: int = 0
) -> list[tuple[int, float]]:
    """PSNR of every held-out camera at ``frame``, inside the mask's bounding box.

    With ``render_dir`` each render is also written as
    ``iter{iteration:06d}_cam{cam:02d}_frame{frame:04d}.png``.
    """
    scores = []
    for cam_id in dataset.eval_cams:
        image, _ = model.render(dataset.camera(cam_id), frame)
        if render_dir is not None:
            write_image(render_dir / f"iter{iteration:06d}_cam{cam_id:02d}_frame{frame:04d}.png", image)
        truth = dataset.load_image(cam_id, frame)
        box = mask_bounding_box(dataset.load_mask(cam_id, frame))
        scores.append((cam_id, psnr(image, truth, box)))
    return scores


def train(
    dataset: Dataset,
    run: RunConfig,
    out_dir: str | Path | None = None,
    progress: bool = False,
    resume: Checkpoint | None = None,
    render_dir: str | Path | None = None,
) -> TrainResult:
    """Optimize a model on ``dataset``.

    Writes ``loss_log.csv``, ``eval_log.csv`` and ``run_config.txt`` into
    ``out_dir`` when given.
    Held-out renders of every evaluation go to ``render_dir`` when given.

    Raises:
        DatasetError, ConfigError: Before the first iteration when inputs disagree
        NumericalError: The loss became non-finite; ``diagnostic.npz`` is dumped
    """
    _preflight(dataset, run)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / RUN_CONFIG_ECHO).write_text(run.to_text(), encoding="utf-8")
    renders = Path(render_dir) if render_dir is not None else None
    if renders is not None:
        renders.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        checkpoint = resume
    else:
        model = Model.initialize(run, dataset.proxies)
        checkpoint = Checkpoint(model, AdamState(run.adam_beta1, run.adam_beta2, run.adam_eps))
    model = checkpoint.model
    _, rng = _rngs(run.seed + checkpoint.iteration)

    samplers: dict[tuple[int, int], PixelSampler] = {}
    loss_log: list[dict[str, float]] = []
    eval_log: list[dict[str, float]] = []
    final = max(run.iterations - 1, 0)
    start = checkpoint.iteration
    logger.info("Training %d iterations from %d on %d frames", run.iterations - start, start, dataset.frame_count)
    bar = tqdm(range(start, run.iterations), desc="train", disable=not progress)
    for iteration in bar:
        cam_id = int(dataset.train_cams[rng.integers(len(dataset.train_cams))])
        frame = int(rng.integers(dataset.frame_count))
        key = (cam_id, frame)
        if key not in samplers:
            samplers[key] = PixelSampler(
                dataset.load_image(cam_id, frame),
                dataset.load_mask(cam_id, frame),
                run.mask_dilation,
                run.exterior_fraction,
            )
        sampler = samplers[key]
        pixels = sampler.sample(run.batch_rays, rng)
        rays = generate_rays(dataset.camera(cam_id), pixels)
        result = batch_loss(model, rays, sampler.target(pixels, frame), iteration, rng)
        if not np.isfinite(result.report.total):
            diagnostic = dict(result.diagnostic, cam=cam_id)
            if out is not None:
                np.savez(out / DIAGNOSTIC_DUMP, **{k: np.asarray(v) for k, v in diagnostic.items()})
                _write_rows(out / LOSS_LOG, LOSS_COLUMNS, loss_log)
            raise NumericalError(f"Non-finite loss at iteration {iteration}", diagnostic)

        lr = learning_rate(iteration, final, run.lr_start, run.lr_end)
        adam_step(model.field.parameters(), model.field.gradients(), checkpoint.adam, lr)
        checkpoint.iteration = iteration + 1
        parts = result.report.components
        loss_log.append(
            {"iter": iteration, "l_rgb": parts.rgb, "l_mask": parts.mask, "l_dist": parts.dist, "l_dfm": parts.dfm, "lr": lr}
        )
        bar.set_postfix(loss=f"{result.report.total:.4f}")
        logger.debug("iter %d loss %.6f lr %.3g", iteration, result.report.total, lr)

        if (iteration + 1) % run.eval_every == 0 or iteration == final:
            eval_frame = (iteration // run.eval_every) % dataset.frame_count
            for cam, score in evaluate_held_out(model, dataset, eval_frame, renders, iteration):
                eval_log.append({"iter": iteration, "frame": eval_frame, "cam": cam, "psnr": score})
                logger.info("iter %d frame %d cam %d: PSNR %.2f dB", iteration, eval_frame, cam, score)

    if out is not None:
        _write_rows(out / LOSS_LOG, LOSS_COLUMNS, loss_log)
        _write_rows(out / EVAL_LOG, EVAL_COLUMNS, eval_log)
    return TrainResult(checkpoint, loss_log, eval_log)


MAGIC = b"INGP-IC\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {dtype: code for code, dtype in _DTYPES.items()}


def _write_section(fp: IO[bytes], name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype=np.asarray(array).dtype.newbyteorder("<"))
    if data.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"Unsupported tensor dtype {data.dtype} for '{name}'")
    encoded = name.encode("utf-8")
    fp.write(struct.pack("<H", len(encoded)))
    fp.write(encoded)
    fp.write(struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim))
    fp.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    payload = data.tobytes()
    fp.write(struct.pack("<Q", len(payload)))
    fp.write(payload)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def section(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"Unknown dtype code {code} in section '{name}'")
        shape = self.unpack(f"<{ndim}Q")
        (size,) = self.unpack("<Q")
        dtype = _DTYPES[code]
        if size != int(np.prod(shape)) * dtype.itemsize:
            raise CheckpointError(f"Section '{name}' payload size does not match its shape")
        array = np.frombuffer(self.take(size), dtype=dtype).reshape(shape)
        return name, array.astype(dtype.newbyteorder("="))


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """Write a checkpoint: magic, version, tensors, metadata and a CRC32 trailer."""
    model = checkpoint.model
    mapper = model.mapper
    sections: list[tuple[str, np.ndarray]] = list(
        (name, value) for name, value, _ in model.field.named_parameters()
    )
    for name, value in checkpoint.adam.m.items():
        sections.append((f"adam.m.{name}", value))
    for name, value in checkpoint.adam.v.items():
        sections.append((f"adam.v.{name}", value))
    sections.append(("proxy.vertices", np.stack([mesh.vertices for mesh in mapper.sequence.frames])))
    sections.append(("proxy.faces", np.asarray(mapper.sequence.faces, dtype=np.int64)))
    if mapper.sequence.uv_per_corner is not None:
        sections.append(("proxy.uv", np.asarray(mapper.sequence.uv_per_corner, dtype=np.float64)))
    meta = {
        "run_config": model.run.to_text(),
        "iteration": checkpoint.iteration,
        "frame_count": len(mapper.sequence),
        "coord_mode": mapper.mode.value,
        "squash_k": mapper.squash.k,
        "normalizer": None
        if mapper.normalizer is None
        else [mapper.normalizer.box_min.tolist(), mapper.normalizer.box_max.tolist()],
        "loss_weights": dataclasses.asdict(model.weights),
        "adam": {
            "step": checkpoint.adam.step,
            "beta1": checkpoint.adam.beta1,
            "beta2": checkpoint.adam.beta2,
            "eps": checkpoint.adam.eps,
        },
    }
    sections.append(("meta", np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)))

    path = Path(path)
    with path.open("wb") as fp:
        body = io.BytesIO()
        body.write(MAGIC)
        body.write(struct.pack("<II", VERSION, len(sections)))
        for name, array in sections:
            _write_section(body, name, array)
        data = body.getvalue()
        fp.write(data)
        fp.write(struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF))
    logger.info("Saved checkpoint at iteration %d to %s", checkpoint.iteration, path)


def load_checkpoint(path: str | Path, proxies: ProxySequence | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Without ``proxies`` the stored training proxies are used; replacements
    must share faces and UV atlas with them.

    Raises:
        CheckpointError: Bad magic, unsupported version, truncation, checksum
            mismatch or missing tensors
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError("Checkpoint is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    body, trailer = data[:-4], data[-4:]
    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {VERSION}")
    (crc,) = struct.unpack("<I", trailer)
    if crc != zlib.crc32(body) & 0xFFFFFFFF:
        raise CheckpointError("Checkpoint checksum mismatch (file is corrupt or truncated)")
    tensors = dict(reader.section() for _ in range(count))
    if reader.pos != len(body):
        raise CheckpointError("Trailing data after the last section")
    if "meta" not in tensors:
        raise CheckpointError("Checkpoint has no metadata section")
    meta = json.loads(tensors.pop("meta").tobytes().decode("utf-8"))

    faces = tensors.pop("proxy.faces", None)
    uv = tensors.pop("proxy.uv", None)
    vertices = tensors.pop("proxy.vertices", None)
    if proxies is None:
        if faces is None or vertices is None:
            raise CheckpointError("Checkpoint stores no proxy sequence")
        proxies = validate_sequence([TriangleMesh(v, faces, uv) for v in vertices])
    if faces is None or not np.array_equal(faces, proxies.faces):
        raise CheckpointError("Proxy faces differ from the checkpoint's training proxies")
    if uv is not None and (proxies.uv_per_corner is None or not np.allclose(uv, proxies.uv_per_corner, rtol=0.0, atol=1e-9)):
        raise CheckpointError("Proxy UV atlas differs from the checkpoint's training proxies")

    run = RunConfig.from_text(meta["run_config"])
    mode = CoordMode(meta["coord_mode"])
    normalizer = None if meta["normalizer"] is None else TemplateNormalizer(*map(np.asarray, meta["normalizer"]))
    mapper = IntrinsicMapper(proxies, DistanceSquash(meta["squash_k"]), normalizer, mode, run.leaf_size, run.threads)
    cfg = FieldConfig.from_run_config(run, mode.dim, meta["frame_count"])

    def tensor(name: str) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"Checkpoint is missing tensor '{name}'")
        return tensors[name]

    def mlp(prefix: str, depth: int) -> Mlp:
        layers = range(depth + 1)
        return Mlp([tensor(f"{prefix}.w{i}") for i in layers], [tensor(f"{prefix}.b{i}") for i in layers], cfg.activation)

    try:
        nf = NeuralField(
            cfg,
            HashTables(cfg.radiance_grid, tensor("radiance.tables")),
            mlp("radiance.mlp", cfg.mlp_depth),
            HashTables(cfg.offset_grid, tensor("offset.tables")),
            mlp("offset.mlp", cfg.offset_mlp_depth),
            FrameLatents(tensor("latents")),
        )
    except ValueError as e:
        raise CheckpointError(f"Checkpoint tensors do not match its configuration: {e}") from e
    if len(proxies) != cfg.frame_count:
        raise CheckpointError(f"Checkpoint was trained on {cfg.frame_count} frames, got {len(proxies)}")

    adam_meta = meta["adam"]
    adam = AdamState(adam_meta["beta1"], adam_meta["beta2"], adam_meta["eps"], adam_meta["step"])
    for name in nf.parameters():
        if f"adam.m.{name}" in tensors:
            adam.m[name] = tensors[f"adam.m.{name}"]
            adam.v[name] = tensor(f"adam.v.{name}")
    model = Model(run, nf, mapper, LossWeights(**meta["loss_weights"]))
    return Checkpoint(model, adam, int(meta["iteration"]))
