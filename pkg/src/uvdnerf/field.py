"""The learnable field and its optimizer.

A radiance MLP reads hash-encoded intrinsic coordinates and predicts
density and color. An optional offset MLP, conditioned on a per-frame latent
code, shifts the coordinates before they are encoded. All gradients are
written out by hand.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .config import RunConfig
from .coords import IntrinsicMapper, apply_offset
from .encoding import HashGridConfig, HashTables, encode, encode_backward
from .errors import ConfigError
from .render import FieldQuery

logger = logging.getLogger(__name__)

# Density logits above this are clamped before softplus.
DENSITY_CLAMP = 30.0
LATENT_INIT_SCALE = 0.01


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, stable for large |x|."""
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


@dataclass
class _MlpCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


class Mlp:
    """Fully connected network with a linear output layer.

    Attributes:
        weights: Per-layer (fan_in, fan_out) matrices
        biases: Per-layer (fan_out,) vectors
        activation: Hidden activation, "relu" or "softplus"
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], activation: str = "relu") -> None:
        if len(weights) != len(biases) or not weights:
            raise ValueError("MLP needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"Layer {i} has weight {w.shape} and bias {b.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"Layer {i} expects {w.shape[0]} inputs, previous layer gives {weights[i - 1].shape[1]}")
        if activation not in ("relu", "softplus"):
            raise ValueError(f"Unknown activation {activation!r}")
        self.weights = weights
        self.biases = biases
        self.activation = activation
        self.weight_grads = [np.zeros_like(w) for w in weights]
        self.bias_grads = [np.zeros_like(b) for b in biases]

    @classmethod
    def initialize(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        activation: str = "relu",
        zero_last: bool = False,
        dtype: np.dtype | type = np.float32,
    ) -> Mlp:
        """He-normal hidden layers; optionally an all-zero output layer."""
        weights = []
        biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            weights.append(w.astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, activation)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[1]

    def _activate(self, x: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(x, 0.0)
        return softplus(x)

    def _activate_grad(self, x: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return (x > 0.0).astype(x.dtype)
        return sigmoid(x)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, _MlpCache]:
        cache = _MlpCache([], [])
        last = len(self.weights) - 1
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            h = h @ w + b
            if i < last:
                cache.pre_activations.append(h)
                h = self._activate(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: _MlpCache, grad_output: np.ndarray) -> np.ndarray:
        """Accumulate weight gradients; return dLoss/dInput."""
        g = grad_output
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * self._activate_grad(cache.pre_activations[i])
            self.weight_grads[i] += (cache.inputs[i].T @ g).astype(self.weight_grads[i].dtype)
            self.bias_grads[i] += g.sum(axis=0).astype(self.bias_grads[i].dtype)
            g = g @ self.weights[i].T
        return g

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w, self.weight_grads[i]
            yield f"{prefix}.b{i}", b, self.bias_grads[i]


class FrameLatents:
    """One learnable conditioning vector per frame."""

    def __init__(self, values: np.ndarray) -> None:
        if values.ndim != 2:
            raise ValueError(f"Latents must be a (frames, dim) array, got shape {values.shape}")
        self.values = values
        self.grads = np.zeros_like(values)

    @classmethod
    def initialize(
        cls, frames: int, dim: int, rng: np.random.Generator, dtype: np.dtype | type = np.float32
    ) -> FrameLatents:
        return cls(rng.normal(0.0, LATENT_INIT_SCALE, size=(frames, dim)).astype(dtype))

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class FieldOutput:
    """Density and color at a batch of points.

    Attributes:
        sigma: Non-negative densities, shape (P,)
        color: Radiance in [0, 1], shape (P, 3)
        offset: Coordinate offsets, shape (P, dim); zeros without an offset net
        coords: Offset-corrected coordinates fed to the radiance encoder
    """

    sigma: np.ndarray
    color: np.ndarray
    offset: np.ndarray
    coords: np.ndarray
    cache: dict[str, Any] = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of a :class:`NeuralField`."""

    radiance_grid: HashGridConfig
    offset_grid: HashGridConfig
    frame_count: int
    mlp_width: int = 64
    mlp_depth: int = 2
    offset_mlp_width: int = 64
    offset_mlp_depth: int = 2
    latent_dim: int = 8
    offset_bound: float = 0.05
    activation: str = "relu"
    use_offset: bool = True
    table_init_scale: float = 1e-4

    @property
    def dim(self) -> int:
        return self.radiance_grid.dim

    @classmethod
    def from_run_config(cls, run: RunConfig, dim: int, frame_count: int) -> FieldConfig:
        """Architecture described by a run configuration."""
        try:
            radiance = HashGridConfig(
                levels=run.hash_levels,
                table_size=1 << run.hash_table_log2,
                feature_dim=run.hash_features,
                n_min=run.hash_n_min,
                n_max=run.hash_n_max,
                dim=dim,
                indexing=run.hash_indexing,
            )
            offset = HashGridConfig(
                levels=run.offset_hash_levels,
                table_size=1 << run.offset_hash_table_log2,
                feature_dim=run.offset_hash_features,
                n_min=run.offset_hash_n_min,
                n_max=run.offset_hash_n_max,
                dim=dim,
                indexing="hash" if run.hash_indexing == "hash" else "auto",
            )
        except ValueError as e:
            raise ConfigError(str(e), key="hash_indexing") from e
        return cls(
            radiance_grid=radiance,
            offset_grid=offset,
            frame_count=frame_count,
            mlp_width=run.mlp_width,
            mlp_depth=run.mlp_depth,
            offset_mlp_width=run.offset_mlp_width,
            offset_mlp_depth=run.offset_mlp_depth,
            latent_dim=run.latent_dim,
            offset_bound=run.offset_bound,
            activation=run.hidden_activation,
            use_offset=run.use_offset,
            table_init_scale=run.table_init_scale,
        )


class NeuralField:
    """Radiance field over intrinsic coordinates with an optional offset net."""

    def __init__(
        self,
        cfg: FieldConfig,
        radiance_tables: HashTables,
        radiance_mlp: Mlp,
        offset_tables: HashTables,
        offset_mlp: Mlp,
        latents: FrameLatents,
    ) -> None:
        if radiance_mlp.in_features != cfg.radiance_grid.output_dim or radiance_mlp.out_features != 4:
            raise ValueError("Radiance MLP does not match the radiance encoder")
        expected_offset_in = cfg.offset_grid.output_dim + cfg.latent_dim
        if offset_mlp.in_features != expected_offset_in or offset_mlp.out_features != cfg.dim:
            raise ValueError("Offset MLP does not match the offset encoder and latent size")
        if latents.values.shape != (cfg.frame_count, cfg.latent_dim):
            raise ValueError(f"Latents have shape {latents.values.shape}, expected {(cfg.frame_count, cfg.latent_dim)}")
        self.cfg = cfg
        self.radiance_tables = radiance_tables
        self.radiance_mlp = radiance_mlp
        self.offset_tables = offset_tables
        self.offset_mlp = offset_mlp
        self.latents = latents

    @classmethod
    def initialize(
        cls, cfg: FieldConfig, rng: np.random.Generator, dtype: np.dtype | type = np.float32
    ) -> NeuralField:
        """Random tables and hidden layers; the offset head starts at zero."""
        radiance_tables = HashTables.initialize(cfg.radiance_grid, rng, cfg.table_init_scale, dtype)
        radiance_mlp = Mlp.initialize(
            [cfg.radiance_grid.output_dim] + [cfg.mlp_width] * cfg.mlp_depth + [4],
            rng,
            cfg.activation,
            dtype=dtype,
        )
        offset_tables = HashTables.initialize(cfg.offset_grid, rng, cfg.table_init_scale, dtype)
        offset_mlp = Mlp.initialize(
            [cfg.offset_grid.output_dim + cfg.latent_dim]
            + [cfg.offset_mlp_width] * cfg.offset_mlp_depth
            + [cfg.dim],
            rng,
            cfg.activation,
            zero_last=True,
            dtype=dtype,
        )
        latents = FrameLatents.initialize(cfg.frame_count, cfg.latent_dim, rng, dtype)
        return cls(cfg, radiance_tables, radiance_mlp, offset_tables, offset_mlp, latents)

    @property
    def dtype(self) -> np.dtype:
        return self.radiance_tables.params.dtype

    def _latent_rows(self, frames: int | np.ndarray, count: int) -> np.ndarray:
        frames = np.broadcast_to(np.asarray(frames, dtype=np.int64), (count,))
        if frames.size and (frames.min() < 0 or frames.max() >= len(self.latents)):
            raise IndexError(f"Frame index out of range for {len(self.latents)} latents")
        return frames

    def offsets(self, r: np.ndarray, frames: int | np.ndarray) -> tuple[np.ndarray, dict[str, Any]]:
        """Bounded coordinate offsets for points ``r`` at ``frames``."""
        frames = self._latent_rows(frames, len(r))
        encoded = encode(r, self.offset_tables)
        inputs = np.concatenate([encoded, self.latents.values[frames]], axis=1)
        raw, mlp_cache = self.offset_mlp.forward(inputs)
        squashed = np.tanh(raw)
        cache = {"r": r, "frames": frames, "mlp": mlp_cache, "tanh": squashed}
        return self.cfg.offset_bound * squashed, cache

    def radiance(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict[str, Any]]:
        """Density and color at corrected coordinates ``r``."""
        encoded = encode(r, self.radiance_tables)
        head, mlp_cache = self.radiance_mlp.forward(encoded)
        logits = head[:, 0]
        sigma = softplus(np.minimum(logits, DENSITY_CLAMP))
        color = sigmoid(head[:, 1:4])
        cache = {"r": r, "mlp": mlp_cache, "logits": logits, "color": color}
        return sigma, color, cache

    def forward(self, r: np.ndarray, frames: int | np.ndarray) -> FieldOutput:
        """Evaluate the field at intrinsic coordinates ``r`` of shape (P, dim)."""
        r = np.asarray(r, dtype=np.float64).reshape(-1, self.cfg.dim)
        cache: dict[str, Any] = {}
        if self.cfg.use_offset:
            delta, cache["offset"] = self.offsets(r, frames)
            shifted = r + delta
            corrected = apply_offset(r, delta)
            cache["inside"] = (shifted >= 0.0) & (shifted <= 1.0)
        else:
            delta = np.zeros_like(r)
            corrected = r
        sigma, color, cache["radiance"] = self.radiance(corrected)
        return FieldOutput(sigma, color, delta, corrected, cache)

    def backward(
        self,
        out: FieldOutput,
        grad_sigma: np.ndarray,
        grad_color: np.ndarray,
        grad_offset: np.ndarray | None = None,
    ) -> None:
        """Accumulate parameter gradients for one :meth:`forward` result."""
        rad = out.cache["radiance"]
        logits = rad["logits"]
        color = rad["color"]
        grad_head = np.empty((len(logits), 4), dtype=np.float64)
        grad_head[:, 0] = grad_sigma * sigmoid(logits) * (logits < DENSITY_CLAMP)
        grad_head[:, 1:4] = grad_color * color * (1.0 - color)
        grad_encoded = self.radiance_mlp.backward(rad["mlp"], grad_head)
        grad_coords = encode_backward(
            rad["r"], grad_encoded, self.radiance_tables, input_grad=self.cfg.use_offset
        )
        if not self.cfg.use_offset:
            return
        assert grad_coords is not None
        off = out.cache["offset"]
        grad_delta = grad_coords * out.cache["inside"]
        if grad_offset is not None:
            grad_delta = grad_delta + grad_offset
        grad_raw = grad_delta * self.cfg.offset_bound * (1.0 - off["tanh"] ** 2)
        grad_inputs = self.offset_mlp.backward(off["mlp"], grad_raw)
        split = self.cfg.offset_grid.output_dim
        np.add.at(self.latents.grads, off["frames"], grad_inputs[:, split:].astype(self.latents.grads.dtype))
        encode_backward(off["r"], grad_inputs[:, :split], self.offset_tables, input_grad=False)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield ``(name, value, grad)`` for every learnable tensor."""
        yield "radiance.tables", self.radiance_tables.params, self.radiance_tables.grads
        yield from self.radiance_mlp.named_parameters("radiance.mlp")
        yield "offset.tables", self.offset_tables.params, self.offset_tables.grads
        yield from self.offset_mlp.named_parameters("offset.mlp")
        yield "latents", self.latents.values, self.latents.grads

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: value for name, value, _ in self.named_parameters()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: grad for name, _, grad in self.named_parameters()}

    def zero_grad(self) -> None:
        for _, _, grad in self.named_parameters():
            grad.fill(0.0)


def offset_field(r: np.ndarray, frame: int, nf: NeuralField) -> np.ndarray:
    """Offset Δr of intrinsic coordinates at ``frame``; each component within the bound."""
    batch = np.asarray(r, dtype=np.float64)
    delta, _ = nf.offsets(batch.reshape(-1, nf.cfg.dim), frame)
    return delta.reshape(batch.shape)


def radiance_field(r: np.ndarray, nf: NeuralField) -> FieldOutput:
    """Density and color at coordinates ``r`` without any offset."""
    batch = np.asarray(r, dtype=np.float64).reshape(-1, nf.cfg.dim)
    sigma, color, cache = nf.radiance(batch)
    return FieldOutput(sigma, color, np.zeros_like(batch), batch, {"radiance": cache})


def field_at_point(x: np.ndarray, frame: int, nf: NeuralField, mapper: IntrinsicMapper) -> FieldOutput:
    """Full pipeline for Euclidean points: intrinsic map, offset, radiance."""
    query = mapper.query(np.asarray(x, dtype=np.float64).reshape(-1, 3), frame)
    return nf.forward(query.coords, frame)


@dataclass
class AdamState:
    """Moment buffers of the Adam optimizer."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Apply one bias-corrected Adam update in place and zero ``grads``.

    Raises:
        ValueError: A gradient is missing or its shape differs from its parameter
    """
    for name, value in params.items():
        if name not in grads:
            raise ValueError(f"Missing gradient for parameter '{name}'")
        if grads[name].shape != value.shape:
            raise ValueError(f"Gradient for '{name}' has shape {grads[name].shape}, parameter has {value.shape}")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, value in params.items():
        grad = grads[name]
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        value -= update.astype(value.dtype)
        grad.fill(0.0)


def learning_rate(iteration: int, final_iteration: int, start: float = 2e-3, end: float = 2e-5) -> float:
    """Exponential decay from ``start`` at iteration 0 to ``end`` at ``final_iteration``."""
    if final_iteration <= 0:
        return start
    progress = min(max(iteration / final_iteration, 0.0), 1.0)
    return float(start * (end / start) ** progress)


def field_query(nf: NeuralField, mapper: IntrinsicMapper) -> FieldQuery:
    """Adapt a field and its coordinate mapper to the renderer's query signature."""

    def query(points: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
        out = field_at_point(points, frame, nf, mapper)
        return out.sigma, out.color

    return query
