"""Multi-resolution hash-grid encoding with hand-written gradients.

Each level scales the input by its grid resolution, gathers the feature
vectors at the 2^dim corners of the enclosing cell, and interpolates them
multilinearly. Corners are addressed either injectively (dense indexing,
when the level's lattice fits into the table) or through a spatial hash.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import INDEXING_MODES

logger = logging.getLogger(__name__)

PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)

# Guards floor(n_min * b**l) against landing one below an exact integer.
RESOLUTION_EPS = 1e-9


@dataclass(frozen=True)
class HashGridConfig:
    """Shape of a hash-grid encoder.

    Attributes:
        levels: Number of resolution levels L
        table_size: Entries per level J, a power of two
        feature_dim: Feature vector width F
        n_min: Coarsest grid resolution
        n_max: Finest grid resolution
        dim: Input dimensionality, 3 or 4
        indexing: "auto" (dense where the lattice fits), "dense" or "hash"
    """

    levels: int = 16
    table_size: int = 2**19
    feature_dim: int = 2
    n_min: int = 16
    n_max: int = 1024
    dim: int = 3
    indexing: str = "auto"

    def __post_init__(self) -> None:
        if self.levels < 2:
            raise ValueError(f"Hash grid needs at least 2 levels, got {self.levels}")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"Table size must be a power of two, got {self.table_size}")
        if self.feature_dim < 1:
            raise ValueError(f"Feature dimension must be positive, got {self.feature_dim}")
        if not 1 <= self.n_min < self.n_max:
            raise ValueError(f"Need 1 <= n_min < n_max, got {self.n_min}, {self.n_max}")
        if self.dim not in (3, 4):
            raise ValueError(f"Input dimension must be 3 or 4, got {self.dim}")
        if self.indexing not in INDEXING_MODES:
            raise ValueError(f"Unknown indexing mode {self.indexing!r}")
        if self.indexing == "dense":
            for level, n in enumerate(level_resolutions(self)):
                if (n + 1) ** self.dim > self.table_size:
                    raise ValueError(
                        f"Dense indexing needs {(n + 1) ** self.dim} entries at level {level},"
                        f" table holds {self.table_size}"
                    )

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim

    @property
    def corner_count(self) -> int:
        return 1 << self.dim


def level_resolutions(cfg: HashGridConfig) -> list[int]:
    """Grid resolution of every level, geometric from n_min to n_max."""
    growth = math.exp((math.log(cfg.n_max) - math.log(cfg.n_min)) / (cfg.levels - 1))
    return [int(math.floor(cfg.n_min * growth**level + RESOLUTION_EPS)) for level in range(cfg.levels)]


def dense_levels(cfg: HashGridConfig) -> list[bool]:
    """Which levels use injective dense indexing under the config's mode."""
    if cfg.indexing == "hash":
        return [False] * cfg.levels
    return [(n + 1) ** cfg.dim <= cfg.table_size for n in level_resolutions(cfg)]


def spatial_hash(cells: np.ndarray, table_size: int) -> np.ndarray:
    """Hash integer grid cells into ``[0, table_size)``.

    XOR over dimensions of ``c_i * PRIMES[i]`` in wrapping uint64 arithmetic,
    reduced modulo the table size.

    Args:
        cells: Non-negative integer coordinates, shape (..., dim)
        table_size: Power-of-two table size

    Returns:
        int64 indices of shape (...)
    """
    cells = np.asarray(cells)
    dim = cells.shape[-1]
    if dim > len(PRIMES):
        raise ValueError(f"Cells have {dim} dimensions, at most {len(PRIMES)} supported")
    coords = cells.astype(np.uint64)
    acc = np.zeros(cells.shape[:-1], dtype=np.uint64)
    for i in range(dim):
        acc ^= coords[..., i] * PRIMES[i]
    return (acc % np.uint64(table_size)).astype(np.int64)


def dense_index(cells: np.ndarray, resolution: int) -> np.ndarray:
    """Injective lattice index ``sum_i c_i * (N + 1)**i``."""
    cells = np.asarray(cells, dtype=np.int64)
    stride = 1
    index = np.zeros(cells.shape[:-1], dtype=np.int64)
    for i in range(cells.shape[-1]):
        index += cells[..., i] * stride
        stride *= resolution + 1
    return index


class HashTables:
    """Learnable feature tables of one encoder plus their gradient accumulators.

    ``params`` and ``grads`` both have shape (L, J, F).
    """

    def __init__(self, cfg: HashGridConfig, params: np.ndarray) -> None:
        expected = (cfg.levels, cfg.table_size, cfg.feature_dim)
        if params.shape != expected:
            raise ValueError(f"Table shape {params.shape} does not match config {expected}")
        self.cfg = cfg
        self.params = params
        self.grads = np.zeros_like(params)
        self.resolutions = level_resolutions(cfg)
        self.dense = dense_levels(cfg)

    @classmethod
    def initialize(
        cls,
        cfg: HashGridConfig,
        rng: np.random.Generator,
        scale: float = 1e-4,
        dtype: np.dtype | type = np.float32,
    ) -> HashTables:
        """Tables drawn uniformly from ``[-scale, scale]``."""
        shape = (cfg.levels, cfg.table_size, cfg.feature_dim)
        params = rng.uniform(-scale, scale, size=shape).astype(dtype)
        logger.debug(
            "Initialized %d-level hash grid (%d dense levels, %d entries each)",
            cfg.levels,
            sum(level_dense for level_dense in dense_levels(cfg)),
            cfg.table_size,
        )
        return cls(cfg, params)

    def zero_grad(self) -> None:
        self.grads.fill(0.0)

    def corner_indices(self, level: int, cells: np.ndarray) -> np.ndarray:
        """Table slots of integer cells at ``level``."""
        if self.dense[level]:
            return dense_index(cells, self.resolutions[level])
        return spatial_hash(cells, self.cfg.table_size)


@dataclass(frozen=True)
class _Cell:
    """Enclosing cell of a batch of points at one level."""

    base: np.ndarray
    frac: np.ndarray


def _locate(z: np.ndarray, resolution: int) -> _Cell:
    scaled = z * resolution
    base = np.clip(np.floor(scaled), 0, resolution - 1).astype(np.int64)
    return _Cell(base, scaled - base)


def _corner_bits(corner: int, dim: int) -> np.ndarray:
    return np.array([(corner >> i) & 1 for i in range(dim)], dtype=np.int64)


def _corner_weight(frac: np.ndarray, bits: np.ndarray) -> np.ndarray:
    factors = np.where(bits.astype(bool), frac, 1.0 - frac)
    return np.prod(factors, axis=-1)


def _as_batch(z: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = z.reshape(-1, dim)
    return np.clip(z, 0.0, 1.0), single


def encode(z: np.ndarray, tables: HashTables) -> np.ndarray:
    """Encode points of the unit cube into concatenated level features.

    Args:
        z: Points of shape (P, dim) or a single point of shape (dim,)
        tables: Feature tables

    Returns:
        Features of shape (P, L*F), or (L*F,) for a single point
    """
    cfg = tables.cfg
    z, single = _as_batch(z, cfg.dim)
    dtype = tables.params.dtype
    out = np.zeros((len(z), cfg.levels, cfg.feature_dim), dtype=dtype)
    for level, resolution in enumerate(tables.resolutions):
        cell = _locate(z, resolution)
        table = tables.params[level]
        for corner in range(cfg.corner_count):
            bits = _corner_bits(corner, cfg.dim)
            weight = _corner_weight(cell.frac, bits).astype(dtype)
            slots = tables.corner_indices(level, cell.base + bits)
            out[:, level] += weight[:, None] * table[slots]
    flat = out.reshape(len(z), cfg.output_dim)
    return flat[0] if single else flat


def encode_backward(
    z: np.ndarray,
    grad_output: np.ndarray,
    tables: HashTables,
    input_grad: bool = True,
) -> np.ndarray | None:
    """Accumulate table gradients and return the gradient w.r.t. ``z``.

    Every touched corner entry receives the upstream gradient scaled by its
    interpolation weight; colliding corners sum. The input gradient is the
    derivative of the multilinear interpolation inside each point's cell.

    Args:
        z: The points passed to the matching :func:`encode` call
        grad_output: dLoss/dFeatures, same leading shape as the encoding
        tables: Tables whose ``grads`` receive the accumulation
        input_grad: Whether to compute dLoss/dz

    Returns:
        dLoss/dz shaped like ``z``, or None when ``input_grad`` is False
    """
    cfg = tables.cfg
    z, single = _as_batch(z, cfg.dim)
    g = np.asarray(grad_output).reshape(len(z), cfg.levels, cfg.feature_dim)
    dz = np.zeros_like(z) if input_grad else None
    for level, resolution in enumerate(tables.resolutions):
        g_level = g[:, level].astype(np.float64)
        if not g_level.any():
            continue
        cell = _locate(z, resolution)
        table = tables.params[level]
        slots_all = []
        weights_all = []
        for corner in range(cfg.corner_count):
            bits = _corner_bits(corner, cfg.dim)
            weight = _corner_weight(cell.frac, bits)
            slots = tables.corner_indices(level, cell.base + bits)
            slots_all.append(slots)
            weights_all.append(weight)
            if dz is not None:
                projected = np.einsum("pf,pf->p", table[slots].astype(np.float64), g_level)
                for axis in range(cfg.dim):
                    others = np.delete(np.arange(cfg.dim), axis)
                    partial = _corner_weight(cell.frac[:, others], bits[others])
                    sign = 1.0 if bits[axis] else -1.0
                    dz[:, axis] += sign * resolution * partial * projected
        slots_cat = np.concatenate(slots_all)
        weights_cat = np.concatenate(weights_all)
        for feature in range(cfg.feature_dim):
            upstream = np.tile(g_level[:, feature], cfg.corner_count)
            tables.grads[level, :, feature] += np.bincount(
                slots_cat, weights=weights_cat * upstream, minlength=cfg.table_size
            ).astype(tables.grads.dtype)
    if dz is None:
        return None
    return dz[0] if single else dz
