"""Intrinsic coordinates of sample points relative to a proxy sequence.

Two variants map a Euclidean point near the frame-``t`` proxy to the unit
cube the field is defined on:

- UV-D: the UV of the nearest surface point plus the squashed signed distance.
- XYZ-D: the nearest point carried to the template frame by barycentric
  transfer, normalized to the padded template box, plus the squashed distance.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .mesh import ProxySequence, TriangleMesh
from .spatial import (
    DEFAULT_LEAF_SIZE,
    Bvh,
    SurfaceHits,
    build_bvh,
    signed_distances,
    surface_uvs,
    transfer_points,
)

logger = logging.getLogger(__name__)

# Steepness numerator: k = SQUASH_SCALE / template diagonal.
SQUASH_SCALE = 8.0
DEFAULT_PAD = 0.1

THREAD_CHUNK = 16384


class CoordMode(Enum):
    """Intrinsic coordinate variant."""

    UVD = "uvd"
    XYZD = "xyzd"

    @property
    def dim(self) -> int:
        return 3 if self is CoordMode.UVD else 4


@dataclass(frozen=True)
class DistanceSquash:
    """Sigmoid that maps signed distances into (0, 1).

    Attributes:
        k: Steepness in 1/scene-units
    """

    k: float

    def __post_init__(self) -> None:
        if not self.k > 0:
            raise ValueError(f"Squash steepness must be positive, got {self.k}")

    @classmethod
    def for_mesh(cls, mesh: TriangleMesh) -> DistanceSquash:
        """Default steepness: 8 over the template bounding-box diagonal."""
        return cls(SQUASH_SCALE / mesh.diagonal())

    def __call__(self, d: np.ndarray | float) -> np.ndarray:
        return squash(d, self.k)


def squash(d: np.ndarray | float, k: float) -> np.ndarray:
    """Evaluate ``1 / (1 + exp(-k d))``.

    Negative inputs are computed as ``1 - squash(-d)`` so that
    ``squash(-d) == 1 - squash(d)`` holds exactly.
    """
    d = np.asarray(d, dtype=np.float64)
    magnitude = np.abs(d)
    upper = 1.0 / (1.0 + np.exp(-k * magnitude))
    return np.where(d < 0.0, 1.0 - upper, upper)


@dataclass(frozen=True, eq=False)
class TemplateNormalizer:
    """Per-axis linear map of the padded template box onto [0, 1]^3."""

    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError("Normalizer box_min must be below box_max on every axis")
        object.__setattr__(self, "box_min", lo)
        object.__setattr__(self, "box_max", hi)

    @classmethod
    def for_mesh(cls, mesh: TriangleMesh, pad: float = DEFAULT_PAD) -> TemplateNormalizer:
        """Template box grown on each side by ``pad`` times its extent.

        Flat axes are padded by ``pad`` times the box diagonal instead.
        """
        lo, hi = mesh.bounds()
        extent = hi - lo
        margin = pad * np.where(extent > 0.0, extent, mesh.diagonal())
        return cls(lo - margin, hi + margin)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.box_min) / (self.box_max - self.box_min)


def apply_offset(r: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Add an offset to intrinsic coordinates and clamp to the unit cube."""
    r = np.asarray(r)
    delta = np.asarray(delta)
    if r.shape[-1] != delta.shape[-1]:
        raise ValueError(f"Offset has {delta.shape[-1]} components, coordinate has {r.shape[-1]}")
    return np.clip(r + delta, 0.0, 1.0)


@dataclass(frozen=True)
class IntrinsicQuery:
    """Intrinsic coordinates and signed distances of a batch of points."""

    coords: np.ndarray
    signed_distance: np.ndarray
    hits: SurfaceHits


class IntrinsicMapper:
    """Batched intrinsic-coordinate queries against a proxy sequence.

    BVHs are built on first use per frame and shared between threads.
    """

    def __init__(
        self,
        sequence: ProxySequence,
        squash: DistanceSquash,
        normalizer: TemplateNormalizer | None = None,
        mode: CoordMode = CoordMode.UVD,
        leaf_size: int = DEFAULT_LEAF_SIZE,
        threads: int = 1,
    ) -> None:
        if mode is CoordMode.UVD and sequence.uv_per_corner is None:
            raise ValueError("UV-D coordinates need a proxy sequence with a UV atlas")
        if mode is CoordMode.XYZD and normalizer is None:
            normalizer = TemplateNormalizer.for_mesh(sequence.template)
        self.sequence = sequence
        self.squash = squash
        self.normalizer = normalizer
        self.mode = mode
        self.leaf_size = leaf_size
        self.threads = threads
        self._bvhs: dict[int, Bvh] = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.mode.dim

    @property
    def frame_count(self) -> int:
        return len(self.sequence)

    def bvh(self, frame: int) -> Bvh:
        """BVH of the frame's proxy (built once)."""
        if not 0 <= frame < len(self.sequence):
            raise IndexError(f"Frame {frame} out of range for {len(self.sequence)} frames")
        with self._lock:
            bvh = self._bvhs.get(frame)
            if bvh is None:
                bvh = build_bvh(self.sequence[frame], self.leaf_size)
                self._bvhs[frame] = bvh
                logger.debug("Built BVH for frame %d (%d nodes)", frame, bvh.node_count)
        return bvh

    def with_sequence(self, sequence: ProxySequence) -> IntrinsicMapper:
        """Same coordinate system against replacement proxies."""
        return IntrinsicMapper(
            sequence, self.squash, self.normalizer, self.mode, self.leaf_size, self.threads
        )

    def _query_chunk(self, points: np.ndarray, frame: int) -> IntrinsicQuery:
        mesh = self.sequence[frame]
        d, hits = signed_distances(points, mesh, self.bvh(frame))
        s = self.squash(d)[:, None]
        if self.mode is CoordMode.UVD:
            uv = surface_uvs(hits.face_index, hits.barycentric, mesh)
            coords = np.concatenate([uv, s], axis=1)
        else:
            assert self.normalizer is not None
            on_template = transfer_points(hits.face_index, hits.barycentric, self.sequence.template)
            coords = np.concatenate([self.normalizer(on_template), s], axis=1)
        return IntrinsicQuery(np.clip(coords, 0.0, 1.0), d, hits)

    def query(self, points: np.ndarray, frame: int) -> IntrinsicQuery:
        """Intrinsic coordinates of ``points`` relative to frame ``frame``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.bvh(frame)
        if self.threads <= 1 or len(points) <= THREAD_CHUNK:
            return self._query_chunk(points, frame)
        chunks = [points[i : i + THREAD_CHUNK] for i in range(0, len(points), THREAD_CHUNK)]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            parts = list(pool.map(lambda c: self._query_chunk(c, frame), chunks))
        hits = SurfaceHits(
            face_index=np.concatenate([p.hits.face_index for p in parts]),
            barycentric=np.concatenate([p.hits.barycentric for p in parts]),
            position=np.concatenate([p.hits.position for p in parts]),
            unsigned_distance=np.concatenate([p.hits.unsigned_distance for p in parts]),
        )
        return IntrinsicQuery(
            np.concatenate([p.coords for p in parts]),
            np.concatenate([p.signed_distance for p in parts]),
            hits,
        )


def uv_d(x: np.ndarray, frame: int, seq: ProxySequence, squash: DistanceSquash) -> np.ndarray:
    """UV-D coordinate (u, v, S(d)) of a single point."""
    mapper = IntrinsicMapper(seq, squash, mode=CoordMode.UVD)
    return mapper.query(np.asarray(x).reshape(1, 3), frame).coords[0]


def xyz_d(
    x: np.ndarray,
    frame: int,
    seq: ProxySequence,
    normalizer: TemplateNormalizer,
    squash: DistanceSquash,
) -> np.ndarray:
    """XYZ-D coordinate (N(p̄), S(d)) of a single point."""
    mapper = IntrinsicMapper(seq, squash, normalizer=normalizer, mode=CoordMode.XYZD)
    return mapper.query(np.asarray(x).reshape(1, 3), frame).coords[0]
