"""Geometry builders and gradient-check utilities shared by the tests."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from uvdnerf.config import RunConfig
from uvdnerf.mesh import TriangleMesh


def cube_mesh() -> TriangleMesh:
    """Unit cube [0, 1]^3 with outward counter-clockwise faces.

    Vertex ``i`` sits at ``(i & 1, (i >> 1) & 1, (i >> 2) & 1)``.
    """
    vertices = [[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)]
    faces = [
        (0, 2, 3), (0, 3, 1),  # z = 0
        (4, 5, 7), (4, 7, 6),  # z = 1
        (0, 1, 5), (0, 5, 4),  # y = 0
        (2, 6, 7), (2, 7, 3),  # y = 1
        (0, 4, 6), (0, 6, 2),  # x = 0
        (1, 3, 7), (1, 7, 5),  # x = 1
    ]
    return TriangleMesh(np.array(vertices, dtype=np.float64), np.array(faces))


def finite_difference(
    loss: Callable[[], float], value: np.ndarray, index: tuple[int, ...], step: float
) -> float:
    """Central difference of ``loss()`` w.r.t. ``value[index]``; the entry is restored."""
    original = value[index]
    value[index] = original + step
    upper = loss()
    value[index] = original - step
    lower = loss()
    value[index] = original
    return float((upper - lower) / (2.0 * step))


def relative_error(analytic: float, numeric: float, floor: float = 1e-9) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_run_config() -> RunConfig:
    """Desk-scale run: float64, two-level grids, narrow MLPs."""
    return RunConfig(
        dtype="float64",
        hash_levels=2,
        hash_table_log2=10,
        hash_n_min=4,
        hash_n_max=16,
        offset_hash_levels=2,
        offset_hash_table_log2=8,
        offset_hash_n_min=2,
        offset_hash_n_max=8,
        mlp_width=8,
        mlp_depth=1,
        offset_mlp_width=8,
        offset_mlp_depth=1,
        latent_dim=2,
        n_samples=8,
        batch_rays=32,
        iterations=3,
        eval_every=2,
        mask_dilation=1,
    )
