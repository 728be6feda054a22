"""Shared fixtures for uvdnerf tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from uvdnerf.config import ConfigNote, RunConfig
from uvdnerf.mesh import ProxySequence, TriangleMesh, validate_sequence
from uvdnerf.synth import Dataset, Scene, SceneSpec, export_dataset, generate_scene, import_dataset, uv_sphere

from .helpers import cube_mesh, tiny_run_config


@pytest.fixture
def note_log() -> list[ConfigNote]:
    """Fresh note log for each test."""
    return []


@pytest.fixture
def triangle() -> TriangleMesh:
    """Single counter-clockwise triangle in the z = 0 plane with a UV atlas."""
    return TriangleMesh(
        vertices=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        faces=np.array([[0, 1, 2]]),
        uv_per_corner=np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]),
    )


@pytest.fixture
def cube() -> TriangleMesh:
    return cube_mesh()


@pytest.fixture
def sphere() -> TriangleMesh:
    """Coarse UV sphere of radius 1."""
    return uv_sphere(8, 12)


@pytest.fixture
def rigid_sequence(sphere: TriangleMesh) -> ProxySequence:
    """Three frames related by rigid motions of a stretched sphere."""
    template = sphere.with_vertices(sphere.vertices * np.array([1.0, 1.4, 0.8]))
    frames = [template]
    for angles, shift in (([0.3, -0.5, 1.1], [0.4, -0.2, 0.1]), ([-1.2, 0.7, 0.2], [-0.3, 0.5, 0.6])):
        rotation = Rotation.from_euler("xyz", angles).as_matrix()
        frames.append(template.with_vertices(template.vertices @ rotation.T + np.array(shift)))
    return validate_sequence(frames)


@pytest.fixture
def rigid_pair(sphere: TriangleMesh) -> tuple[ProxySequence, np.ndarray, np.ndarray]:
    """Two-frame sequence whose second frame is a known rigid motion of the first."""
    template = sphere.with_vertices(sphere.vertices * np.array([1.0, 1.3, 0.7]))
    rotation = Rotation.from_euler("zyx", [0.8, -0.4, 0.3]).as_matrix()
    shift = np.array([0.5, -1.0, 0.25])
    moved = template.with_vertices(template.vertices @ rotation.T + shift)
    return validate_sequence([template, moved]), rotation, shift


@pytest.fixture
def tiny_run() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_spec() -> SceneSpec:
    return SceneSpec(
        rings=8,
        segments=12,
        frames=2,
        cameras=2,
        image_width=24,
        image_height=24,
        focal=30.0,
    )


@pytest.fixture(scope="session")
def tiny_scene(tiny_spec: SceneSpec) -> Scene:
    return generate_scene(tiny_spec, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_scene: Scene, tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Exported dataset shared by the whole session; tests must not modify it."""
    root = tmp_path_factory.mktemp("dataset")
    export_dataset(tiny_scene, root)
    return root


@pytest.fixture
def tiny_dataset(tiny_dataset_dir: Path) -> Dataset:
    return import_dataset(tiny_dataset_dir)
